"""Class-incremental semantic segmentation: memory-network distillation plus
importance-weighted rehearsal, with tiling, augmentation, and evaluation
utilities for aerial-style imagery."""

from .data import (
    BACKGROUND_ID,
    ClassSet,
    DatasetManifest,
    ManifestError,
    MaskStack,
    Normalization,
    labels_to_mask_stack,
    load_manifest,
    mask_stack_to_labels,
    normalize_image,
)
from .tiling import (
    Patch,
    PatchGrid,
    Window,
    compute_grid,
    extract_patches,
    stitch_predictions,
)
from .augment import (
    AugmentParams,
    apply_geometric,
    augment_patch,
    contrast_change,
    gamma_correct,
    sample_params,
)
from .rehearsal import (
    ClassWeights,
    RehearsalBuffer,
    class_frequencies,
    class_weights,
    load_buffer,
    patch_importance,
    save_buffer,
    select_rehearsal,
)
from .segnet import (
    CheckpointFormatError,
    FreezeMask,
    NetworkSpec,
    SegNetwork,
    build_network,
    expand_classifier,
    forward,
    freeze_for_remembering,
    load_checkpoint,
    save_checkpoint,
)
from .losses import (
    LossValue,
    adaptation_loss,
    binary_ce,
    remembering_loss,
)
from .optim import AdamState, OptimizerConfig, optimizer_step
from .evaluation import (
    MetricReport,
    compute_report,
    erode_gt,
    f1,
    iou,
    render_multiclass,
    threshold_probs,
)
from .pipeline import evaluate_manifest, merge_manifests, predict_raster, stage_patches
from .trainer import (
    ScheduleStep,
    StageSchedule,
    Strategy,
    TrainSettings,
    parse_schedule,
    run_strategy,
    sample_batch,
    train_stage_incremental,
)
from .synth import ShapeSpec, SyntheticSpec, TagStyle, synth_generate

__version__ = "0.1.0"
