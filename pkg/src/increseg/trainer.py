"""Stage orchestration: hierarchical batch sampling, the interleaved
adapt/remember schedule, memory-network lifecycle, and the baseline
strategies (static, multiple, fixed representation, fine-tuning).

A stage trains the "updated" network while the frozen "memory" network (the
previous stage's result) supplies soft targets for the old classes; rem steps
replay one previous stage's rehearsal buffer with the other stages' head
channels frozen.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .augment import augment_patch, sample_params
from .data import ClassSet, DatasetManifest, Normalization, normalize_image
from .losses import adaptation_loss_from_logits, remembering_loss_from_logits
from .optim import AdamState, OptimizerConfig, optimizer_step
from .pipeline import StageData, merge_manifests, stage_patches
from .rehearsal import RehearsalBuffer, select_rehearsal
from .segnet import (
    FreezeMask,
    NetworkSpec,
    SegNetwork,
    backward,
    build_network,
    expand_classifier,
    forward_with_tape,
    freeze_for_remembering,
    full_mask,
    heads_only_mask,
)
from .tiling import Patch

logger = logging.getLogger(__name__)

STRATEGIES = (
    "static",
    "multiple",
    "fixed_representation",
    "fine_tuning",
    "incremental",
    "incremental_no_rem",
)


@dataclass(frozen=True)
class Strategy:
    kind: str

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.kind!r}; one of {STRATEGIES}")


@dataclass(frozen=True)
class ScheduleStep:
    kind: str  # "adapt" | "rem"
    stage_id: Optional[int] = None
    iterations: int = 1

    def __post_init__(self):
        if self.kind not in ("adapt", "rem"):
            raise ValueError(f"unknown schedule step kind {self.kind!r}")
        if self.kind == "rem" and self.stage_id is None:
            raise ValueError("rem steps need a stage id")
        if self.iterations < 1:
            raise ValueError("step iterations must be >= 1")


@dataclass
class StageSchedule:
    """Interleaving program: the cycle repeats until epochs * iters_per_epoch
    optimization steps have run; every step (adapt or rem) counts toward the
    budget and the cycle position carries across epoch boundaries."""

    cycle: list[ScheduleStep]
    epochs: int
    iters_per_epoch: int

    def __post_init__(self):
        if not self.cycle:
            raise ValueError("schedule cycle must be non-empty")
        if self.epochs < 1 or self.iters_per_epoch < 1:
            raise ValueError("epochs and iters_per_epoch must be >= 1")

    def flat_cycle(self) -> list[ScheduleStep]:
        return [replace(s, iterations=1) for s in self.cycle for _ in
                range(s.iterations)]


_STEP_RE = re.compile(r"^(adapt|rem\((\d+)\))$")


def parse_schedule(dsl: str) -> list[ScheduleStep]:
    """Parse a cycle DSL like "rem(1):1,adapt:4" into schedule steps."""
    steps = []
    for part in dsl.split(","):
        part = part.strip()
        if not part:
            continue
        head, _, count = part.partition(":")
        m = _STEP_RE.match(head.strip())
        if not m:
            raise ValueError(f"bad schedule step {part!r}")
        iters = int(count) if count else 1
        if m.group(2) is not None:
            steps.append(ScheduleStep("rem", int(m.group(2)), iters))
        else:
            steps.append(ScheduleStep("adapt", None, iters))
    if not steps:
        raise ValueError(f"empty schedule {dsl!r}")
    return steps


def format_schedule(cycle: list[ScheduleStep]) -> str:
    return ",".join(
        (f"rem({s.stage_id}):{s.iterations}" if s.kind == "rem"
         else f"adapt:{s.iterations}")
        for s in cycle
    )


def default_rem_cycle(prev_stage_ids: list[int],
                      adapt_per_rem: int = 4) -> list[ScheduleStep]:
    """One rem iteration per previous stage, adapt iterations split between
    them; with one previous stage this is rem:1/adapt:4, with two it is
    rem(1):1,adapt:2,rem(2):1,adapt:2."""
    if not prev_stage_ids:
        return [ScheduleStep("adapt", None, 1)]
    m = len(prev_stage_ids)
    adapt_share = max(1, round(adapt_per_rem / m))
    cycle = []
    for sid in prev_stage_ids:
        cycle.append(ScheduleStep("rem", sid, 1))
        cycle.append(ScheduleStep("adapt", None, adapt_share))
    return cycle


@dataclass
class TrainSettings:
    """Knobs shared by all stages of an experiment."""

    width_scale: float = 1.0
    in_channels: int = 3
    patch_size: int = 384
    patch_overlap: int = 32
    augment_enabled: bool = True
    augment_profile: str = "luxcarta"
    augment_rehearsal: bool = True
    eval_every: int = 0  # epochs between validation passes; 0 disables
    dtype: type = np.float32


def _child_rngs(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    seeds = rng.integers(0, 2**63 - 1, size=n)
    return [np.random.default_rng(int(s)) for s in seeds]


def _hierarchy(patches: list[Patch]):
    tree: dict[str, dict[str, list[int]]] = {}
    for i, p in enumerate(patches):
        tree.setdefault(p.country, {}).setdefault(p.city, []).append(i)
    countries = sorted(tree)
    return [(c, [(city, tree[c][city]) for city in sorted(tree[c])])
            for c in countries]


def sample_batch(patches: list[Patch], batch_size: int,
                 rng: np.random.Generator) -> list[Patch]:
    """Hierarchical draw per slot: uniform country, uniform city within it,
    uniform patch within the city. Untagged patches degrade to uniform."""
    if not patches:
        raise ValueError("cannot sample from an empty patch set")
    tree = _hierarchy(patches)
    out = []
    for _ in range(batch_size):
        country, cities = tree[rng.integers(0, len(tree))]
        _, idxs = cities[rng.integers(0, len(cities))]
        out.append(patches[idxs[rng.integers(0, len(idxs))]])
    return out


def _align_planes(masks, class_set: ClassSet) -> np.ndarray:
    if masks.classes.names == class_set.names:
        return masks.planes
    try:
        order = [masks.classes.index(c) for c in class_set]
    except ValueError as e:
        raise ValueError(f"patch masks lack a class from {class_set.names}") from e
    return masks.planes[:, :, order]


def assemble_batch(sampled: list[Patch], class_set: ClassSet,
                   norm: Normalization, rng: np.random.Generator,
                   settings: TrainSettings, augment: bool):
    """Stack sampled patches into network inputs and targets: optional
    augmentation on the raw intensities, then normalization."""
    xs, ys = [], []
    for p in sampled:
        if augment:
            p = augment_patch(p, sample_params(rng, settings.augment_profile))
        xs.append(normalize_image(p.image, norm))
        ys.append(_align_planes(p.masks, class_set))
    x = np.stack(xs).astype(settings.dtype)
    y = np.stack(ys).astype(settings.dtype)
    return x, y


def evaluate_patches(net: SegNetwork, patches: list[Patch],
                     class_set: ClassSet, norm: Normalization,
                     batch_size: int = 16):
    """Micro-averaged IoU/F1 of thresholded predictions on whole patches,
    restricted to class_set (a subset of the network's classes)."""
    from .evaluation import compute_report, threshold_probs

    chan = [net.class_set.index(c) for c in class_set]
    preds, gts = [], []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start : start + batch_size]
        x = np.stack([normalize_image(p.image, norm) for p in chunk])
        probs = net.forward(x.astype(net.dtype))[:, :, :, chan]
        for i, p in enumerate(chunk):
            preds.append(threshold_probs(probs[i]))
            gts.append(_align_planes(p.masks, class_set))
    return compute_report(preds, gts, class_set)


@dataclass
class ValSet:
    patches: list[Patch]
    class_set: ClassSet


MetricsSink = Optional[Callable[[dict], None]]


def _emit(metrics: list, sink: MetricsSink, record: dict):
    metrics.append(record)
    if sink is not None:
        sink(record)


def _run_stage(net: SegNetwork, data: StageData,
               buffers: dict[int, RehearsalBuffer],
               schedule: StageSchedule, opt: OptimizerConfig,
               rng: np.random.Generator, settings: TrainSettings,
               memory: Optional[SegNetwork], use_distil: bool,
               trainable: Optional[FreezeMask], val: Optional[ValSet],
               sink: MetricsSink) -> list[dict]:
    """Inner loop shared by every strategy; returns the metric records."""
    n_prev = len(net.class_set) - len(data.class_set)
    flat = schedule.flat_cycle()
    for step in flat:
        if step.kind == "rem" and step.stage_id not in buffers:
            raise ValueError(
                f"schedule references rem({step.stage_id}) but no such buffer"
            )
    adapt_rng, rem_rng = _child_rngs(rng, 2)
    state = AdamState()
    metrics: list[dict] = []
    trainable = trainable if trainable is not None else full_mask(net)

    total = schedule.epochs * schedule.iters_per_epoch
    for t in range(total):
        step = flat[t % len(flat)]
        epoch = t // schedule.iters_per_epoch
        if step.kind == "adapt":
            batch = sample_batch(data.patches, opt.batch_size, adapt_rng)
            x, y = assemble_batch(batch, data.class_set, data.normalization,
                                  adapt_rng, settings, settings.augment_enabled)
            p_mem = None
            if use_distil and n_prev > 0:
                p_mem = memory.forward(x, output="probabilities")
            logits, tape = forward_with_tape(net, x)
            if use_distil and n_prev > 0:
                value, dz = adaptation_loss_from_logits(y, logits, n_prev, p_mem)
            else:
                value, dz_curr = _class_only_loss(y, logits, n_prev)
                dz = np.zeros_like(logits)
                dz[..., n_prev:] = dz_curr
            grads = backward(net, tape, dz)
            optimizer_step(net.params, grads, state, opt, trainable)
            _emit(metrics, sink, {
                "type": "train", "stage": data.stage_id, "iter": t,
                "epoch": epoch, "kind": "adapt",
                "loss_total": value.total,
                "loss_class": value.components["class"],
                "loss_distil": value.components["distil"],
                "loss_rem": 0.0,
            })
        else:
            buf = buffers[step.stage_id]
            batch = sample_batch(buf.patches, opt.batch_size, rem_rng)
            x, y = assemble_batch(
                batch, buf.class_set, data.normalization, rem_rng, settings,
                settings.augment_enabled and settings.augment_rehearsal,
            )
            mask = freeze_for_remembering(net, buf.class_set)
            chan = [net.class_set.index(c) for c in buf.class_set]
            logits, tape = forward_with_tape(net, x)
            loss, dzj = remembering_loss_from_logits(y, logits[..., chan])
            dz = np.zeros_like(logits)
            dz[..., chan] = dzj
            grads = backward(net, tape, dz)
            optimizer_step(net.params, grads, state, opt, mask)
            _emit(metrics, sink, {
                "type": "train", "stage": data.stage_id, "iter": t,
                "epoch": epoch, "kind": "rem", "rem_stage": step.stage_id,
                "loss_total": loss, "loss_class": 0.0, "loss_distil": 0.0,
                "loss_rem": loss,
            })
        last_of_epoch = (t + 1) % schedule.iters_per_epoch == 0
        if val is not None and settings.eval_every and last_of_epoch:
            if (epoch + 1) % settings.eval_every == 0:
                report = evaluate_patches(net, val.patches, val.class_set,
                                          data.normalization)
                _emit(metrics, sink, {
                    "type": "eval", "stage": data.stage_id, "epoch": epoch,
                    "overall_iou": report.overall_iou,
                    "overall_f1": report.overall_f1,
                    "iou": {c: m.iou for c, m in report.per_class.items()},
                    "f1": {c: m.f1 for c, m in report.per_class.items()},
                })
    return metrics


def _class_only_loss(y, logits, n_prev):
    from .losses import LossValue, binary_ce_from_logits

    l_class, dz = binary_ce_from_logits(y, logits[..., n_prev:])
    return LossValue(total=l_class,
                     components={"class": l_class, "distil": 0.0}), dz


def train_stage_incremental(memory: Optional[SegNetwork],
                            d_curr: DatasetManifest,
                            buffers: list[RehearsalBuffer],
                            schedule: StageSchedule, opt: OptimizerConfig,
                            rng: np.random.Generator,
                            settings: TrainSettings = None,
                            val: Optional[ValSet] = None,
                            sink: MetricsSink = None):
    """One incremental stage: expand the frozen memory network with the new
    classes (or build fresh at stage 1), then run the interleaved schedule.
    Returns (trained network, metric records)."""
    settings = settings or TrainSettings()
    if memory is not None and memory.mode != "frozen-memory":
        raise ValueError("memory network must be frozen (use freeze_copy)")
    data = stage_patches(d_curr, settings.patch_size, settings.patch_overlap)
    init_rng, loop_rng = _child_rngs(rng, 2)
    if memory is None:
        spec = NetworkSpec(settings.in_channels, d_curr.class_set,
                           settings.width_scale)
        net = build_network(spec, init_rng, dtype=settings.dtype)
    else:
        net = expand_classifier(memory, d_curr.class_set, init_rng)
    buffer_map = {b.stage_id: b for b in buffers}
    metrics = _run_stage(net, data, buffer_map, schedule, opt, loop_rng,
                         settings, memory, use_distil=True, trainable=None,
                         val=val, sink=sink)
    return net, metrics


def run_strategy(strategy: Strategy | str,
                 stage_sequence: list[DatasetManifest],
                 opt: OptimizerConfig, rng: np.random.Generator,
                 epochs: int, iters_per_epoch: int,
                 settings: TrainSettings = None,
                 schedules: Optional[list[Optional[list[ScheduleStep]]]] = None,
                 rehearsal_fracs: tuple[float, float] = (0.15, 0.15),
                 val_sets: Optional[list[Optional[ValSet]]] = None,
                 sink: MetricsSink = None):
    """Run a full stage sequence under one learning strategy.

    Returns (networks, metrics): one network per completed stage for
    "multiple", otherwise the evolving network snapshot after each stage.
    """
    if isinstance(strategy, str):
        strategy = Strategy(strategy)
    settings = settings or TrainSettings()
    if not stage_sequence:
        raise ValueError("stage sequence is empty")
    ids = [m.stage_id for m in stage_sequence]
    if sorted(set(ids)) != ids:
        raise ValueError(f"stage ids must strictly increase, got {ids}")
    schedules = schedules or [None] * len(stage_sequence)
    val_sets = val_sets or [None] * len(stage_sequence)

    adapt_only = [ScheduleStep("adapt", None, 1)]

    def mk_schedule(cycle):
        return StageSchedule(cycle, epochs, iters_per_epoch)

    metrics: list[dict] = []
    nets: list[SegNetwork] = []

    def collect(records):
        metrics.extend(records)

    if strategy.kind == "static":
        merged = merge_manifests(stage_sequence)
        net, recs = train_stage_incremental(
            None, merged, [], mk_schedule(schedules[0] or adapt_only), opt,
            rng, settings, val=val_sets[0], sink=sink)
        collect(recs)
        return [net], metrics

    if strategy.kind == "multiple":
        for i, manifest in enumerate(stage_sequence):
            net, recs = train_stage_incremental(
                None, manifest, [], mk_schedule(schedules[i] or adapt_only),
                opt, rng, settings, val=val_sets[i], sink=sink)
            collect(recs)
            nets.append(net)
        return nets, metrics

    if strategy.kind in ("fixed_representation", "fine_tuning"):
        net = None
        for i, manifest in enumerate(stage_sequence):
            init_rng, loop_rng = _child_rngs(rng, 2)
            data = stage_patches(manifest, settings.patch_size,
                                 settings.patch_overlap)
            if net is None:
                spec = NetworkSpec(settings.in_channels, manifest.class_set,
                                   settings.width_scale)
                net = build_network(spec, init_rng, dtype=settings.dtype)
                trainable = None
            else:
                net = expand_classifier(net.freeze_copy(), manifest.class_set,
                                        init_rng)
                if strategy.kind == "fixed_representation":
                    trainable = heads_only_mask(net, manifest.class_set)
                else:
                    trainable = freeze_for_remembering(net, manifest.class_set)
            recs = _run_stage(net, data, {}, mk_schedule(schedules[i] or
                                                         adapt_only),
                              opt, loop_rng, settings, memory=None,
                              use_distil=False, trainable=trainable,
                              val=val_sets[i], sink=sink)
            collect(recs)
            nets.append(net)
        return nets, metrics

    # incremental / incremental_no_rem
    with_rem = strategy.kind == "incremental"
    sel_rng = _child_rngs(rng, 1)[0]
    memory = None
    buffers: list[RehearsalBuffer] = []
    for i, manifest in enumerate(stage_sequence):
        prev_ids = [b.stage_id for b in buffers]
        cycle = schedules[i]
        if cycle is None:
            cycle = default_rem_cycle(prev_ids) if (with_rem and prev_ids) \
                else adapt_only
        elif not with_rem:
            cycle = [s for s in cycle if s.kind == "adapt"] or adapt_only
        net, recs = train_stage_incremental(
            memory, manifest, buffers if with_rem else [],
            mk_schedule(cycle), opt, rng, settings,
            val=val_sets[i], sink=sink)
        collect(recs)
        nets.append(net)
        if with_rem and i + 1 < len(stage_sequence):
            data = stage_patches(manifest, settings.patch_size,
                                 settings.patch_overlap)
            buffers.append(select_rehearsal(
                data.patches, rehearsal_fracs[0], rehearsal_fracs[1],
                sel_rng, stage_id=manifest.stage_id))
        memory = net.freeze_copy()
    return nets, metrics
