"""Manifest-level plumbing: turn stage manifests into training patches, run
tiled inference over full rasters, and score predictions against manifests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import (
    ClassSet,
    DatasetManifest,
    ManifestItem,
    Normalization,
    load_item_masks,
    normalize_image,
    read_image,
)
from .evaluation import MetricReport, compute_report, erode_gt, threshold_probs
from .segnet import POOL_FACTOR, SegNetwork
from .tiling import Patch, compute_grid, extract_patches, stitch_predictions


@dataclass
class StageData:
    """One stage's patches, ready for sampling; images stay raw (normalization
    happens at batch-assembly time, after radiometric augmentation)."""

    stage_id: int
    class_set: ClassSet
    normalization: Normalization
    patches: list[Patch]


def stage_patches(manifest: DatasetManifest, patch_size: int,
                  overlap: int) -> StageData:
    """Load every manifest item and split it into tagged training patches with
    stage-unique patch indices."""
    patches = []
    counter = 0
    for item in manifest.items:
        img = read_image(item.image)
        masks = load_item_masks(item, manifest.class_set, img.shape[:2])
        grid = compute_grid(img.shape[:2], patch_size, overlap)
        for p in extract_patches(img, masks, grid,
                                 stage_id=manifest.stage_id,
                                 country=item.country, city=item.city):
            p.index = counter
            counter += 1
            patches.append(p)
    return StageData(manifest.stage_id, manifest.class_set,
                     manifest.normalization, patches)


def merge_manifests(manifests: list[DatasetManifest]) -> DatasetManifest:
    """Union of stages for static training: classes concatenated in stage
    order, items merged by image path (mask dicts combined). Classes without a
    mask on some item evaluate as all-background there."""
    if not manifests:
        raise ValueError("no manifests to merge")
    classes = manifests[0].class_set
    for m in manifests[1:]:
        classes = classes.union(m.class_set)
    by_image: dict = {}
    for m in manifests:
        for item in m.items:
            key = item.image
            if key in by_image:
                by_image[key].masks.update(item.masks)
            else:
                by_image[key] = ManifestItem(
                    image=item.image, masks=dict(item.masks),
                    country=item.country, city=item.city,
                )
    return DatasetManifest(
        stage_id=manifests[-1].stage_id,
        class_set=classes,
        normalization=manifests[0].normalization,
        items=list(by_image.values()),
    )


def _effective_patch(extent, patch_size):
    limit = (min(extent) // POOL_FACTOR) * POOL_FACTOR
    if limit < POOL_FACTOR:
        raise ValueError(f"raster extent {extent} smaller than {POOL_FACTOR}")
    return min(patch_size, limit)


def predict_raster(net: SegNetwork, image: np.ndarray, norm: Normalization,
                   patch_size: int = 2240, overlap: int = 64,
                   batch_size: int = 4) -> np.ndarray:
    """Tiled inference: split, classify, and average overlapping windows back
    to an H x W x K probability stack. The window size shrinks to the largest
    network-divisible size that fits small rasters."""
    image = np.asarray(image)
    eff = _effective_patch(image.shape[:2], patch_size)
    grid = compute_grid(image.shape[:2], eff, min(overlap, eff - 1))
    patches = extract_patches(image, None, grid)
    probs = []
    for start in range(0, len(patches), batch_size):
        chunk = patches[start : start + batch_size]
        x = np.stack([normalize_image(p.image, norm) for p in chunk])
        out = net.forward(x.astype(net.dtype), output="probabilities")
        probs.extend(np.asarray(out[i], dtype=np.float64) for i in range(len(chunk)))
    return stitch_predictions(probs, grid)


def evaluate_manifest(net: SegNetwork, manifest: DatasetManifest,
                      patch_size: int = 2240, overlap: int = 64,
                      erode_radius: int = 0, macro: bool = False,
                      stage: int = 0, epoch: int = 0) -> MetricReport:
    """Predict every manifest item and score the evaluated classes (the
    manifest's classes, which must be a subset of the network's)."""
    missing = [c for c in manifest.class_set if c not in net.class_set]
    if missing:
        raise ValueError(f"network lacks classes {missing}")
    chan = [net.class_set.index(c) for c in manifest.class_set]
    preds, gts, ignores = [], [], []
    for item in manifest.items:
        img = read_image(item.image)
        gt = load_item_masks(item, manifest.class_set, img.shape[:2])
        probs = predict_raster(net, img, manifest.normalization,
                               patch_size, overlap)[:, :, chan]
        preds.append(threshold_probs(probs))
        gts.append(gt.planes)
        ignores.append(erode_gt(gt, erode_radius) if erode_radius else None)
    return compute_report(preds, gts, manifest.class_set, ignores,
                          macro=macro, stage=stage, epoch=epoch)
