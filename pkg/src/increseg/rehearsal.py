"""Select and store the remembered fraction of a finished training stage.

Patches are scored by how much rare-class content they hold: class weights
come from median-frequency balancing, a patch's importance is the weighted
sum of its per-class pixel counts, and the buffer keeps the top scorers plus
a random sample of the remainder.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ClassSet
from .tiling import Patch, load_patch, save_patch

logger = logging.getLogger(__name__)


@dataclass
class ClassWeights:
    """Median-frequency class weights for one stage; the median-frequency
    class gets weight 1, absent classes get 0."""

    weights: dict[str, float]


@dataclass
class RehearsalBuffer:
    stage_id: int
    class_set: ClassSet
    patches: list[Patch]
    importance: list[float]
    provenance: list[str]  # "importance" | "random" per patch

    def __post_init__(self):
        if not (len(self.patches) == len(self.importance) == len(self.provenance)):
            raise ValueError("patches, importance, and provenance must align")

    def __len__(self):
        return len(self.patches)


def class_pixel_counts(patch: Patch, class_set: ClassSet) -> dict[str, int]:
    planes = patch.masks.planes
    return {
        c: int(planes[:, :, class_set.index(c)].sum(dtype=np.int64)) for c in class_set
    }


def class_frequencies(patches: list[Patch], class_set: ClassSet) -> dict[str, float]:
    """Fraction of all pixels (across patches) labeled as each class."""
    if not patches:
        raise ValueError("need at least one patch to compute frequencies")
    totals = dict.fromkeys(class_set, 0)
    pixels = 0
    for p in patches:
        if p.masks is None:
            raise ValueError("patches must carry masks for frequency computation")
        counts = class_pixel_counts(p, class_set)
        for c in class_set:
            totals[c] += counts[c]
        pixels += p.masks.planes.shape[0] * p.masks.planes.shape[1]
    return {c: totals[c] / pixels for c in class_set}


def class_weights(freqs: dict[str, float]) -> ClassWeights:
    """w_c = median(positive frequencies) / f_c; zero-frequency classes get 0."""
    positive = [f for f in freqs.values() if f > 0]
    if not positive:
        raise ValueError("all class frequencies are zero; cannot weight classes")
    med = float(np.median(positive))
    weights = {}
    for c, f in freqs.items():
        if f > 0:
            weights[c] = med / f
        else:
            logger.warning("class %r has zero frequency; weight set to 0", c)
            weights[c] = 0.0
    return ClassWeights(weights)


def patch_importance(patch_counts: dict[str, int], w: ClassWeights) -> float:
    """Weighted pixel-count sum: rare-class pixels dominate the score."""
    unknown = set(patch_counts) - set(w.weights)
    if unknown:
        raise ValueError(f"counts for classes without weights: {sorted(unknown)}")
    return float(sum(w.weights[c] * n for c, n in patch_counts.items()))


def select_rehearsal(patches: list[Patch], frac_importance: float,
                     frac_random: float, rng: np.random.Generator,
                     stage_id: int | None = None) -> RehearsalBuffer:
    """Keep ceil(frac_importance * N) highest-importance patches (ties broken
    by ascending patch order) plus ceil(frac_random * N) uniform draws from
    the remainder."""
    if frac_importance < 0 or frac_random < 0:
        raise ValueError("fractions must be non-negative")
    if frac_importance + frac_random > 1:
        raise ValueError(
            f"fraction sum {frac_importance + frac_random} exceeds 1"
        )
    if not patches:
        raise ValueError("cannot select from an empty patch list")
    class_set = patches[0].masks.classes
    if stage_id is None:
        stage_id = patches[0].stage_id

    n = len(patches)
    k_imp = math.ceil(frac_importance * n)
    k_rand = math.ceil(frac_random * n)

    scores = np.zeros(n, dtype=np.float64)
    if k_imp or k_rand:
        weights = class_weights(class_frequencies(patches, class_set))
        for i, p in enumerate(patches):
            scores[i] = patch_importance(class_pixel_counts(p, class_set), weights)

    order = sorted(range(n), key=lambda i: (-scores[i], i))
    imp_idx = sorted(order[:k_imp])
    remainder = sorted(set(range(n)) - set(imp_idx))
    k_rand = min(k_rand, len(remainder))
    rand_idx = sorted(
        rng.choice(len(remainder), size=k_rand, replace=False).tolist()
    ) if k_rand else []
    rand_idx = [remainder[i] for i in rand_idx]

    chosen = [(i, "importance") for i in imp_idx] + [(i, "random") for i in rand_idx]
    return RehearsalBuffer(
        stage_id=stage_id,
        class_set=class_set,
        patches=[patches[i] for i, _ in chosen],
        importance=[float(scores[i]) for i, _ in chosen],
        provenance=[tag for _, tag in chosen],
    )


def save_buffer(directory, buffer: RehearsalBuffer) -> Path:
    """Persist as a directory: buffer.json plus one patch cache file per patch."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, p in enumerate(buffer.patches):
        path = save_patch(directory, p)
        if path.name in files:
            raise ValueError(f"duplicate patch cache name {path.name}; "
                             "assign unique patch indices before buffering")
        files.append(path.name)
    meta = {
        "stage_id": buffer.stage_id,
        "classes": list(buffer.class_set),
        "importance": buffer.importance,
        "provenance": buffer.provenance,
        "files": files,
    }
    with open(directory / "buffer.json", "w") as f:
        json.dump(meta, f, indent=2)
    return directory


def load_buffer(directory) -> RehearsalBuffer:
    directory = Path(directory)
    with open(directory / "buffer.json") as f:
        meta = json.load(f)
    patches = [load_patch(directory / name) for name in meta["files"]]
    return RehearsalBuffer(
        stage_id=meta["stage_id"],
        class_set=ClassSet(tuple(meta["classes"])),
        patches=patches,
        importance=[float(v) for v in meta["importance"]],
        provenance=list(meta["provenance"]),
    )
