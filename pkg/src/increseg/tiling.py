"""Split large rasters into overlapping patches and stitch predictions back.

Windows start every (patch_size - overlap) pixels; a window that would run
past the raster edge is clamped so its end coincides with the edge, so every
window holds real pixels and the full extent is covered.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .data import ClassSet, MaskStack


class Window(NamedTuple):
    row0: int
    col0: int
    height: int
    width: int


@dataclass(frozen=True)
class PatchGrid:
    windows: tuple[Window, ...]
    source_extent: tuple[int, int]
    patch_size: int
    overlap: int


@dataclass
class Patch:
    """One training/inference unit: an image crop, optional mask crop, tags."""

    image: np.ndarray
    masks: Optional[MaskStack]
    window: Window
    stage_id: int = 0
    country: str = ""
    city: str = ""
    index: int = 0


def _starts(extent: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, extent - patch + 1, stride))
    last = extent - patch
    if starts[-1] != last:
        starts.append(last)
    return starts


def compute_grid(extent, patch_size: int, overlap: int) -> PatchGrid:
    """Row-major grid of patch_size windows with the requested overlap."""
    h, w = extent
    if not 0 <= overlap < patch_size:
        raise ValueError(f"need 0 <= overlap < patch_size, got {overlap}/{patch_size}")
    if patch_size > min(h, w):
        raise ValueError(f"patch_size {patch_size} exceeds extent {extent}")
    stride = patch_size - overlap
    windows = [
        Window(r, c, patch_size, patch_size)
        for r in _starts(h, patch_size, stride)
        for c in _starts(w, patch_size, stride)
    ]
    return PatchGrid(tuple(windows), (h, w), patch_size, overlap)


def extract_patches(img: np.ndarray, masks: Optional[MaskStack], grid: PatchGrid,
                    **tags) -> list[Patch]:
    """One Patch per grid window; crops are views copied bit-exactly."""
    img = np.asarray(img)
    if img.shape[:2] != grid.source_extent:
        raise ValueError(
            f"raster shape {img.shape[:2]} != grid extent {grid.source_extent}"
        )
    if masks is not None and masks.planes.shape[:2] != grid.source_extent:
        raise ValueError(
            f"mask shape {masks.planes.shape[:2]} != grid extent {grid.source_extent}"
        )
    patches = []
    for i, win in enumerate(grid.windows):
        r, c, hh, ww = win
        crop = img[r : r + hh, c : c + ww].copy()
        mcrop = None
        if masks is not None:
            mcrop = MaskStack(masks.planes[r : r + hh, c : c + ww].copy(), masks.classes)
        patches.append(Patch(crop, mcrop, win, index=i, **tags))
    return patches


def stitch_predictions(probs_per_window, grid: PatchGrid) -> np.ndarray:
    """Mean of all window predictions covering each pixel, full extent H x W x K."""
    probs = [np.asarray(p) for p in probs_per_window]
    if len(probs) != len(grid.windows):
        raise ValueError(
            f"{len(probs)} prediction stacks for {len(grid.windows)} windows"
        )
    k = probs[0].shape[2]
    h, w = grid.source_extent
    acc = np.zeros((h, w, k), dtype=np.float64)
    cover = np.zeros((h, w, 1), dtype=np.float64)
    for p, win in zip(probs, grid.windows):
        r, c, hh, ww = win
        if p.shape != (hh, ww, k):
            raise ValueError(f"prediction shape {p.shape} != window {(hh, ww, k)}")
        acc[r : r + hh, c : c + ww] += p
        cover[r : r + hh, c : c + ww] += 1.0
    return acc / cover


# --- patch cache -----------------------------------------------------------
#
# A patch cache is a directory of .npz files, one per patch, named
# "{stage}_{city}_{index}.npz".  Keys: image (uint8/float), masks (uint8,
# H x W x K), window (int64[4] = row0, col0, height, width), classes
# (unicode array), country, city, stage_id.  Arrays are stored little-endian.


def patch_filename(patch: Patch) -> str:
    return f"{patch.stage_id}_{patch.city or 'none'}_{patch.index}.npz"


def save_patch(directory, patch: Patch) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / patch_filename(patch)
    payload = {
        "image": patch.image,
        "window": np.asarray(patch.window, dtype="<i8"),
        "stage_id": np.asarray(patch.stage_id, dtype="<i8"),
        "country": np.asarray(patch.country),
        "city": np.asarray(patch.city),
        "index": np.asarray(patch.index, dtype="<i8"),
    }
    if patch.masks is not None:
        payload["masks"] = patch.masks.planes.astype("<u1")
        payload["classes"] = np.asarray(list(patch.masks.classes))
    np.savez(path, **payload)
    return path


def load_patch(path) -> Patch:
    with np.load(path, allow_pickle=False) as z:
        masks = None
        if "masks" in z:
            masks = MaskStack(z["masks"], ClassSet(tuple(str(c) for c in z["classes"])))
        return Patch(
            image=z["image"],
            masks=masks,
            window=Window(*(int(v) for v in z["window"])),
            stage_id=int(z["stage_id"]),
            country=str(z["country"]),
            city=str(z["city"]),
            index=int(z["index"]),
        )


def save_patches(directory, patches) -> list[Path]:
    return [save_patch(directory, p) for p in patches]


def load_patches(directory) -> list[Patch]:
    paths = sorted(Path(directory).glob("*.npz"))
    return [load_patch(p) for p in paths]
