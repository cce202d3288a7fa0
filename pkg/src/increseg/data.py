"""Stage data model: class sets, rasters, binary mask stacks, manifests.

A training stage is declared by a manifest file (JSON or TOML) that lists
images, one single-channel mask file per class, geography tags, and the
normalization to apply before the network sees the pixels.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

BACKGROUND_ID = -1


class ManifestError(ValueError):
    """Manifest file violates the documented schema."""


@dataclass(frozen=True)
class ClassSet:
    """Ordered, unique class names; the order fixes output-channel order."""

    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(self.names)
        if not names:
            raise ValueError("class set must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError(f"class names must be unique, got {names}")
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name):
        return name in self.names

    def index(self, name: str) -> int:
        return self.names.index(name)

    def union(self, other: "ClassSet") -> "ClassSet":
        overlap = set(self.names) & set(other.names)
        if overlap:
            raise ValueError(f"class sets overlap: {sorted(overlap)}")
        return ClassSet(self.names + tuple(other.names))


@dataclass
class MaskStack:
    """Per-pixel target planes, one H x W plane per class, stacked H x W x K.

    Binary stacks hold {0, 1}; soft stacks (network probabilities) hold [0, 1].
    """

    planes: np.ndarray
    classes: ClassSet

    def __post_init__(self):
        self.planes = np.asarray(self.planes)
        if self.planes.ndim != 3:
            raise ValueError(f"planes must be H x W x K, got shape {self.planes.shape}")
        if self.planes.shape[2] != len(self.classes):
            raise ValueError(
                f"{self.planes.shape[2]} planes for {len(self.classes)} classes"
            )

    @property
    def shape(self):
        return self.planes.shape

    def plane(self, name: str) -> np.ndarray:
        return self.planes[:, :, self.classes.index(name)]


@dataclass(frozen=True)
class Normalization:
    """Pixel normalization: subtract a constant or per-channel means."""

    mode: str  # "subtract" | "mean"
    value: float = 127.0
    values: tuple[float, ...] = ()

    def __post_init__(self):
        if self.mode not in ("subtract", "mean"):
            raise ValueError(f"unknown normalization mode {self.mode!r}")
        if self.mode == "mean" and not self.values:
            raise ValueError("mean normalization requires per-channel values")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))


@dataclass
class ManifestItem:
    image: Path
    masks: dict[str, Path]
    country: str = ""
    city: str = ""


@dataclass
class DatasetManifest:
    """One training stage: images, class set, mask locations, geography tags."""

    stage_id: int
    class_set: ClassSet
    normalization: Normalization
    items: list[ManifestItem] = field(default_factory=list)


def load_manifest(path) -> DatasetManifest:
    """Load and validate a stage manifest (JSON or TOML).

    Relative file paths inside the manifest are resolved against the
    manifest's directory.  Raises ManifestError for schema violations and
    FileNotFoundError naming the first missing referenced file.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    if path.suffix == ".toml":
        with open(path, "rb") as f:
            try:
                raw = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise ManifestError(f"{path}: TOML parse error: {e}") from e
    else:
        with open(path, "rb") as f:
            try:
                raw = json.load(f)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}: JSON parse error: {e}") from e
    return parse_manifest(raw, base_dir=path.parent, source=str(path))


def parse_manifest(raw: dict, base_dir=".", source="<dict>") -> DatasetManifest:
    problems = []
    for key in ("stage_id", "classes", "normalization", "items"):
        if key not in raw:
            problems.append(f"missing key {key!r}")
    if problems:
        raise ManifestError(f"{source}: " + "; ".join(problems))

    try:
        class_set = ClassSet(tuple(raw["classes"]))
    except ValueError as e:
        raise ManifestError(f"{source}: classes: {e}") from e

    norm_raw = raw["normalization"]
    mode = norm_raw.get("mode")
    try:
        if mode == "subtract":
            norm = Normalization("subtract", value=float(norm_raw.get("value", 127)))
        elif mode == "mean":
            norm = Normalization("mean", values=tuple(norm_raw.get("values", ())))
        else:
            raise ValueError(f"unknown normalization mode {mode!r}")
    except (TypeError, ValueError) as e:
        raise ManifestError(f"{source}: normalization: {e}") from e

    base_dir = Path(base_dir)
    items = []
    for i, it in enumerate(raw["items"]):
        if "image" not in it or "masks" not in it:
            problems.append(f"items[{i}]: needs 'image' and 'masks'")
            continue
        for cls in it["masks"]:
            if cls not in class_set:
                problems.append(
                    f"items[{i}]: mask class {cls!r} not in classes {class_set.names}"
                )
        items.append(
            ManifestItem(
                image=base_dir / it["image"],
                masks={c: base_dir / p for c, p in it["masks"].items()},
                country=it.get("country", ""),
                city=it.get("city", ""),
            )
        )
    if problems:
        raise ManifestError(f"{source}: " + "; ".join(problems))

    for item in items:
        if not item.image.exists():
            raise FileNotFoundError(str(item.image))
        for p in item.masks.values():
            if not p.exists():
                raise FileNotFoundError(str(p))

    return DatasetManifest(
        stage_id=int(raw["stage_id"]),
        class_set=class_set,
        normalization=norm,
        items=items,
    )


def normalize_image(img: np.ndarray, norm: Normalization) -> np.ndarray:
    """Shift pixel values: subtract a constant, or per-channel means.

    Returns float64; adding the constant/means back recovers the input exactly.
    """
    img = np.asarray(img)
    out = img.astype(np.float64)
    if norm.mode == "subtract":
        return out - norm.value
    means = np.asarray(norm.values, dtype=np.float64)
    if img.ndim != 3 or means.shape[0] != img.shape[2]:
        raise ValueError(
            f"{means.shape[0]} channel means for image shape {img.shape}"
        )
    return out - means


def denormalize_image(img: np.ndarray, norm: Normalization) -> np.ndarray:
    if norm.mode == "subtract":
        return img + norm.value
    return img + np.asarray(norm.values, dtype=np.float64)


def labels_to_mask_stack(label_map: np.ndarray, class_set: ClassSet) -> MaskStack:
    """Expand an integer class-id raster to one binary plane per class.

    Label k marks plane k; BACKGROUND_ID contributes 0 to every plane.
    """
    label_map = np.asarray(label_map)
    if label_map.ndim != 2:
        raise ValueError(f"label map must be 2-D, got shape {label_map.shape}")
    k = len(class_set)
    known = set(range(k)) | {BACKGROUND_ID}
    present = set(np.unique(label_map).tolist())
    unknown = present - known
    if unknown:
        raise ValueError(f"unknown label ids {sorted(unknown)} for {k} classes")
    planes = np.zeros(label_map.shape + (k,), dtype=np.uint8)
    for idx in range(k):
        planes[:, :, idx] = label_map == idx
    return MaskStack(planes, class_set)


def mask_stack_to_labels(stack: MaskStack) -> np.ndarray:
    """Inverse of labels_to_mask_stack for single-label stacks."""
    planes = stack.planes
    any_on = planes.any(axis=2)
    labels = np.full(planes.shape[:2], BACKGROUND_ID, dtype=np.int64)
    labels[any_on] = planes.argmax(axis=2)[any_on]
    return labels


def read_image(path) -> np.ndarray:
    """Read a PNG/TIFF image as an H x W x C uint8 array."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def write_image(path, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path)


def read_mask(path) -> np.ndarray:
    """Read a single-channel {0, 255} mask PNG as a binary uint8 plane."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    return (arr >= 128).astype(np.uint8)


def write_mask(path, plane: np.ndarray):
    Image.fromarray((np.asarray(plane) > 0).astype(np.uint8) * 255).save(path)


def load_item_masks(item: ManifestItem, class_set: ClassSet, shape) -> MaskStack:
    """Assemble an item's per-class mask files into a stack; absent files give
    all-zero planes."""
    h, w = shape
    planes = np.zeros((h, w, len(class_set)), dtype=np.uint8)
    for cls, path in item.masks.items():
        plane = read_mask(path)
        if plane.shape != (h, w):
            raise ValueError(
                f"mask {path} shape {plane.shape} != image shape {(h, w)}"
            )
        planes[:, :, class_set.index(cls)] = plane
    return MaskStack(planes, class_set)
