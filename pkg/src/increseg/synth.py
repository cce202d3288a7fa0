"""Synthetic aerial-style corpus: geometric shapes on textured backgrounds.

Each class is a shape family (rectangles, thin polylines, organic blobs,
discs) with its own color; geography tags shift the color distribution so
different "regions" look different. Shapes are placed without overlap, so
label maps stay single-label. Generation is deterministic given the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    ClassSet,
    DatasetManifest,
    Normalization,
    load_manifest,
    write_image,
    write_mask,
)

SHAPE_KINDS = ("rectangle", "polyline", "blob", "disc")


@dataclass(frozen=True)
class ShapeSpec:
    kind: str
    count: float  # expected shapes per image (Poisson)
    size: tuple[float, float]  # characteristic size range, pixels
    color: tuple[float, float, float]

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")


@dataclass(frozen=True)
class TagStyle:
    background: tuple[float, float, float] = (105.0, 105.0, 100.0)
    color_shift: tuple[float, float, float] = (0.0, 0.0, 0.0)
    noise: float = 5.0


@dataclass
class SyntheticSpec:
    image_size: tuple[int, int]
    classes: dict[str, ShapeSpec]
    tags: dict[str, TagStyle]
    images_per_tag: int
    seed: int
    cities_per_tag: int = 2

    def class_set(self) -> ClassSet:
        return ClassSet(tuple(self.classes))


def _coord_grid(h, w):
    return np.meshgrid(np.arange(h), np.arange(w), indexing="ij")


def _rectangle(rng, h, w, size):
    hh = int(rng.uniform(*size))
    ww = int(rng.uniform(*size))
    r0 = int(rng.integers(0, max(1, h - hh)))
    c0 = int(rng.integers(0, max(1, w - ww)))
    fp = np.zeros((h, w), dtype=bool)
    fp[r0 : r0 + hh, c0 : c0 + ww] = True
    return fp


def _disc(rng, h, w, size):
    radius = rng.uniform(size[0] / 2, size[1] / 2)
    cy = rng.uniform(radius, h - radius)
    cx = rng.uniform(radius, w - radius)
    yy, xx = _coord_grid(h, w)
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2


def _blob(rng, h, w, size):
    fp = np.zeros((h, w), dtype=bool)
    cy = rng.uniform(size[1], h - size[1])
    cx = rng.uniform(size[1], w - size[1])
    yy, xx = _coord_grid(h, w)
    for _ in range(int(rng.integers(3, 7))):
        radius = rng.uniform(size[0] / 3, size[1] / 3)
        fp |= (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        cy = np.clip(cy + rng.normal(0, size[1] / 3), 0, h - 1)
        cx = np.clip(cx + rng.normal(0, size[1] / 3), 0, w - 1)
    return fp


def _polyline(rng, h, w, size):
    thickness = rng.uniform(size[0], size[1]) / 2
    vertical = bool(rng.integers(0, 2))
    n_pts = 4
    if vertical:
        ys = np.linspace(0, h - 1, n_pts)
        xs = rng.uniform(0, w - 1, size=n_pts)
    else:
        xs = np.linspace(0, w - 1, n_pts)
        ys = rng.uniform(0, h - 1, size=n_pts)
    yy, xx = _coord_grid(h, w)
    fp = np.zeros((h, w), dtype=bool)
    for (y0, x0), (y1, x1) in zip(zip(ys, xs), zip(ys[1:], xs[1:])):
        dy, dx = y1 - y0, x1 - x0
        norm2 = dy * dy + dx * dx
        t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(norm2, 1e-9), 0, 1)
        dist2 = (yy - (y0 + t * dy)) ** 2 + (xx - (x0 + t * dx)) ** 2
        fp |= dist2 <= thickness**2
    return fp


_DRAWERS = {
    "rectangle": _rectangle,
    "disc": _disc,
    "blob": _blob,
    "polyline": _polyline,
}


def render_scene(rng: np.random.Generator, spec: SyntheticSpec, tag: str,
                 classes_present=None):
    """One image plus its full per-class mask stack for a geography tag."""
    h, w = spec.image_size
    style = spec.tags[tag]
    # low-frequency texture field plus pixel noise over a flat base color
    coarse = rng.normal(0, 8.0, size=(max(2, h // 16), max(2, w // 16), 1))
    texture = np.kron(coarse, np.ones((16, 16, 1)))[:h, :w]
    img = np.asarray(style.background, dtype=np.float64) + texture
    img = img + rng.normal(0, style.noise, size=(h, w, 3))

    present = list(spec.classes if classes_present is None else classes_present)
    planes = np.zeros((h, w, len(spec.classes)), dtype=np.uint8)
    occupied = np.zeros((h, w), dtype=bool)
    for k, (name, shape) in enumerate(spec.classes.items()):
        if name not in present:
            continue
        n_shapes = int(rng.poisson(shape.count))
        for _ in range(n_shapes):
            for _attempt in range(30):
                fp = _DRAWERS[shape.kind](rng, h, w, shape.size)
                if not (fp & occupied).any():
                    break
            else:
                continue
            color = (np.asarray(shape.color) + np.asarray(style.color_shift)
                     + rng.normal(0, 6.0, size=3))
            img[fp] = color + rng.normal(0, style.noise, size=(int(fp.sum()), 3))
            planes[:, :, k] |= fp.astype(np.uint8)
            occupied |= fp
    return np.clip(img, 0, 255).astype(np.uint8), planes


def synth_generate(spec: SyntheticSpec, out_dir,
                   manifest_name: str = "manifest.json",
                   stage_id: int = 1,
                   classes_present=None) -> DatasetManifest:
    """Write images, per-class {0,255} mask PNGs, and a manifest covering all
    of the spec's classes. classes_present restricts which shape families are
    drawn (masks for absent classes come out empty)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    class_names = list(spec.classes)
    items = []
    for ti, tag in enumerate(spec.tags):
        for i in range(spec.images_per_tag):
            rng = np.random.default_rng(
                np.random.SeedSequence((spec.seed, ti, i)))
            img, planes = render_scene(rng, spec, tag, classes_present)
            name = f"{tag}_{i:03d}"
            write_image(out_dir / "images" / f"{name}.png", img)
            masks = {}
            for k, cls in enumerate(class_names):
                mpath = f"masks/{name}_{cls}.png"
                write_mask(out_dir / mpath, planes[:, :, k])
                masks[cls] = mpath
            items.append({
                "image": f"images/{name}.png",
                "masks": masks,
                "country": tag,
                "city": f"{tag}_city{i % spec.cities_per_tag}",
            })
    manifest = {
        "stage_id": stage_id,
        "classes": class_names,
        "normalization": {"mode": "subtract", "value": 127},
        "items": items,
    }
    path = out_dir / manifest_name
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    return load_manifest(path)


def subset_manifest(manifest_path, classes: list[str], stage_id: int,
                    out_path) -> DatasetManifest:
    """Derive a stage manifest exposing only some classes' annotations."""
    with open(manifest_path) as f:
        raw = json.load(f)
    missing = [c for c in classes if c not in raw["classes"]]
    if missing:
        raise ValueError(f"classes {missing} not in source manifest")
    items = []
    for it in raw["items"]:
        items.append({
            "image": it["image"],
            "masks": {c: it["masks"][c] for c in classes if c in it["masks"]},
            "country": it.get("country", ""),
            "city": it.get("city", ""),
        })
    out = {
        "stage_id": stage_id,
        "classes": classes,
        "normalization": raw["normalization"],
        "items": items,
    }
    out_path = Path(out_path)
    rel = [Path(it["image"]) for it in items]
    if out_path.parent != Path(manifest_path).parent:
        raise ValueError("subset manifest must live beside its source "
                         f"({out_path.parent} != {Path(manifest_path).parent})")
    with open(out_path, "w") as f:
        json.dump(out, f, indent=2)
    return load_manifest(out_path)


def luxcarta_style_spec(seed: int, image_size=(64, 64), images_per_tag=30,
                        classes=None) -> SyntheticSpec:
    """Two-region corpus with the default class palette (rectangles =
    building, blobs = vegetation, discs = water, polylines = road)."""
    default_classes = {
        "building": ShapeSpec("rectangle", 2.0, (8, 18), (158, 78, 62)),
        "vegetation": ShapeSpec("blob", 2.0, (8, 16), (62, 128, 58)),
        "water": ShapeSpec("disc", 1.5, (8, 18), (70, 88, 148)),
        "road": ShapeSpec("polyline", 1.0, (3, 5), (168, 168, 162)),
    }
    if classes is not None:
        default_classes = {k: default_classes[k] for k in classes}
    return SyntheticSpec(
        image_size=image_size,
        classes=default_classes,
        tags={
            "alpsland": TagStyle((108, 108, 102), (6, 3, -5), 5.0),
            "riviera": TagStyle((98, 102, 96), (-5, 2, 7), 5.0),
        },
        images_per_tag=images_per_tag,
        seed=seed,
    )
