"""Labeled image folders and a seeded synthetic shapes dataset."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
SHAPES = ("circle", "square", "triangle", "cross")
# hue centers of the color families
FAMILIES = (0.02, 0.58, 0.30, 0.80)


@dataclass
class LabeledDataset:
    images: list[np.ndarray]
    labels: np.ndarray
    class_names: list[str]
    skipped: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("dataset has no images")
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class ToySpec:
    num_classes: int = 8
    samples_per_class: int = 100
    image_side: int = 96
    seed: int = 1

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_classes > len(SHAPES) * len(FAMILIES):
            raise ValueError(f"at most {len(SHAPES) * len(FAMILIES)} classes are available")
        if self.image_side < 64:
            raise ValueError(f"image_side must be >= 64, got {self.image_side}")


def toy_class_names(num_classes: int) -> list[str]:
    return [f"{SHAPES[c % len(SHAPES)]}-{c // len(SHAPES)}" for c in range(num_classes)]


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    if shape == "circle":
        return u**2 + v**2 <= r**2
    if shape == "square":
        return np.maximum(np.abs(u), np.abs(v)) <= 0.8 * r
    if shape == "triangle":
        # equilateral triangle with circumradius r
        inside = v <= 0.5 * r
        for a in (np.pi / 6, 5 * np.pi / 6):
            inside &= u * np.cos(a) - v * np.sin(a) <= 0.5 * r
        return inside
    if shape == "cross":
        t = 0.3 * r
        return ((np.abs(u) <= t) & (np.abs(v) <= r)) | ((np.abs(v) <= t) & (np.abs(u) <= r))
    raise ValueError(shape)


def render_toy(label: int, side: int, rng: np.random.Generator) -> np.ndarray:
    """One image of class ``label``: a colored shape on a textured, randomly tinted background."""
    shape = SHAPES[label % len(SHAPES)]
    family = FAMILIES[label // len(SHAPES)]

    bg_hsv = np.array([rng.random(), rng.uniform(0.1, 0.5), rng.uniform(0.3, 0.8)])
    img = np.broadcast_to(hsv_to_rgb(bg_hsv), (side, side, 3)).copy()
    field_ = ndimage.gaussian_filter(rng.normal(size=(side, side, 3)), sigma=side / 12)
    img += 0.6 * field_ / (np.abs(field_).max() + 1e-9) * 0.25

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    cy, cx = rng.uniform(0.3, 0.7, size=2) * side
    r = rng.uniform(0.16, 0.3) * side
    theta = rng.uniform(0, 2 * np.pi)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    mask = _shape_mask(shape, u, v, r)

    fg_hsv = np.array([(family + rng.uniform(-0.06, 0.06)) % 1.0, rng.uniform(0.55, 1.0), rng.uniform(0.55, 1.0)])
    fg = hsv_to_rgb(fg_hsv)
    img[mask] = fg
    img += rng.normal(scale=0.06, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_toy(spec: ToySpec | None = None) -> LabeledDataset:
    """``samples_per_class`` images per class, class-major order, deterministic in ``spec.seed``."""
    spec = spec or ToySpec()
    images, labels = [], []
    for c in range(spec.num_classes):
        for i in range(spec.samples_per_class):
            rng = np.random.default_rng(np.random.SeedSequence([spec.seed, c, i]))
            images.append(render_toy(c, spec.image_side, rng))
            labels.append(c)
    return LabeledDataset(images=images, labels=np.array(labels), class_names=toy_class_names(spec.num_classes))


def load_image_folder(root: str | os.PathLike) -> LabeledDataset:
    """``root/<class>/*.png|jpg``; labels follow sorted class names. Unreadable files are skipped."""
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    images, labels, skipped = [], [], []
    for label, name in enumerate(classes):
        for path in sorted((root / name).iterdir()):
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            except (UnidentifiedImageError, OSError) as exc:
                log.warning("skipping unreadable image %s: %s", path, exc)
                skipped.append(str(path))
                continue
            images.append(arr)
            labels.append(label)
    if not images:
        raise ValueError(f"no readable images under {root}")
    return LabeledDataset(images=images, labels=np.array(labels), class_names=classes, skipped=skipped)


def write_image_folder(ds: LabeledDataset, out: str | os.PathLike) -> Path:
    out = Path(out)
    counters: dict[int, int] = {}
    for img, label in zip(ds.images, ds.labels):
        d = out / ds.class_names[label]
        d.mkdir(parents=True, exist_ok=True)
        n = counters.get(int(label), 0)
        counters[int(label)] = n + 1
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(d / f"{n:05d}.png")
    return out
