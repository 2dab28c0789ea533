"""Seeded construction of global views and jigsaw patch sets.

All images are float arrays of shape (H, W, 3) with values in [0, 1]. Every
public function is a pure function of (image, seed, config).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import AugmentConfig

MIN_SIDE = 64
GRID = 3
NUM_PATCHES = GRID * GRID

# RandAugment op list; magnitudes map linearly onto [0, max] over 31 bins.
RANDAUG_OPS = (
    "identity",
    "shear_x",
    "shear_y",
    "translate_x",
    "translate_y",
    "rotate",
    "brightness",
    "color",
    "contrast",
    "sharpness",
    "posterize",
    "solarize",
    "autocontrast",
    "equalize",
)
_SIGNED_OPS = {"shear_x", "shear_y", "translate_x", "translate_y", "rotate", "brightness", "color", "contrast", "sharpness"}
_MAGNITUDE_BINS = 31


@dataclass
class PatchSet:
    """Nine shuffled patches; ``patches[j]`` was cut from cell ``permutation[j]``.

    ``grid_cells[c]`` is ``(row0, col0, side)`` of cell ``c`` (row-major) and
    ``crop_boxes[j]`` is ``(row0, col0, side)`` of output patch ``j``, both in the
    coordinates of the resized intermediate image.
    """

    patches: np.ndarray
    permutation: np.ndarray
    grid_cells: list[tuple[int, int, int]]
    crop_boxes: list[tuple[int, int, int]]
    source_crop: tuple[int, int, int, int]


@dataclass
class ViewBundle:
    i_q: np.ndarray
    i_k: np.ndarray
    p_q: PatchSet
    p_k: PatchSet
    seed: int
    sub_seeds: tuple[int, int, int, int] = field(default=(0, 0, 0, 0))


def ingest(img: np.ndarray) -> np.ndarray:
    """Normalize an image to float64 (H, W, 3) in [0, 1], upscaling sides below 64."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    else:
        img = img.astype(np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] not in (1, 3, 4):
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    elif img.shape[2] == 4:
        img = img[:, :, :3]
    img = np.clip(img, 0.0, 1.0)
    h, w = img.shape[:2]
    if h < MIN_SIDE or w < MIN_SIDE:
        s = MIN_SIDE / min(h, w)
        img = resize_bilinear(img, max(MIN_SIDE, round(h * s)), max(MIN_SIDE, round(w * s)))
    return img


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    x = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    x = np.clip(x, 0, n_in - 1)
    lo = np.floor(x).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = x - lo
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers and edge clamping (no antialiasing)."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    rows = _interp_matrix(h, out_h)
    cols = _interp_matrix(w, out_w)
    tmp = np.tensordot(rows, img, axes=(1, 0))
    return np.einsum("pw,owc->opc", cols, tmp, optimize=True)


def sample_crop(
    h: int,
    w: int,
    rng: np.random.Generator,
    scale: tuple[float, float],
    ratio: tuple[float, float],
) -> tuple[int, int, int, int]:
    """Random-resized-crop box ``(top, left, height, width)``.

    The returned area is never below ``scale[0] * h * w``; after ten rejected
    draws the whole image is used.
    """
    area = h * w
    log_ratio = np.log(ratio)
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        aspect = np.exp(rng.uniform(log_ratio[0], log_ratio[1]))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h and ch * cw >= scale[0] * area:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def _grayscale(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def _blend(a: np.ndarray, b: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(b + factor * (a - b), 0.0, 1.0)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    delta = maxc - minc
    safe = np.where(delta > 0, delta, 1.0)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(delta > 0, (h / 6.0) % 1.0, 0.0)
    s = np.where(maxc > 0, delta / np.where(maxc > 0, maxc, 1.0), 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0:1], hsv[..., 1:2], hsv[..., 2:3]
    k = (np.array([5.0, 3.0, 1.0]) + h * 6.0) % 6.0
    return v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def color_jitter(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Brightness, contrast, saturation, hue, in random order; clipped after each."""
    factors = {
        "brightness": rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness),
        "contrast": rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast),
        "saturation": rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation),
        "hue": rng.uniform(-cfg.hue, cfg.hue),
    }
    order = rng.permutation(4)
    for idx in order:
        name = ("brightness", "contrast", "saturation", "hue")[idx]
        f = factors[name]
        if name == "brightness":
            img = np.clip(img * f, 0.0, 1.0)
        elif name == "contrast":
            img = _blend(img, np.full_like(img, _grayscale(img).mean()), f)
        elif name == "saturation":
            img = _blend(img, np.repeat(_grayscale(img)[:, :, None], 3, axis=2), f)
        elif f != 0.0:
            hsv = rgb_to_hsv(img)
            hsv[..., 0] = (hsv[..., 0] + f) % 1.0
            img = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return img


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return np.clip(ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect"), 0.0, 1.0)


def _affine(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Apply a 2x3 output->input affine map about the image center, zero fill."""
    h, w = img.shape[:2]
    center = np.array([(h - 1) / 2, (w - 1) / 2])
    lin = matrix[:, :2]
    offset = center - lin @ center + matrix[:, 2]
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.affine_transform(img[:, :, c], lin, offset=offset, order=1, mode="constant", cval=0.0)
    return out


def _sharpen_kernel_blur(img: np.ndarray) -> np.ndarray:
    kernel = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
    out = img.copy()
    for c in range(img.shape[2]):
        out[1:-1, 1:-1, c] = ndimage.convolve(img[:, :, c], kernel, mode="nearest")[1:-1, 1:-1]
    return out


def _equalize(img: np.ndarray) -> np.ndarray:
    q = np.round(img * 255).astype(np.int64)
    out = np.empty_like(img)
    for c in range(3):
        hist = np.bincount(q[:, :, c].ravel(), minlength=256)
        nz = hist[hist > 0]
        step = (hist.sum() - nz[-1]) // 255 if nz.size else 0
        if step == 0:
            out[:, :, c] = img[:, :, c]
            continue
        lut = (np.cumsum(hist) - hist + step // 2) // step
        lut = np.clip(lut, 0, 255)
        out[:, :, c] = lut[q[:, :, c]] / 255.0
    return out


def apply_randaug_op(img: np.ndarray, op: str, level: float, sign: float) -> np.ndarray:
    """One RandAugment op at normalized level in [0, 1]."""
    h, w = img.shape[:2]
    if op == "identity":
        return img
    if op == "shear_x":
        s = sign * 0.3 * level
        return _affine(img, np.array([[1.0, 0.0, 0.0], [s, 1.0, 0.0]]))
    if op == "shear_y":
        s = sign * 0.3 * level
        return _affine(img, np.array([[1.0, s, 0.0], [0.0, 1.0, 0.0]]))
    if op == "translate_x":
        t = sign * (150.0 / 331.0) * w * level
        return _affine(img, np.array([[1.0, 0.0, 0.0], [0.0, 1.0, t]]))
    if op == "translate_y":
        t = sign * (150.0 / 331.0) * h * level
        return _affine(img, np.array([[1.0, 0.0, t], [0.0, 1.0, 0.0]]))
    if op == "rotate":
        a = np.deg2rad(sign * 30.0 * level)
        c, s = np.cos(a), np.sin(a)
        return _affine(img, np.array([[c, -s, 0.0], [s, c, 0.0]]))
    if op == "brightness":
        return _blend(img, np.zeros_like(img), 1 + sign * 0.9 * level)
    if op == "color":
        return _blend(img, np.repeat(_grayscale(img)[:, :, None], 3, axis=2), 1 + sign * 0.9 * level)
    if op == "contrast":
        return _blend(img, np.full_like(img, _grayscale(img).mean()), 1 + sign * 0.9 * level)
    if op == "sharpness":
        return _blend(img, _sharpen_kernel_blur(img), 1 + sign * 0.9 * level)
    if op == "posterize":
        bits = int(8 - round(4 * level))
        q = np.round(img * 255).astype(np.uint8)
        mask = np.uint8((0xFF << (8 - bits)) & 0xFF)
        return (q & mask) / 255.0
    if op == "solarize":
        threshold = 1.0 - level
        return np.where(img >= threshold, 1.0 - img, img)
    if op == "autocontrast":
        lo = img.min(axis=(0, 1), keepdims=True)
        hi = img.max(axis=(0, 1), keepdims=True)
        span = np.where(hi > lo, hi - lo, 1.0)
        return np.where(hi > lo, (img - lo) / span, img)
    if op == "equalize":
        return _equalize(img)
    raise ValueError(f"unknown RandAugment op {op!r}")


def rand_augment(img: np.ndarray, rng: np.random.Generator, num_ops: int, magnitude: int) -> np.ndarray:
    level = magnitude / (_MAGNITUDE_BINS - 1)
    for _ in range(num_ops):
        op = RANDAUG_OPS[int(rng.integers(len(RANDAUG_OPS)))]
        sign = -1.0 if (op in _SIGNED_OPS and rng.random() < 0.5) else 1.0
        img = np.clip(apply_randaug_op(img, op, level, sign), 0.0, 1.0)
    return img


def _photometric(
    img: np.ndarray,
    rng: np.random.Generator,
    cfg: AugmentConfig,
    flip: bool,
    grayscale: bool,
) -> np.ndarray:
    # Draws are made unconditionally so the stream layout does not depend on outcomes.
    do_jitter = rng.random() < cfg.jitter_prob
    jitter_rng = np.random.default_rng(rng.integers(2**63))
    do_gray = rng.random() < cfg.grayscale_prob
    do_blur = rng.random() < cfg.blur_prob
    sigma = rng.uniform(*cfg.blur_sigma)
    if flip:
        img = img[:, ::-1]
    if do_jitter:
        img = color_jitter(img, jitter_rng, cfg)
    if grayscale and do_gray:
        img = np.repeat(_grayscale(img)[:, :, None], 3, axis=2)
    if do_blur:
        img = gaussian_blur(img, sigma)
    return np.ascontiguousarray(np.clip(img, 0.0, 1.0))


def global_view(img: np.ndarray, seed: int, cfg: AugmentConfig | None = None) -> np.ndarray:
    """Global view: crop, resize, flip, jitter, grayscale, blur, RandAugment."""
    cfg = cfg or AugmentConfig()
    img = ingest(img)
    rng = np.random.default_rng(seed)
    h, w = img.shape[:2]
    top, left, ch, cw = sample_crop(h, w, rng, cfg.global_crop_scale, cfg.crop_ratio)
    flip = rng.random() < cfg.flip_prob
    randaug_rng = np.random.default_rng(rng.integers(2**63))
    view = resize_bilinear(img[top : top + ch, left : left + cw], cfg.global_side, cfg.global_side)
    view = _photometric(view, rng, cfg, flip=flip, grayscale=True)
    if cfg.randaug_ops > 0:
        view = rand_augment(view, randaug_rng, cfg.randaug_ops, cfg.randaug_magnitude)
    return view


def jigsaw_layout(
    h: int, w: int, rng: np.random.Generator, cfg: AugmentConfig
) -> tuple[tuple[int, int, int, int], bool, np.ndarray, list[tuple[int, int, int]], list[tuple[int, int, int]]]:
    """Geometric draws of the jigsaw pipeline: source crop, flip, permutation, patch boxes."""
    crop = sample_crop(h, w, rng, (cfg.crop_area_min, 1.0), cfg.crop_ratio)
    flip = rng.random() < cfg.flip_prob
    cell = cfg.cell_side
    cells = [(r * cell, c * cell, cell) for r in range(GRID) for c in range(GRID)]
    permutation = rng.permutation(NUM_PATCHES)
    boxes = []
    for j in range(NUM_PATCHES):
        r0, c0, _ = cells[permutation[j]]
        dy = int(rng.integers(0, cell - cfg.patch_side + 1))
        dx = int(rng.integers(0, cell - cfg.patch_side + 1))
        boxes.append((r0 + dy, c0 + dx, cfg.patch_side))
    return crop, flip, permutation, cells, boxes


def jigsaw_views(img: np.ndarray, seed: int, cfg: AugmentConfig | None = None) -> PatchSet:
    """Jigsaw patch set: crop (>= crop_area_min), resize, photometric, 3x3 shuffle, per-cell crop."""
    cfg = cfg or AugmentConfig()
    img = ingest(img)
    rng = np.random.default_rng(seed)
    h, w = img.shape[:2]
    crop, flip, permutation, cells, boxes = jigsaw_layout(h, w, rng, cfg)
    top, left, ch, cw = crop
    side = cfg.jigsaw_intermediate_side
    inter = resize_bilinear(img[top : top + ch, left : left + cw], side, side)
    inter = _photometric(inter, rng, cfg, flip=flip, grayscale=False)
    patches = np.stack([inter[r : r + s, c : c + s] for r, c, s in boxes])
    return PatchSet(
        patches=patches,
        permutation=permutation,
        grid_cells=cells,
        crop_boxes=boxes,
        source_crop=crop,
    )


def sub_seeds(seed: int, n: int = 4) -> tuple[int, ...]:
    """Independent child seeds; child i depends only on (seed, i)."""
    return tuple(int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint64)[0]) for i in range(n))


def make_bundle(img: np.ndarray, seed: int, cfg: AugmentConfig | None = None) -> ViewBundle:
    cfg = cfg or AugmentConfig()
    img = ingest(img)
    s = sub_seeds(seed, 4)
    return ViewBundle(
        i_q=global_view(img, s[0], cfg),
        i_k=global_view(img, s[1], cfg),
        p_q=jigsaw_views(img, s[2], cfg),
        p_k=jigsaw_views(img, s[3], cfg),
        seed=seed,
        sub_seeds=s,
    )
