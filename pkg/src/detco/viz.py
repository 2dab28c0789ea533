"""Attention maps from final-stage features, heat overlays, and metric charts."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .augment import ingest, resize_bilinear  # noqa: E402

REDUCTIONS = ("mean-abs", "max")
BRANCHES = ("l_gg", "l_ll", "l_gl")


class MetricsLogError(ValueError):
    pass


@dataclass
class AttentionMap:
    values: np.ndarray
    source_shape: tuple[int, ...]
    vmin: float
    vmax: float
    constant: bool = False


def attention_map(f5, reduction: str = "mean-abs") -> AttentionMap:
    """Collapse a (C, h, w) feature map over channels and min-max scale to [0, 1].

    A constant reduced map yields zeros with ``constant=True``.
    """
    f = np.asarray(f5, dtype=np.float64)
    if f.ndim != 3 or f.shape[0] < 1:
        raise ValueError(f"expected a (C, h, w) feature map, got shape {f.shape}")
    if reduction == "mean-abs":
        raw = np.abs(f).mean(axis=0)
    elif reduction == "max":
        raw = f.max(axis=0)
    else:
        raise ValueError(f"reduction must be one of {REDUCTIONS}, got {reduction!r}")
    lo, hi = float(raw.min()), float(raw.max())
    if hi == lo:
        return AttentionMap(np.zeros_like(raw), f.shape, lo, hi, constant=True)
    values = np.clip((raw - lo) / (hi - lo), 0.0, 1.0)
    return AttentionMap(values, f.shape, lo, hi)


def _jet(a: np.ndarray) -> np.ndarray:
    return plt.get_cmap("jet")(a)[..., :3]


def overlay_array(img: np.ndarray, amap: AttentionMap, alpha: float = 0.5) -> np.ndarray:
    """Heat blend where pixel weight is ``alpha * attention``; zero attention keeps the source."""
    img = ingest(img)
    h, w = img.shape[:2]
    a = np.clip(resize_bilinear(amap.values[:, :, None], h, w)[:, :, 0], 0.0, 1.0)
    weight = alpha * a[:, :, None]
    return img * (1 - weight) + _jet(a) * weight


def overlay(img: np.ndarray, amap: AttentionMap, path: str | os.PathLike, alpha: float = 0.5) -> Path:
    path = Path(path)
    rgb = np.round(np.clip(overlay_array(img, amap, alpha), 0, 1) * 255).astype(np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(rgb).save(path, format="PNG", optimize=False, compress_level=6)
    except OSError as exc:
        raise OSError(f"cannot write overlay to {path}: {exc}") from exc
    return path


def read_metrics(log_path: str | os.PathLike) -> list[dict]:
    records = []
    with open(log_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise MetricsLogError(f"{log_path}:{lineno}: malformed record ({exc.msg})") from exc
            missing = {"step", "total", "lr", *BRANCHES} - set(rec)
            if missing:
                raise MetricsLogError(f"{log_path}:{lineno}: missing fields {sorted(missing)}")
            records.append(rec)
    if not records:
        raise MetricsLogError(f"{log_path}: no records")
    return records


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def plot_metrics(log_path: str | os.PathLike, out_dir: str | os.PathLike) -> dict[str, Path]:
    """Write ``total``, ``lr``, ``l_gg``, ``l_ll`` and ``l_gl`` as ``<name>.png`` plus ``<name>.csv``.

    Branch charts carry one curve per stage (Res2..Res5).
    """
    records = read_metrics(log_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps = [r["step"] for r in records]
    written: dict[str, Path] = {}

    for name in ("total", "lr"):
        series = [r[name] for r in records]
        _write_csv(out / f"{name}.csv", ["step", name], [[s, repr(v)] for s, v in zip(steps, series)])
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(steps, series)
        ax.set_xlabel("step")
        ax.set_ylabel(name)
        fig.tight_layout()
        fig.savefig(out / f"{name}.png", dpi=100)
        plt.close(fig)
        written[name] = out / f"{name}.png"

    for branch in BRANCHES:
        cols = list(zip(*[r[branch] for r in records]))
        _write_csv(
            out / f"{branch}.csv",
            ["step"] + [f"res{s}" for s in range(2, 2 + len(cols))],
            [[s] + [repr(c[i]) for c in cols] for i, s in enumerate(steps)],
        )
        fig, ax = plt.subplots(figsize=(6, 3.5))
        for i, c in enumerate(cols):
            ax.plot(steps, c, label=f"Res{i + 2}")
        ax.set_xlabel("step")
        ax.set_ylabel(branch)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / f"{branch}.png", dpi=100)
        plt.close(fig)
        written[branch] = out / f"{branch}.png"
    return written
