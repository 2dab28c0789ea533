"""Per-stage linear probes on frozen backbone features and the MLS/GLC ablation grid."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .augment import ingest, resize_bilinear
from .config import EvalConfig, ExperimentConfig
from .model import DetcoEncoder, pool, to_tensor
from .trainer import init_state, load_checkpoint, run

ABLATION_ROWS = (("a", False, False), ("b", True, False), ("c", False, True), ("d", True, True))


@dataclass
class ProbeReport:
    accuracy: dict[int, float]
    chance: float
    config: dict

    def to_dict(self) -> dict:
        return {"accuracy": {str(k): v for k, v in self.accuracy.items()}, "chance": self.chance, "config": self.config}


def _encoder(source: DetcoEncoder | str | os.PathLike) -> tuple[DetcoEncoder, int | None]:
    if isinstance(source, DetcoEncoder):
        return source, None
    state = load_checkpoint(source)
    return state.query, state.config.augment.global_side


@torch.no_grad()
def extract_features(
    source: DetcoEncoder | str | os.PathLike,
    images: Sequence[np.ndarray],
    stage: int,
    side: int | None = None,
    batch_size: int = 64,
) -> np.ndarray:
    """Global-average-pooled backbone features of ``stage`` (2..5), one row per image.

    Images are resized to ``side`` (default: the checkpoint's global view side,
    else 64) without augmentation. The encoder is never modified.
    """
    if stage not in (2, 3, 4, 5):
        raise ValueError(f"stage must be one of 2, 3, 4, 5; got {stage}")
    encoder, ckpt_side = _encoder(source)
    side = side or ckpt_side or 64
    was_training = encoder.training
    encoder.eval()
    rows = []
    try:
        for start in range(0, len(images), batch_size):
            chunk = [resize_bilinear(ingest(im), side, side) for im in images[start : start + batch_size]]
            feats = encoder.stage_features(to_tensor(chunk))
            rows.append(pool(feats[stage - 2]).double().numpy())
    finally:
        encoder.train(was_training)
    return np.concatenate(rows)


def split_mask(features: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """True for training rows. Assignment depends only on row content and seed,
    so duplicated rows always land in the same partition."""
    out = np.empty(len(features), dtype=bool)
    salt = str(seed).encode()
    feats = np.ascontiguousarray(features, dtype=np.float64)
    for i, row in enumerate(feats):
        digest = hashlib.blake2b(row.tobytes(), digest_size=8, key=salt).digest()
        out[i] = int.from_bytes(digest, "little") / 2**64 < fraction
    return out


def index_split(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Stratified, seeded train mask over item positions (independent of features)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    out = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        out[idx[: int(round(fraction * len(idx)))]] = True
    return out


def linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    cfg: EvalConfig | None = None,
    train_mask: np.ndarray | None = None,
) -> float:
    """Validation accuracy of a linear classifier trained on frozen features.

    Without ``train_mask`` the split is content-based (see ``split_mask``).
    """
    cfg = cfg or EvalConfig()
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    num_classes = int(labels.max()) + 1
    if len(features) < 2 * num_classes:
        raise ValueError(f"need at least {2 * num_classes} rows for {num_classes} classes, got {len(features)}")
    train = split_mask(features, cfg.train_fraction, cfg.seed) if train_mask is None else np.asarray(train_mask, bool)
    if train.all() or not train.any():
        raise ValueError("degenerate split: one partition is empty")

    x_tr, y_tr = features[train], labels[train]
    x_va, y_va = features[~train], labels[~train]
    mean = x_tr.mean(axis=0)
    std = x_tr.std(axis=0) + 1e-8
    x_tr = torch.from_numpy((x_tr - mean) / std)
    x_va = torch.from_numpy((x_va - mean) / std)
    y_tr_t = torch.from_numpy(y_tr)

    weight = torch.zeros(num_classes, features.shape[1], dtype=torch.float64, requires_grad=True)
    bias = torch.zeros(num_classes, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([weight, bias], lr=cfg.learning_rate)
    for _ in range(cfg.epochs):
        opt.zero_grad()
        logits = x_tr @ weight.T + bias
        if cfg.probe_type == "linear-softmax":
            loss = F.cross_entropy(logits, y_tr_t)
        else:
            loss = F.multi_margin_loss(logits, y_tr_t)
        loss = loss + cfg.weight_decay * 0.5 * (weight**2).sum()
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = (x_va @ weight.T + bias).argmax(dim=1).numpy()
    return float((pred == y_va).mean())


def probe(
    source: DetcoEncoder | str | os.PathLike,
    images: Sequence[np.ndarray],
    labels: np.ndarray,
    cfg: EvalConfig | None = None,
    side: int | None = None,
) -> ProbeReport:
    cfg = cfg or EvalConfig()
    cfg.validate()
    encoder, ckpt_side = _encoder(source)
    side = side or ckpt_side
    # one split for every stage so stage accuracies share a validation set
    mask = index_split(labels, cfg.train_fraction, cfg.seed)
    acc = {}
    for stage in cfg.stages:
        feats = extract_features(encoder, images, stage, side=side)
        acc[stage] = linear_probe(feats, labels, cfg, train_mask=mask)
    num_classes = int(np.max(labels)) + 1
    return ProbeReport(accuracy=acc, chance=1.0 / num_classes, config=dataclasses.asdict(cfg))


def random_init_probe(
    cfg: ExperimentConfig, images: Sequence[np.ndarray], labels: np.ndarray
) -> ProbeReport:
    """Probe of the untrained encoder built from ``cfg`` (the no-pretraining baseline)."""
    return probe(init_state(cfg).query, images, labels, cfg.eval, side=cfg.augment.global_side)


@dataclass
class AblationRow:
    name: str
    mls: bool
    glc: bool
    report: ProbeReport
    final_loss: float
    run_dir: str


def ablation_grid(
    images: Sequence[np.ndarray],
    labels: np.ndarray,
    base: ExperimentConfig,
    out_dir: str | os.PathLike,
    rows: Sequence[tuple[str, bool, bool]] = ABLATION_ROWS,
) -> list[AblationRow]:
    """Pretrain once per {MLS, GLC} setting, then probe every stage."""
    out = []
    for name, mls, glc in rows:
        cfg = dataclasses.replace(
            base, trainer=dataclasses.replace(base.trainer, mls_enabled=mls, glc_enabled=glc)
        )
        result = run(cfg, images, Path(out_dir) / f"row_{name}")
        report = probe(result.state.query, images, labels, cfg.eval, side=cfg.augment.global_side)
        with open(result.metrics_log) as fh:
            last = json.loads(fh.readlines()[-1])["total"] if cfg.trainer.total_steps else float("nan")
        out.append(AblationRow(name, mls, glc, report, last, str(result.run_dir)))
    return out


def format_table(rows: Sequence[AblationRow]) -> str:
    stages = sorted({s for r in rows for s in r.report.accuracy})
    head = ["row", "+MLS", "+GLC"] + [f"Res{s}" for s in stages] + ["final loss"]
    lines = [head]
    for r in rows:
        lines.append(
            [f"({r.name})", "yes" if r.mls else "no", "yes" if r.glc else "no"]
            + [f"{100 * r.report.accuracy[s]:.1f}" for s in stages]
            + [f"{r.final_loss:.4f}"]
        )
    widths = [max(len(line[i]) for line in lines) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(line, widths)) for line in lines) + "\n"


def rows_to_json(rows: Sequence[AblationRow]) -> list[dict]:
    return [
        {"row": r.name, "mls": r.mls, "glc": r.glc, "final_loss": r.final_loss, "run_dir": r.run_dir, **r.report.to_dict()}
        for r in rows
    ]
