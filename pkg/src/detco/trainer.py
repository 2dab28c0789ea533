"""Pretraining loop: views -> query/key encoders -> loss -> SGD -> EMA -> queues."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .augment import ViewBundle, make_bundle
from .config import ExperimentConfig, dumps, from_dict
from .contrast import DetcoLossReport, LossWeights, Temperatures, detco_loss
from .memory import QueueBank
from .model import DetcoEncoder, StructureError, make_key_encoder, momentum_update, to_tensor

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, record: dict):
        bad = [
            f"{name}[stage {i + 2}]={v}"
            for name in ("l_gg", "l_ll", "l_gl")
            for i, v in enumerate(record[name])
            if not math.isfinite(v)
        ]
        super().__init__(f"non-finite loss at step {step}: " + (", ".join(bad) or f"total={record['total']}"))
        self.step = step
        self.record = record


@dataclass
class TrainState:
    step: int
    query: DetcoEncoder
    key: DetcoEncoder
    optimizer: torch.optim.SGD
    bank: QueueBank
    config: ExperimentConfig
    # key embeddings of the most recent step, as enqueued
    last_keys: dict | None = None


def effective_weights(cfg: ExperimentConfig) -> LossWeights:
    if cfg.trainer.mls_enabled:
        return LossWeights(tuple(cfg.contrast.weights))
    return LossWeights((0.0, 0.0, 0.0, 1.0))


def temperatures(cfg: ExperimentConfig) -> Temperatures:
    c = cfg.contrast
    return Temperatures(c.tau_gg, c.tau_ll, c.tau_gl)


def trainable_parameters(query: DetcoEncoder, cfg: ExperimentConfig) -> dict[str, torch.nn.Parameter]:
    """Parameters the optimizer owns; heads of disabled branches are frozen."""
    weights = effective_weights(cfg).w
    out = {}
    for name, p in query.named_parameters():
        parts = name.split(".")
        if parts[0] == "global_heads" and weights[int(parts[1])] == 0:
            continue
        if parts[0] == "local_heads" and (not cfg.trainer.glc_enabled or weights[int(parts[1])] == 0):
            continue
        out[name] = p
    return out


def init_state(cfg: ExperimentConfig) -> TrainState:
    cfg.validate()
    with torch.random.fork_rng():
        torch.manual_seed(cfg.trainer.seed)
        query = DetcoEncoder(cfg.model)
    key = make_key_encoder(query)
    params = trainable_parameters(query, cfg)
    for name, p in query.named_parameters():
        p.requires_grad_(name in params)
    optimizer = torch.optim.SGD(
        list(params.values()),
        lr=cfg.trainer.lr,
        momentum=cfg.trainer.sgd_momentum,
        weight_decay=cfg.trainer.weight_decay,
    )
    bank = QueueBank.create(cfg.memory.queue_size, cfg.model.embed_dim, seed=cfg.trainer.seed)
    return TrainState(step=0, query=query, key=key, optimizer=optimizer, bank=bank, config=cfg)


def learning_rate(cfg: ExperimentConfig, step: int) -> float:
    base = cfg.trainer.lr
    if cfg.trainer.lr_schedule == "constant" or cfg.trainer.total_steps == 0:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * step / cfg.trainer.total_steps))


def bundle_seed(seed: int, step: int, j: int) -> int:
    return int(np.random.SeedSequence([seed, step, j]).generate_state(1, np.uint64)[0])


def build_bundles(images: Sequence[np.ndarray], seeds: Sequence[int], cfg: ExperimentConfig) -> list[ViewBundle]:
    workers = int(os.environ.get("DETCO_NUM_WORKERS", "1"))
    if workers <= 1:
        return [make_bundle(img, s, cfg.augment) for img, s in zip(images, seeds)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda a: make_bundle(a[0], a[1], cfg.augment), zip(images, seeds)))


def batch_tensors(bundles: Sequence[ViewBundle], with_patches: bool) -> dict[str, torch.Tensor]:
    out = {
        "i_q": to_tensor([b.i_q for b in bundles]),
        "i_k": to_tensor([b.i_k for b in bundles]),
    }
    if with_patches:
        for name in ("p_q", "p_k"):
            flat = to_tensor(np.concatenate([getattr(b, name).patches for b in bundles]))
            out[name] = flat.reshape(len(bundles), 9, *flat.shape[1:])
    return out


def train_step(state: TrainState, batch: Sequence[np.ndarray]) -> tuple[TrainState, DetcoLossReport]:
    cfg = state.config
    tc = cfg.trainer
    if len(batch) != tc.batch_size:
        raise ValueError(f"batch has {len(batch)} images, config expects {tc.batch_size}")
    glc = tc.glc_enabled
    lr = learning_rate(cfg, state.step)
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    seeds = [bundle_seed(tc.seed, state.step, j) for j in range(len(batch))]
    x = batch_tensors(build_bundles(batch, seeds, cfg), with_patches=glc)

    state.query.train()
    emb_q = {"global": state.query.embed_global(x["i_q"])}
    with torch.no_grad():
        emb_k = {"global": state.key.embed_global(x["i_k"])}
    if glc:
        emb_q["local"] = state.query.embed_local(x["p_q"])
        with torch.no_grad():
            emb_k["local"] = state.key.embed_local(x["p_k"])

    report = detco_loss(emb_q, emb_k, state.bank, temperatures(cfg), effective_weights(cfg), glc=glc)
    record = report.as_record()
    if not math.isfinite(record["total"]):
        raise NonFiniteLossError(state.step, record)

    state.optimizer.zero_grad(set_to_none=True)
    report.total.backward()
    state.optimizer.step()
    momentum_update(state.key, state.query, tc.momentum)

    for i in range(4):
        state.bank.global_queues[i].enqueue(emb_k["global"][i])
        if glc:
            state.bank.local_queues[i].enqueue(emb_k["local"][i])
    state.last_keys = emb_k
    state.step += 1
    return state, report


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Dataset indices for ``step``; each epoch is an independent seeded shuffle."""
    out = np.empty(batch_size, dtype=np.int64)
    cache: dict[int, np.ndarray] = {}
    for j, p in enumerate(range(step * batch_size, (step + 1) * batch_size)):
        epoch, pos = divmod(p, n)
        if epoch not in cache:
            cache[epoch] = np.random.default_rng(np.random.SeedSequence([seed, 1, epoch])).permutation(n)
        out[j] = cache[epoch][pos]
    return out


def state_arrays(state: TrainState) -> tuple[dict[str, np.ndarray], dict]:
    arrays = ckpt.module_arrays("query", state.query)
    arrays.update(ckpt.module_arrays("key", state.key))
    names = {id(p): n for n, p in state.query.named_parameters()}
    for p, s in state.optimizer.state.items():
        if s.get("momentum_buffer") is not None:
            arrays[f"optim/{names[id(p)]}/momentum_buffer"] = s["momentum_buffer"].numpy().copy()
    queues = {}
    for name, q in state.bank.all_queues().items():
        arrays[f"queue/{name}"] = q.storage.numpy().copy()
        queues[name] = {"ptr": q.ptr, "filled": q.filled}
    meta = {"step": state.step, "queues": queues, "config": state.config.to_dict()}
    return arrays, meta


def save_checkpoint(state: TrainState, path: str | os.PathLike) -> Path:
    arrays, meta = state_arrays(state)
    return ckpt.save(path, arrays, meta)


def _normalized(d: dict) -> dict:
    return json.loads(json.dumps(d))


def _diff_keys(a: dict, b: dict, prefix: str = "") -> list[str]:
    out = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        if isinstance(va, dict) and isinstance(vb, dict):
            out += _diff_keys(va, vb, f"{prefix}{k}.")
        elif va != vb:
            out.append(f"{prefix}{k}: checkpoint={va!r} config={vb!r}")
    return out


def load_checkpoint(path: str | os.PathLike, cfg: ExperimentConfig | None = None) -> TrainState:
    """Rebuild a TrainState; with ``cfg`` given, any config difference is an error."""
    arrays, meta = ckpt.load(path)
    stored = from_dict(meta["config"])
    if cfg is not None:
        diff = _diff_keys(_normalized(meta["config"]), _normalized(cfg.to_dict()))
        if diff:
            raise StructureError("checkpoint/config mismatch: " + "; ".join(diff))
    state = init_state(stored)
    ckpt.load_module("query", state.query, arrays)
    ckpt.load_module("key", state.key, arrays)
    for name, p in state.query.named_parameters():
        buf = arrays.get(f"optim/{name}/momentum_buffer")
        if buf is not None:
            state.optimizer.state[p]["momentum_buffer"] = torch.from_numpy(buf.copy())
    for name, q in state.bank.all_queues().items():
        q.storage.copy_(torch.from_numpy(arrays[f"queue/{name}"]))
        q.ptr = meta["queues"][name]["ptr"]
        q.filled = meta["queues"][name]["filled"]
    state.step = meta["step"]
    return state


def new_run_dir(out: str | os.PathLike) -> Path:
    root = Path(out)
    stamp = datetime.now().strftime("run-%Y%m%d-%H%M%S")
    path = root / stamp
    n = 1
    while path.exists():
        path = root / f"{stamp}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


@dataclass
class RunResult:
    run_dir: Path
    checkpoint: Path
    metrics_log: Path
    state: TrainState


def run(
    cfg: ExperimentConfig,
    images: Sequence[np.ndarray],
    out_dir: str | os.PathLike,
    resume: str | os.PathLike | None = None,
    until: int | None = None,
) -> RunResult:
    """Train to ``cfg.trainer.total_steps`` (or ``until``), writing into a fresh run directory.

    Layout: ``effective_config.toml``, ``metrics.jsonl`` (one record per step),
    ``checkpoints/step_XXXXXX.npz``.
    """
    if len(images) == 0:
        raise ValueError("dataset is empty")
    cfg.validate()
    tc = cfg.trainer
    state = load_checkpoint(resume, cfg) if resume is not None else init_state(cfg)
    stop = tc.total_steps if until is None else min(until, tc.total_steps)

    run_dir = new_run_dir(out_dir)
    (run_dir / "effective_config.toml").write_text(dumps(cfg))
    metrics_path = run_dir / "metrics.jsonl"
    ckpt_dir = run_dir / "checkpoints"
    last = None
    with open(metrics_path, "w") as metrics:
        if state.step >= stop:
            last = save_checkpoint(state, ckpt_dir / f"step_{state.step:06d}.npz")
        while state.step < stop:
            idx = batch_indices(len(images), tc.batch_size, tc.seed, state.step)
            lr = learning_rate(cfg, state.step)
            try:
                state, report = train_step(state, [images[i] for i in idx])
            except NonFiniteLossError as exc:
                (run_dir / "failure.json").write_text(json.dumps({"step": exc.step, **exc.record}, indent=2))
                raise
            record = {"step": state.step, **report.as_record(), "lr": lr}
            metrics.write(json.dumps(record) + "\n")
            metrics.flush()
            if state.step % tc.checkpoint_every == 0 or state.step == stop:
                last = save_checkpoint(state, ckpt_dir / f"step_{state.step:06d}.npz")
            if state.step % 10 == 0:
                log.info("step %d total %.4f lr %.5f", state.step, record["total"], lr)
    return RunResult(run_dir=run_dir, checkpoint=last, metrics_log=metrics_path, state=state)
