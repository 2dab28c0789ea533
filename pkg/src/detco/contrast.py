"""InfoNCE against queued negatives and the weighted multi-stage objective."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import torch
import torch.nn.functional as F

from .memory import NORM_TOL, FeatureQueue, QueueBank


class StageLoss(NamedTuple):
    l_gg: torch.Tensor
    l_ll: torch.Tensor
    l_gl: torch.Tensor


@dataclass(frozen=True)
class Temperatures:
    tau_gg: float = 0.2
    tau_ll: float = 0.15
    tau_gl: float = 0.5

    def __post_init__(self):
        for name in ("tau_gg", "tau_ll", "tau_gl"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")


@dataclass(frozen=True)
class LossWeights:
    w: tuple[float, float, float, float] = (0.1, 0.4, 0.7, 1.0)

    def __post_init__(self):
        if len(self.w) != 4 or any(x < 0 for x in self.w):
            raise ValueError(f"loss weights must be 4 non-negative values, got {self.w}")


def _f(x: torch.Tensor | float) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


@dataclass
class DetcoLossReport:
    per_stage: list[StageLoss]
    weights: tuple[float, ...]
    total: torch.Tensor = field(repr=False)

    def recombine(self) -> float:
        return sum(w * (_f(s.l_gg) + _f(s.l_ll) + _f(s.l_gl)) for w, s in zip(self.weights, self.per_stage))

    def as_record(self) -> dict:
        return {
            "l_gg": [_f(s.l_gg) for s in self.per_stage],
            "l_ll": [_f(s.l_ll) for s in self.per_stage],
            "l_gl": [_f(s.l_gl) for s in self.per_stage],
            "total": _f(self.total),
        }


def _check_unit(name: str, x: torch.Tensor) -> None:
    if x.numel() == 0:
        return
    dev = (x.detach().norm(dim=1) - 1).abs().max()
    if dev > NORM_TOL:
        raise ValueError(f"{name} rows must be unit-norm (max deviation {float(dev):.3g})")


def info_nce(
    q: torch.Tensor,
    k_pos: torch.Tensor,
    negs: torch.Tensor,
    tau: float,
    check_norms: bool = True,
) -> torch.Tensor:
    """Batch-mean InfoNCE of each query against its positive and the shared negatives.

    Computed in float64 with max-shifted logits; ``k_pos`` and ``negs`` are
    treated as constants.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be > 0, got {tau}")
    if check_norms:
        _check_unit("q", q)
        _check_unit("k_pos", k_pos)
        _check_unit("negs", negs)
    q = q.to(torch.float64)
    k_pos = k_pos.detach().to(torch.float64)
    negs = negs.detach().to(torch.float64)
    l_pos = (q * k_pos).sum(dim=1, keepdim=True)
    l_neg = q @ negs.T
    logits = torch.cat([l_pos, l_neg], dim=1) / tau
    target = torch.zeros(q.shape[0], dtype=torch.long)
    return F.cross_entropy(logits, target)


def info_nce_grad(q: torch.Tensor, k_pos: torch.Tensor, negs: torch.Tensor, tau: float) -> torch.Tensor:
    """Closed-form gradient of ``info_nce`` with respect to ``q``.

    Per row: (sum_j p_j k_j - k_pos) / (tau * B), p the softmax over [k_pos; negs].
    """
    q, k_pos, negs = (t.to(torch.float64) for t in (q, k_pos, negs))
    keys = torch.cat([k_pos[:, None, :], negs[None].expand(q.shape[0], -1, -1)], dim=1)
    logits = torch.einsum("bd,bkd->bk", q, keys) / tau
    p = torch.softmax(logits, dim=1)
    expected = torch.einsum("bk,bkd->bd", p, keys)
    return (expected - k_pos) / (tau * q.shape[0])


def _negs(queue: FeatureQueue | torch.Tensor) -> torch.Tensor:
    return queue.negatives() if isinstance(queue, FeatureQueue) else queue


def stage_losses(
    q_g: torch.Tensor,
    k_g: torch.Tensor,
    q_l: torch.Tensor,
    k_l: torch.Tensor,
    global_queue: FeatureQueue | torch.Tensor,
    local_queue: FeatureQueue | torch.Tensor,
    taus: Temperatures,
) -> StageLoss:
    """The three branch losses of one stage; queues may be given as snapshots."""
    global_negs = _negs(global_queue)
    local_negs = _negs(local_queue)
    return StageLoss(
        l_gg=info_nce(q_g, k_g, global_negs, taus.tau_gg),
        l_ll=info_nce(q_l, k_l, local_negs, taus.tau_ll),
        l_gl=info_nce(q_l, k_g, global_negs, taus.tau_gl),
    )


def detco_loss(
    embeds_q: dict[str, Sequence[torch.Tensor]],
    embeds_k: dict[str, Sequence[torch.Tensor]],
    bank: QueueBank,
    taus: Temperatures,
    weights: LossWeights,
    glc: bool = True,
) -> DetcoLossReport:
    """Weighted sum over stages of the three branch losses.

    ``embeds_*`` map ``"global"`` and ``"local"`` to four (B, d) arrays each.
    With ``glc=False`` the local entries are ignored and both local branches
    report zero.
    """
    zero = torch.zeros((), dtype=torch.float64)
    per_stage = []
    total = zero
    for i in range(4):
        gq, lq = bank.stage(i)
        q_g, k_g = embeds_q["global"][i], embeds_k["global"][i]
        if glc:
            s = stage_losses(q_g, k_g, embeds_q["local"][i], embeds_k["local"][i], gq, lq, taus)
        else:
            s = StageLoss(info_nce(q_g, k_g, gq.negatives(), taus.tau_gg), zero, zero)
        per_stage.append(s)
        total = total + weights.w[i] * (s.l_gg + s.l_ll + s.l_gl)
    return DetcoLossReport(per_stage=per_stage, weights=tuple(weights.w), total=total)
