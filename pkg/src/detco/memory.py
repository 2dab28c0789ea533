"""FIFO memory banks of key embeddings used as negatives."""

from __future__ import annotations

from dataclasses import dataclass

import torch

NORM_TOL = 1e-4


class QueueStateError(RuntimeError):
    pass


def random_unit_rows(n: int, d: int, generator: torch.Generator | None = None) -> torch.Tensor:
    x = torch.randn(n, d, generator=generator)
    return x / x.norm(dim=1, keepdim=True)


class FeatureQueue:
    """Ring buffer of ``capacity`` unit-norm rows of width ``dim``."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError(f"capacity and dim must be positive, got {capacity}, {dim}")
        self.capacity = capacity
        self.dim = dim
        self.storage = torch.zeros(capacity, dim)
        self.ptr = 0
        self.filled = 0

    @classmethod
    def random(cls, capacity: int, dim: int, generator: torch.Generator | None = None) -> FeatureQueue:
        q = cls(capacity, dim)
        q.storage.copy_(random_unit_rows(capacity, dim, generator))
        q.filled = capacity
        return q

    @torch.no_grad()
    def enqueue(self, keys: torch.Tensor) -> FeatureQueue:
        keys = keys.detach().to(self.storage.dtype)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ValueError(f"expected (B, {self.dim}) keys, got {tuple(keys.shape)}")
        b = keys.shape[0]
        if b > self.capacity:
            raise ValueError(f"batch of {b} exceeds queue capacity {self.capacity}")
        norms = keys.norm(dim=1)
        if bool(((norms - 1).abs() > NORM_TOL).any()):
            raise ValueError(f"keys must be unit-norm (tol {NORM_TOL}); norms span [{norms.min():.6f}, {norms.max():.6f}]")
        idx = (self.ptr + torch.arange(b)) % self.capacity
        self.storage[idx] = keys
        self.ptr = (self.ptr + b) % self.capacity
        self.filled = min(self.capacity, self.filled + b)
        return self

    def negatives(self) -> torch.Tensor:
        if self.filled == 0:
            raise QueueStateError("queue is empty; warm-start it with random unit rows")
        return self.storage[: self.filled].clone()

    def newest(self, n: int) -> torch.Tensor:
        """The last ``n`` rows written, oldest first."""
        idx = (self.ptr - n + torch.arange(n)) % self.capacity
        return self.storage[idx].clone()


@dataclass
class QueueBank:
    global_queues: list[FeatureQueue]
    local_queues: list[FeatureQueue]

    @classmethod
    def create(cls, capacity: int, dim: int, seed: int = 0) -> QueueBank:
        gen = torch.Generator().manual_seed(seed)
        return cls(
            global_queues=[FeatureQueue.random(capacity, dim, gen) for _ in range(4)],
            local_queues=[FeatureQueue.random(capacity, dim, gen) for _ in range(4)],
        )

    def stage(self, i: int) -> tuple[FeatureQueue, FeatureQueue]:
        return self.global_queues[i], self.local_queues[i]

    def all_queues(self) -> dict[str, FeatureQueue]:
        out = {f"global/{i}": q for i, q in enumerate(self.global_queues)}
        out.update({f"local/{i}": q for i, q in enumerate(self.local_queues)})
        return out
