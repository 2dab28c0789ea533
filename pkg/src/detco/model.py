"""Staged encoders with four feature taps, per-stage projection heads, EMA updates."""

from __future__ import annotations

from collections import OrderedDict
from typing import Mapping, NamedTuple, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig

STAGES = (2, 3, 4, 5)
MAX_STRIDE = 32
_MEAN = torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
_STD = torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)

ParameterSet = Mapping[str, torch.Tensor]


class ConfigurationError(ValueError):
    pass


class DegenerateEmbeddingError(ArithmeticError):
    """A head produced an all-zero vector, which has no direction to normalize."""


class StructureError(ValueError):
    pass


class StageFeatures(NamedTuple):
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor
    f5: torch.Tensor


def to_tensor(images: np.ndarray | Sequence[np.ndarray]) -> torch.Tensor:
    """(B, H, W, 3) images in [0, 1] -> normalized float32 (B, 3, H, W)."""
    x = torch.from_numpy(np.ascontiguousarray(np.asarray(images, dtype=np.float32)))
    x = x.permute(0, 3, 1, 2)
    return (x - _MEAN) / _STD


def _norm(channels: int, groups: int) -> nn.GroupNorm:
    g = groups
    while channels % g:
        g -= 1
    return nn.GroupNorm(g, channels)


class ToyBackbone(nn.Module):
    """Four conv stages; a stride-2 stem plus one stride-2 conv per stage."""

    def __init__(self, channels: Sequence[int] = (8, 16, 32, 64), groups: int = 8):
        super().__init__()
        c2, c3, c4, c5 = channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c2, 3, stride=2, padding=1, bias=False), _norm(c2, groups), nn.ReLU(inplace=True)
        )
        stages = []
        prev = c2
        for c in channels:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, c, 3, stride=2, padding=1, bias=False),
                    _norm(c, groups),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(c, c, 3, padding=1, bias=False),
                    _norm(c, groups),
                    nn.ReLU(inplace=True),
                )
            )
            prev = c
        self.stages = nn.ModuleList(stages)
        self.out_channels = tuple(channels)

    def forward(self, x: torch.Tensor) -> StageFeatures:
        x = self.stem(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return StageFeatures(*outs)


class Bottleneck(nn.Module):
    expansion = 4

    def __init__(self, in_ch: int, width: int, stride: int, groups: int):
        super().__init__()
        out_ch = width * self.expansion
        self.conv1 = nn.Conv2d(in_ch, width, 1, bias=False)
        self.norm1 = _norm(width, groups)
        self.conv2 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.norm2 = _norm(width, groups)
        self.conv3 = nn.Conv2d(width, out_ch, 1, bias=False)
        self.norm3 = _norm(out_ch, groups)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), _norm(out_ch, groups))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.norm1(self.conv1(x)))
        out = F.relu(self.norm2(self.conv2(out)))
        out = self.norm3(self.conv3(out))
        return F.relu(out + identity)


class ResNet50Backbone(nn.Module):
    """ResNet-50 layout (3, 4, 6, 3 bottlenecks) with group normalization."""

    def __init__(self, groups: int = 32):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            _norm(64, groups),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        layers = []
        in_ch = 64
        for width, blocks, stride in ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)):
            seq = []
            for b in range(blocks):
                seq.append(Bottleneck(in_ch, width, stride if b == 0 else 1, groups))
                in_ch = width * Bottleneck.expansion
            layers.append(nn.Sequential(*seq))
        self.stages = nn.ModuleList(layers)
        self.out_channels = (256, 512, 1024, 2048)

    def forward(self, x: torch.Tensor) -> StageFeatures:
        x = self.stem(x)
        outs = []
        for stage in self.stages:
            x = stage(x)
            outs.append(x)
        return StageFeatures(*outs)


class MLPHead(nn.Module):
    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int, activation: bool = True):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.act = nn.ReLU(inplace=True) if activation else nn.Identity()
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


def build_backbone(cfg: ModelConfig) -> nn.Module:
    if cfg.arch == "toy-cnn":
        return ToyBackbone(cfg.stage_channels, cfg.norm_groups)
    if cfg.arch == "resnet50-like":
        return ResNet50Backbone(groups=32)
    raise ConfigurationError(f"unknown arch {cfg.arch!r}")


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    if bool((norms <= eps).any()):
        bad = torch.nonzero(norms.squeeze(1) <= eps).flatten().tolist()
        raise DegenerateEmbeddingError(f"zero pre-normalization embedding in rows {bad}")
    return x / norms


def pool(f: torch.Tensor) -> torch.Tensor:
    return f.mean(dim=(2, 3))


def encode_stages(backbone: nn.Module, images: torch.Tensor) -> StageFeatures:
    if images.ndim != 4:
        raise ConfigurationError(f"expected a (B, 3, H, W) batch, got shape {tuple(images.shape)}")
    h, w = images.shape[-2:]
    if h != w:
        raise ConfigurationError(f"views must be square, got {h}x{w}")
    if h % MAX_STRIDE:
        raise ConfigurationError(f"view side {h} is not divisible by {MAX_STRIDE}")
    return backbone(images)


def project_global(heads: Sequence[nn.Module], feats: StageFeatures) -> list[torch.Tensor]:
    return [l2_normalize(head(pool(f))) for head, f in zip(heads, feats)]


def concat_patch_features(patch_feats: Sequence[StageFeatures], stage_index: int) -> torch.Tensor:
    """Pooled stage features of the 9 patches, concatenated in patch order -> (B, 9*C)."""
    return torch.cat([pool(pf[stage_index]) for pf in patch_feats], dim=1)


def project_local(heads: Sequence[nn.Module], patch_feats: Sequence[StageFeatures]) -> list[torch.Tensor]:
    if len(patch_feats) != 9:
        raise ValueError(f"expected 9 patch feature sets, got {len(patch_feats)}")
    batch = {pf.f2.shape[0] for pf in patch_feats}
    if len(batch) != 1:
        raise ValueError(f"inconsistent patch batch sizes {sorted(batch)}")
    return [l2_normalize(head(concat_patch_features(patch_feats, i))) for i, head in enumerate(heads)]


class DetcoEncoder(nn.Module):
    """Backbone plus four global and four local heads, none shared."""

    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.backbone = build_backbone(cfg)
        chans = self.backbone.out_channels
        hidden = [cfg.head_hidden_dim or c for c in chans]
        self.global_heads = nn.ModuleList(MLPHead(c, h, cfg.embed_dim) for c, h in zip(chans, hidden))
        self.local_heads = nn.ModuleList(MLPHead(9 * c, h, cfg.embed_dim) for c, h in zip(chans, hidden))

    def stage_features(self, images: torch.Tensor) -> StageFeatures:
        return encode_stages(self.backbone, images)

    def embed_global(self, images: torch.Tensor) -> list[torch.Tensor]:
        return project_global(self.global_heads, self.stage_features(images))

    def embed_local(self, patches: torch.Tensor) -> list[torch.Tensor]:
        """``patches``: (B, 9, 3, S, S) in shuffled order."""
        b, n = patches.shape[:2]
        if n != 9:
            raise ValueError(f"expected 9 patches per sample, got {n}")
        feats = self.stage_features(patches.reshape(b * n, *patches.shape[2:]))
        split = [f.reshape(b, n, *f.shape[1:]) for f in feats]
        per_patch = [StageFeatures(*(f[:, j] for f in split)) for j in range(n)]
        return project_local(self.local_heads, per_patch)


def parameter_set(module: nn.Module) -> "OrderedDict[str, torch.Tensor]":
    return OrderedDict((name, p) for name, p in module.named_parameters())


def _as_params(x: Union[nn.Module, ParameterSet]) -> Mapping[str, torch.Tensor]:
    return parameter_set(x) if isinstance(x, nn.Module) else x


def check_aligned(key: Union[nn.Module, ParameterSet], query: Union[nn.Module, ParameterSet]) -> None:
    kp, qp = _as_params(key), _as_params(query)
    problems = []
    for name in sorted(set(kp) ^ set(qp)):
        problems.append(f"{name}: present in {'key' if name in kp else 'query'} only")
    for name in sorted(set(kp) & set(qp)):
        if tuple(kp[name].shape) != tuple(qp[name].shape):
            problems.append(f"{name}: shape {tuple(kp[name].shape)} vs {tuple(qp[name].shape)}")
    if problems:
        raise StructureError("parameter sets differ: " + "; ".join(problems))


@torch.no_grad()
def momentum_update(
    key: Union[nn.Module, ParameterSet], query: Union[nn.Module, ParameterSet], m: float
) -> Union[nn.Module, ParameterSet]:
    """In place ``key <- m * key + (1 - m) * query`` for every parameter; returns ``key``."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {m}")
    check_aligned(key, query)
    kp, qp = _as_params(key), _as_params(query)
    if m == 1.0:
        return key
    for name, k in kp.items():
        k.mul_(m).add_(qp[name].detach(), alpha=1.0 - m)
    return key


def make_key_encoder(query: DetcoEncoder) -> DetcoEncoder:
    key = DetcoEncoder(query.cfg)
    key.load_state_dict(query.state_dict())
    for p in key.parameters():
        p.requires_grad_(False)
    return key
