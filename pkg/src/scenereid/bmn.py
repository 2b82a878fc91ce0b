"""Background modulation: multi-granularity person embedding plus the
norm-supervision loss that pushes person norms up and background norms down.
"""
from __future__ import annotations

import warnings

import torch
import torch.nn as nn

from .primitives import BatchNorm1d, BatchNorm2d, Cbam, DropPath

LEVEL1_GRID = (24, 12)
LEVEL2_GRID = (12, 6)
STRIP_PARTS = (1, 2, 3)


def strip_split(x, parts):
    """Split a (B,C,H,W) or (C,H,W) map into `parts` horizontal strips, top to bottom."""
    if parts not in STRIP_PARTS:
        raise ValueError(f"parts must be one of {STRIP_PARTS}, got {parts}")
    h = x.shape[-2]
    if h % parts != 0:
        raise ValueError(f"height {h} not divisible into {parts} strips")
    step = h // parts
    return [x[..., i * step:(i + 1) * step, :] for i in range(parts)]


class StripEncoder(nn.Module):
    """Attention gating, global max pooling, linear projection, batch
    normalization and drop path, applied to one strip."""

    def __init__(self, channels, out_dim, drop_path=0.1, cbam_reduction=16, generator=None):
        super().__init__()
        self.cbam = Cbam(channels, reduction=cbam_reduction)
        self.linear = nn.Linear(channels, out_dim, bias=False)
        self.bn = BatchNorm1d(out_dim)
        self.drop = DropPath(drop_path, generator=generator)

    def forward(self, strip):
        if strip.dim() != 4:
            raise ValueError(f"strip encoder expects (B,C,h,w), got {tuple(strip.shape)}")
        x = self.cbam(strip)
        v = x.amax(dim=(2, 3))
        v = self.linear(v)
        v = self.bn(v)
        return self.drop(v)


class MultiGranularityEncoder(nn.Module):
    """Three branches over one pyramid level: global, 2-strip and 3-strip.

    Each strip has its own encoder; strip vectors are summed within a branch
    and the branch vectors summed into the per-level output.
    """

    def __init__(self, channels, out_dim, grid, drop_path=0.1, cbam_reduction=16, generator=None):
        super().__init__()
        self.grid = tuple(grid)
        self.branches = nn.ModuleList()
        for parts in STRIP_PARTS:
            self.branches.append(nn.ModuleList(
                StripEncoder(channels, out_dim, drop_path, cbam_reduction, generator)
                for _ in range(parts)))

    def forward(self, level_map):
        if tuple(level_map.shape[-2:]) != self.grid:
            raise ValueError(
                f"level map grid {tuple(level_map.shape[-2:])} does not match expected {self.grid}")
        total = None
        for parts, encoders in zip(STRIP_PARTS, self.branches):
            strips = strip_split(level_map, parts)
            branch = None
            for strip, encoder in zip(strips, encoders):
                v = encoder(strip)
                branch = v if branch is None else branch + v
            total = branch if total is None else total + branch
        return total


class Conv5(nn.Module):
    """Stride-2 down-sampling block between the two pyramid levels."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1, bias=False)
        self.bn = BatchNorm2d(channels)

    def forward(self, x):
        return torch.relu(self.bn(self.conv(x)))


class BackgroundModulation(nn.Module):
    """Encode a 24x12 person map into the multi-granularity embedding.

    Two pyramid levels by default (24x12 and the Conv5-downsampled 12x6),
    concatenated; the single-level ablation keeps only the 12x6 path.
    """

    def __init__(self, channels, embedding_dim, levels="both", drop_path=0.1,
                 cbam_reduction=16, generator=None):
        super().__init__()
        if levels not in ("both", "12x6"):
            raise ValueError(f"levels must be 'both' or '12x6', got {levels}")
        self.levels = levels
        per_level = embedding_dim if levels == "12x6" else embedding_dim // 2
        if levels == "both" and embedding_dim % 2 != 0:
            raise ValueError("two-level embedding dim must be even")
        self.out_dim = embedding_dim
        self.conv5 = Conv5(channels)
        if levels == "both":
            self.mge1 = MultiGranularityEncoder(channels, per_level, LEVEL1_GRID,
                                                drop_path, cbam_reduction, generator)
        else:
            self.mge1 = None
        self.mge2 = MultiGranularityEncoder(channels, per_level, LEVEL2_GRID,
                                            drop_path, cbam_reduction, generator)

    def forward(self, person_map):
        if tuple(person_map.shape[-2:]) != LEVEL1_GRID:
            raise ValueError(
                f"person map must be {LEVEL1_GRID}, got {tuple(person_map.shape[-2:])}")
        down = self.conv5(person_map)
        if self.mge1 is None:
            return self.mge2(down)
        return torch.cat([self.mge1(person_map), self.mge2(down)], dim=1)


class GlobalFeatureEmbedding(nn.Module):
    """Ablation baseline: global max pooling followed by a linear projection."""

    def __init__(self, channels, out_dim):
        super().__init__()
        self.linear = nn.Linear(channels, out_dim)

    def forward(self, level_map):
        if level_map.dim() != 4:
            raise ValueError(f"expected (B,C,H,W), got {tuple(level_map.shape)}")
        return self.linear(level_map.amax(dim=(2, 3)))


class TwoLevelGfe(nn.Module):
    """GFE applied at both pyramid levels, concatenated to the full width."""

    def __init__(self, channels, embedding_dim):
        super().__init__()
        if embedding_dim % 2 != 0:
            raise ValueError("two-level embedding dim must be even")
        self.out_dim = embedding_dim
        self.conv5 = Conv5(channels)
        self.gfe1 = GlobalFeatureEmbedding(channels, embedding_dim // 2)
        self.gfe2 = GlobalFeatureEmbedding(channels, embedding_dim // 2)

    def forward(self, person_map):
        if tuple(person_map.shape[-2:]) != LEVEL1_GRID:
            raise ValueError(
                f"person map must be {LEVEL1_GRID}, got {tuple(person_map.shape[-2:])}")
        return torch.cat([self.gfe1(person_map), self.gfe2(self.conv5(person_map))], dim=1)


class NormGate(nn.Module):
    """Map embedding L2-norms into (0,1): sigmoid(BN(||e||)), or plain
    sigmoid(||e||) in the no-BN ablation (range then collapses to [0.5, 1))."""

    def __init__(self, use_bn=True):
        super().__init__()
        self.bn = BatchNorm1d(1) if use_bn else None

    def forward(self, embeddings):
        if embeddings.dim() != 2:
            raise ValueError(f"expected a batch of embeddings, got {tuple(embeddings.shape)}")
        if self.training and embeddings.shape[0] == 0:
            raise ValueError("empty batch in training mode")
        norms = embeddings.norm(dim=1, keepdim=True)
        if self.bn is not None:
            norms = self.bn(norms)
        return torch.sigmoid(norms.squeeze(1))


def bnr_loss(q, y):
    """Binary cross-entropy on the mapped norm; y=1 person, y=0 background."""
    q = torch.as_tensor(q)
    y = torch.as_tensor(y, dtype=q.dtype)
    if q.shape != y.shape:
        raise ValueError(f"q and y shapes differ: {tuple(q.shape)} vs {tuple(y.shape)}")
    if torch.any((y != 0) & (y != 1)):
        raise ValueError("labels must be 0 (background) or 1 (person)")
    if torch.any(q < 0) or torch.any(q > 1):
        raise ValueError("q must lie in [0, 1]")
    eps = torch.finfo(q.dtype).eps
    if torch.any(q <= 0) or torch.any(q >= 1):
        warnings.warn("bnr_loss received saturated probabilities; clamping by epsilon")
        q = q.clamp(eps, 1 - eps)
    return -(y * torch.log(q) + (1 - y) * torch.log(1 - q)).mean()
