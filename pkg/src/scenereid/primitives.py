"""Differentiable building blocks shared by the modulation networks.

Everything here is a pure function of its inputs and parameters (given the
training-mode flag), so autograd gradients can be checked against central
finite differences.  Randomness (drop path) flows through an explicitly
provided ``torch.Generator``; nothing touches global RNG state.
"""
from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_EPS = 1e-5


def conv2d(x, weight, bias=None, *, stride=1, padding=0):
    """Cross-correlation of a (B,C,H,W) or (C,H,W) map with an OIHW kernel."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError(f"conv2d expects 4-d input/kernel, got {tuple(x.shape)} / {tuple(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {weight.shape[1]}")
    kh, kw = weight.shape[2], weight.shape[3]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ValueError(f"conv2d spatial dims {x.shape[2:]} too small for {kh}x{kw} kernel with padding {padding}")
    out = F.conv2d(x, weight, bias, stride=stride, padding=padding)
    return out.squeeze(0) if squeeze else out


class BatchNorm1d(nn.BatchNorm1d):
    """BatchNorm1d that rejects single-sample training batches up front."""

    def forward(self, x):
        if self.training and x.shape[0] < 2:
            raise ValueError("batch_norm in training mode needs a batch of at least 2 (variance undefined)")
        return super().forward(x)


class BatchNorm2d(nn.BatchNorm2d):
    def forward(self, x):
        if self.training and x.shape[0] < 2 and x.shape[2] * x.shape[3] < 2:
            raise ValueError("batch_norm in training mode needs at least 2 values per channel")
        return super().forward(x)


class LayerNorm(nn.LayerNorm):
    """Per-token normalization over the feature dimension."""

    def __init__(self, dim, eps=NORM_EPS):
        if dim < 2:
            raise ValueError("layer_norm needs feature dimension >= 2")
        super().__init__(dim, eps=eps)


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction=16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc = nn.Sequential(
            nn.Conv2d(channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, 1, bias=False),
        )

    def forward(self, x):
        avg = F.adaptive_avg_pool2d(x, 1)
        mx = F.adaptive_max_pool2d(x, 1)
        return torch.sigmoid(self.fc(avg) + self.fc(mx))


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x):
        avg = torch.mean(x, dim=1, keepdim=True)
        mx, _ = torch.max(x, dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))


class Cbam(nn.Module):
    """Channel attention then spatial attention, each applied multiplicatively."""

    def __init__(self, channels, reduction=16, spatial_kernel=7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(spatial_kernel)

    def forward(self, x):
        if x.dim() != 4:
            raise ValueError(f"cbam expects (B,C,H,W), got {tuple(x.shape)}")
        x = x * self.channel(x)
        x = x * self.spatial(x)
        return x


class DropPath(nn.Module):
    """Per-sample stochastic depth on a batch of vectors.

    Training: each row is zeroed with probability p, survivors are scaled by
    1/(1-p) so the expectation is preserved.  Eval: identity.
    """

    def __init__(self, p, generator=None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"drop_path probability must lie in [0, 1), got {p}")
        self.p = p
        self.generator = generator

    def forward(self, x):
        if not self.training or self.p == 0.0:
            return x
        keep = 1.0 - self.p
        mask = torch.rand(x.shape[0], 1, dtype=x.dtype, generator=self.generator)
        mask = (mask < keep).to(x.dtype) / keep
        return x * mask

    def extra_repr(self):
        return f"p={self.p}"


def _bilinear_sample(fmap, ys, xs):
    """Sample (C,H,W) map at continuous points; pixel i is centered at i+0.5,
    borders replicate."""
    c, h, w = fmap.shape
    ys = ys - 0.5
    xs = xs - 0.5
    y0 = torch.floor(ys)
    x0 = torch.floor(xs)
    wy = (ys - y0).to(fmap.dtype)
    wx = (xs - x0).to(fmap.dtype)
    y0 = y0.long()
    x0 = x0.long()
    y0c = y0.clamp(0, h - 1)
    y1c = (y0 + 1).clamp(0, h - 1)
    x0c = x0.clamp(0, w - 1)
    x1c = (x0 + 1).clamp(0, w - 1)
    flat = fmap.reshape(c, -1)
    idx = lambda yy, xx: flat[:, (yy * w + xx).reshape(-1)].reshape(c, *ys.shape)
    top = idx(y0c, x0c) * (1 - wx) + idx(y0c, x1c) * wx
    bot = idx(y1c, x0c) * (1 - wx) + idx(y1c, x1c) * wx
    return top * (1 - wy) + bot * wy


def roi_align_multi(scene, boxes, out_hw=(24, 12)):
    """roi_align over several normalized boxes of one scene map in one gather.

    Returns (N, C, oh, ow)."""
    if scene.dim() != 3:
        raise ValueError(f"roi_align expects a (C,H,W) scene map, got {tuple(scene.shape)}")
    coords = torch.as_tensor(
        [[float(v) for v in box] for box in boxes], dtype=scene.dtype).reshape(-1, 4)
    n = coords.shape[0]
    if n == 0:
        return scene.new_zeros(0, scene.shape[0], *out_hw)
    if torch.any(coords < 0.0) or torch.any(coords > 1.0):
        raise ValueError(f"box out of the normalized [0,1] image bounds: {boxes}")
    if torch.any(coords[:, 2] - coords[:, 0] <= 0) or torch.any(coords[:, 3] - coords[:, 1] <= 0):
        raise ValueError(f"degenerate box: width/height must be > 0: {boxes}")
    _, h, w = scene.shape
    oh, ow = out_hw
    fy0 = coords[:, 1] * h
    fx0 = coords[:, 0] * w
    bin_h = (coords[:, 3] - coords[:, 1]) * h / oh
    bin_w = (coords[:, 2] - coords[:, 0]) * w / ow
    offs = torch.tensor([0.25, 0.75], dtype=scene.dtype)
    iy = torch.arange(oh, dtype=scene.dtype)[:, None] + offs[None, :]   # (oh, 2)
    ix = torch.arange(ow, dtype=scene.dtype)[:, None] + offs[None, :]   # (ow, 2)
    sy = fy0[:, None, None] + iy[None] * bin_h[:, None, None]           # (N, oh, 2)
    sx = fx0[:, None, None] + ix[None] * bin_w[:, None, None]           # (N, ow, 2)
    ys = sy[:, :, None, :, None].expand(n, oh, ow, 2, 2).reshape(n, oh, ow, 4)
    xs = sx[:, None, :, None, :].expand(n, oh, ow, 2, 2).reshape(n, oh, ow, 4)
    samples = _bilinear_sample(scene, ys, xs)          # (C, N, oh, ow, 4)
    return samples.mean(dim=-1).permute(1, 0, 2, 3)


def roi_align(scene, box, out_hw=(24, 12)):
    """Pool a person feature map from normalized box coords (x0, y0, x1, y1).

    Each output cell averages a 2x2 grid of bilinear samples placed at the
    cell's quarter points.
    """
    return roi_align_multi(scene, [box], out_hw)[0]


def adaptive_max_pool(x, out_hw=(7, 7)):
    """Per-channel max over the standard adaptive window partition."""
    squeeze = x.dim() == 3
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ValueError(f"adaptive_max_pool expects (B,C,H,W) or (C,H,W), got {tuple(x.shape)}")
    oh, ow = out_hw
    if x.shape[2] < oh or x.shape[3] < ow:
        raise ValueError(f"adaptive_max_pool input {tuple(x.shape[2:])} smaller than output grid {out_hw}")
    out = F.adaptive_max_pool2d(x, out_hw)
    return out.squeeze(0) if squeeze else out


class MultiHeadCrossAttention(nn.Module):
    """Scaled dot-product cross-attention; the residual path is the caller's
    business (the denoiser deliberately omits it)."""

    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, query, kv, return_weights=False):
        if query.dim() != 3 or kv.dim() != 3:
            raise ValueError("attention expects (B, L, D) sequences")
        if query.shape[-1] != self.dim or kv.shape[-1] != self.dim:
            raise ValueError(
                f"attention dim mismatch: module dim {self.dim}, query {query.shape[-1]}, kv {kv.shape[-1]}")
        b, lq, _ = query.shape
        lk = kv.shape[1]
        hd = self.dim // self.heads
        q = self.q_proj(query).reshape(b, lq, self.heads, hd).transpose(1, 2)
        k = self.k_proj(kv).reshape(b, lk, self.heads, hd).transpose(1, 2)
        v = self.v_proj(kv).reshape(b, lk, self.heads, hd).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / (hd ** 0.5)
        weights = torch.softmax(logits, dim=-1)
        out = weights @ v
        out = out.transpose(1, 2).reshape(b, lq, self.dim)
        out = self.out_proj(out)
        if return_weights:
            return out, weights
        return out
