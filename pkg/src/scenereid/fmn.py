"""Foreground modulation: scene noise extraction, 7x7 tokenization and the
cross-attention denoiser that emits a per-embedding correction offset.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .primitives import (
    NORM_EPS,
    BatchNorm2d,
    LayerNorm,
    MultiHeadCrossAttention,
    adaptive_max_pool,
)

TOKEN_GRID = (7, 7)
NUM_TOKENS = TOKEN_GRID[0] * TOKEN_GRID[1]


class NoiseExtractor(nn.Module):
    """Three conv-ReLU-BN layers mapping the scene map to a noise map.

    Channel plan in_channels -> mid[0] -> mid[1] -> out_dim; spatial dims are
    preserved (3x3, stride 1, padding 1).  out_dim must equal the embedding
    width so the noise tokens can serve as attention keys/values.
    """

    def __init__(self, in_channels, out_dim, mid_channels=(512, 256)):
        super().__init__()
        plan = [in_channels, mid_channels[0], mid_channels[1], out_dim]
        self.convs = nn.ModuleList(
            nn.Conv2d(plan[i], plan[i + 1], 3, padding=1) for i in range(3))
        self.bns = nn.ModuleList(BatchNorm2d(plan[i + 1]) for i in range(3))

    def forward(self, scene_map):
        if scene_map.dim() != 4:
            raise ValueError(f"extractor expects (B,C,H,W), got {tuple(scene_map.shape)}")
        x = scene_map
        for conv, bn in zip(self.convs, self.bns):
            x = bn(torch.relu(conv(x)))
        return x


class NoiseTokenizer(nn.Module):
    """Pool the noise map to 7x7, flatten to 49 tokens, add the learnable 2D
    position encoding and layer-normalize each token."""

    def __init__(self, dim):
        super().__init__()
        self.position = nn.Parameter(torch.randn(NUM_TOKENS, dim) * 0.02)
        self.ln = LayerNorm(dim)

    def forward(self, noise_map):
        if noise_map.dim() != 4:
            raise ValueError(f"tokenizer expects (B,D,H,W), got {tuple(noise_map.shape)}")
        pooled = adaptive_max_pool(noise_map, TOKEN_GRID)
        tokens = pooled.flatten(2).transpose(1, 2)  # (B, 49, D)
        return self.ln(tokens + self.position)


@dataclass
class AlignedBatch:
    """Per-scene groups padded with zero embeddings to a common size."""

    data: torch.Tensor        # (S, G, D)
    mask: torch.Tensor        # (S, G) bool, True where real
    scene_slot: torch.Tensor  # (N,) group row per original embedding
    group_slot: torch.Tensor  # (N,) position within the group

    @property
    def num_real(self):
        return self.scene_slot.shape[0]


def emb_align(embeddings, scene_ids, scene_order):
    """Group embeddings by scene and zero-pad every group to the max size.

    scene_order lists the scenes with available noise tokens, in token order;
    an embedding whose scene id is absent from it is an error.
    """
    if embeddings.dim() != 2:
        raise ValueError(f"expected (N,D) embeddings, got {tuple(embeddings.shape)}")
    n, d = embeddings.shape
    if len(scene_ids) != n:
        raise ValueError(f"{n} embeddings but {len(scene_ids)} scene ids")
    lookup = {sid: i for i, sid in enumerate(scene_order)}
    rows = []
    for sid in scene_ids:
        if sid not in lookup:
            raise ValueError(f"embedding references unknown scene id {sid!r}")
        rows.append(lookup[sid])
    s = len(scene_order)
    counts = [0] * s
    group_slots = []
    for r in rows:
        group_slots.append(counts[r])
        counts[r] += 1
    g = max(counts, default=0)
    scene_slot = torch.tensor(rows, dtype=torch.long)
    group_slot = torch.tensor(group_slots, dtype=torch.long)
    data = embeddings.new_zeros(s, g, d)
    mask = torch.zeros(s, g, dtype=torch.bool)
    if n:
        data[scene_slot, group_slot] = embeddings
        mask[scene_slot, group_slot] = True
    return AlignedBatch(data=data, mask=mask, scene_slot=scene_slot, group_slot=group_slot)


def emb_de_align(batch):
    """Drop the padding: original embeddings back in their original order."""
    return batch.data[batch.scene_slot, batch.group_slot]


class MaskedBatchNorm1d(nn.Module):
    """BatchNorm over the feature dim of an aligned (S,G,D) batch whose
    training statistics are computed over real (unmasked) members only."""

    def __init__(self, dim, eps=NORM_EPS, momentum=0.1):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.register_buffer("running_mean", torch.zeros(dim))
        self.register_buffer("running_var", torch.ones(dim))

    def forward(self, x, mask):
        if self.training:
            valid = x[mask]
            n = valid.shape[0]
            if n < 2:
                raise ValueError("masked batch norm needs at least 2 real members in training mode")
            mean = valid.mean(dim=0)
            var = valid.var(dim=0, unbiased=False)
            with torch.no_grad():
                self.running_mean.mul_(1 - self.momentum).add_(self.momentum * mean)
                self.running_var.mul_(1 - self.momentum).add_(
                    self.momentum * var * n / (n - 1))
        else:
            mean = self.running_mean
            var = self.running_var
        out = (x - mean) / torch.sqrt(var + self.eps)
        return out * self.weight + self.bias


class FeedForward(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(torch.relu(self.fc1(x)))


class FeatureDenoiser(nn.Module):
    """Modified decoder block: the self-attention slot holds a feed-forward
    sub-block, the cross-attention keeps no residual, and its output is
    batch-normalized (not layer-normalized) before the final feed-forward."""

    def __init__(self, dim, heads, ffn_hidden):
        super().__init__()
        self.ffn1 = FeedForward(dim, ffn_hidden)
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadCrossAttention(dim, heads)
        self.bn = MaskedBatchNorm1d(dim)
        self.ffn2 = FeedForward(dim, ffn_hidden)
        self.ln2 = LayerNorm(dim)

    def forward(self, aligned, tokens, return_attention=False):
        data, mask = aligned.data, aligned.mask
        if tokens.dim() != 3 or tokens.shape[0] != data.shape[0]:
            raise ValueError(
                f"need one token sequence per scene: got {tuple(tokens.shape)} for {data.shape[0]} scenes")
        h = self.ln1(data + self.ffn1(data))
        attended, weights = self.attn(h, tokens, return_weights=True)
        b = self.bn(attended, mask)
        out = self.ln2(b + self.ffn2(b))
        if return_attention:
            return out, weights
        return out


class ForegroundModulation(nn.Module):
    """Scene-conditioned offsets for person embeddings.

    mode 'cross-attention' runs the tokenizer + denoiser; mode 'linear' is the
    ablation that pools the noise map globally and projects it, giving one
    offset per scene.
    """

    def __init__(self, in_channels, dim, mode="cross-attention",
                 mid_channels=(512, 256), heads=8, ffn_hidden=2048):
        super().__init__()
        if mode not in ("cross-attention", "linear"):
            raise ValueError(f"unknown fmn mode {mode!r}")
        self.mode = mode
        self.dim = dim
        self.extractor = NoiseExtractor(in_channels, dim, mid_channels)
        if mode == "cross-attention":
            self.tokenizer = NoiseTokenizer(dim)
            self.denoiser = FeatureDenoiser(dim, heads, ffn_hidden)
        else:
            self.linear = nn.Linear(dim, dim)

    def scene_offsets(self, noise_map):
        """Linear-variant offsets, one per scene, from the noise map alone."""
        return self.linear(noise_map.amax(dim=(2, 3)))

    def forward(self, scene_maps, embeddings, scene_ids, scene_order=None):
        if scene_order is None:
            scene_order = list(range(scene_maps.shape[0]))
        if len(scene_order) != scene_maps.shape[0]:
            raise ValueError("scene_order length must match the scene map batch")
        noise = self.extractor(scene_maps)
        if self.mode == "linear":
            lookup = {sid: i for i, sid in enumerate(scene_order)}
            try:
                rows = torch.tensor([lookup[sid] for sid in scene_ids], dtype=torch.long)
            except KeyError as err:
                raise ValueError(f"embedding references unknown scene id {err.args[0]!r}") from None
            return self.scene_offsets(noise)[rows]
        tokens = self.tokenizer(noise)
        aligned = emb_align(embeddings, scene_ids, scene_order)
        refined = self.denoiser(aligned, tokens)
        out = AlignedBatch(data=refined, mask=aligned.mask,
                           scene_slot=aligned.scene_slot, group_slot=aligned.group_slot)
        return emb_de_align(out)


def fmn_apply(embedding, offset):
    """Add the correction offset to the embedding."""
    if embedding.shape != offset.shape:
        raise ValueError(
            f"embedding/offset shape mismatch: {tuple(embedding.shape)} vs {tuple(offset.shape)}")
    return embedding + offset
