"""End-to-end search head: toy backbone, oracle-box pooling, background and
foreground modulation, and the instance-matching state."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .bmn import BackgroundModulation, NormGate, TwoLevelGfe
from .fmn import ForegroundModulation, MaskedBatchNorm1d, NoiseTokenizer, fmn_apply
from .oim import OimState
from .primitives import BatchNorm2d, DropPath, roi_align_multi

BACKBONE_STRIDE = 16
PERSON_GRID = (24, 12)


class ToyBackbone(nn.Module):
    """Four stride-2 conv stages (total stride 16) producing the scene map."""

    def __init__(self, stage_channels=(16, 32, 48, 64), in_channels=3):
        super().__init__()
        if len(stage_channels) != 4:
            raise ValueError("backbone expects 4 stage widths")
        chans = [in_channels, *stage_channels]
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1, bias=False)
            for i in range(4))
        self.bns = nn.ModuleList(BatchNorm2d(c) for c in stage_channels)
        self.out_channels = stage_channels[-1]

    def forward(self, images):
        if images.dim() != 4:
            raise ValueError(f"backbone expects (B,3,H,W), got {tuple(images.shape)}")
        h, w = images.shape[2], images.shape[3]
        if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise ValueError(f"image dims {h}x{w} not divisible by the total stride {BACKBONE_STRIDE}")
        x = images
        for conv, bn in zip(self.convs, self.bns):
            x = torch.relu(bn(conv(x)))
        return x


class SearchModel(nn.Module):
    """Config-driven assembly of the full person representation path."""

    def __init__(self, cfg, generator=None):
        super().__init__()
        self.embedding_dim = cfg.embedding_dim
        self.backbone = ToyBackbone(tuple(cfg.model.backbone_channels))
        c = self.backbone.out_channels
        if cfg.model.embedding == "mge":
            self.embed = BackgroundModulation(
                c, self.embedding_dim, levels=cfg.model.mge_levels,
                drop_path=cfg.paper.drop_path, cbam_reduction=cfg.model.cbam_reduction,
                generator=generator)
        else:
            self.embed = TwoLevelGfe(c, self.embedding_dim)
        self.norm_gate = NormGate(use_bn=(cfg.model.bnr == "on")) if cfg.model.bnr != "off" else None
        if cfg.model.fmn == "off":
            self.fmn = None
        else:
            self.fmn = ForegroundModulation(
                c, self.embedding_dim, mode=cfg.model.fmn,
                mid_channels=tuple(cfg.model.extractor_channels),
                heads=cfg.model.attention_heads, ffn_hidden=cfg.model.ffn_hidden)
        self.oim = OimState(cfg.data.num_identities, self.embedding_dim,
                            queue_size=cfg.loss.cq_size,
                            temperature=cfg.paper.oim_temperature,
                            momentum=cfg.paper.oim_momentum)

    def pool_boxes(self, scene_maps, boxes_per_scene):
        """RoI-align normalized boxes onto the person grid.

        Returns (person maps (N,C,24,12), scene index (N,)).
        """
        maps, scene_index = [], []
        for s, boxes in enumerate(boxes_per_scene):
            if not boxes:
                continue
            maps.append(roi_align_multi(scene_maps[s], boxes, PERSON_GRID))
            scene_index.extend([s] * len(boxes))
        if not maps:
            c = scene_maps.shape[1]
            return scene_maps.new_zeros(0, c, *PERSON_GRID), torch.zeros(0, dtype=torch.long)
        return torch.cat(maps), torch.tensor(scene_index, dtype=torch.long)

    def forward_head(self, images, person_boxes, background_boxes=None):
        """Full representation path for one batch of scenes.

        person_boxes / background_boxes: one list of normalized xyxy boxes per
        scene.  Returns a dict with raw embeddings, the mapped norms q (when
        norm supervision is configured) and the final unit representations.
        """
        scene_maps = self.backbone(images)
        pmaps, scene_index = self.pool_boxes(scene_maps, person_boxes)
        out = {"scene_index": scene_index}
        want_bg = background_boxes is not None and self.norm_gate is not None
        if want_bg:
            bmaps, _ = self.pool_boxes(scene_maps, background_boxes)
            allmaps = torch.cat([pmaps, bmaps]) if bmaps.shape[0] else pmaps
        else:
            bmaps = None
            allmaps = pmaps
        emb = self.embed(allmaps) if allmaps.shape[0] else allmaps.new_zeros(0, self.embedding_dim)
        raw = emb[:pmaps.shape[0]]
        out["raw"] = raw
        if want_bg:
            bg_raw = emb[pmaps.shape[0]:]
            out["background_raw"] = bg_raw
            out["q"] = self.norm_gate(emb)
            out["q_labels"] = torch.cat([torch.ones(raw.shape[0]), torch.zeros(bg_raw.shape[0])])
        if self.fmn is not None and raw.shape[0]:
            offsets = self.fmn(scene_maps, raw, scene_index.tolist())
            modulated = fmn_apply(raw, offsets)
        else:
            modulated = raw
        out["final"] = F.normalize(modulated, dim=1, eps=1e-12)
        return out


def normalized_boxes(sample, kinds=("person",)):
    """Pixel xyxy annotations of the given kinds as normalized coordinates."""
    h, w = sample.image.shape[0], sample.image.shape[1]
    out = []
    for b in sample.boxes:
        if b.kind in kinds:
            x0, y0, x1, y1 = b.xyxy
            out.append((x0 / w, y0 / h, x1 / w, y1 / h))
    return out


def image_tensor(sample, dtype=torch.float32):
    """HWC uint8 image to a centered CHW float tensor."""
    arr = torch.from_numpy(sample.image.copy()).to(dtype) / 255.0
    return arr.permute(2, 0, 1) - 0.5


@torch.no_grad()
def init_parameters(model, generator):
    """Deterministic re-initialization driven by an explicit generator.

    Follows the stock fan-in uniform scheme for conv/linear weights so the
    only change from framework defaults is the RNG source.
    """
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            fan_in = module.weight.shape[1] * (
                module.weight.shape[2] * module.weight.shape[3]
                if module.weight.dim() == 4 else 1)
            bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
            module.weight.uniform_(-bound, bound, generator=generator)
            if module.bias is not None:
                module.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(module, (nn.BatchNorm1d, nn.BatchNorm2d, nn.LayerNorm)):
            if module.weight is not None:
                module.weight.fill_(1.0)
                module.bias.zero_()
            if hasattr(module, "running_mean") and module.running_mean is not None:
                module.running_mean.zero_()
                module.running_var.fill_(1.0)
                module.num_batches_tracked.zero_()
        elif isinstance(module, NoiseTokenizer):
            module.position.normal_(0.0, 0.02, generator=generator)
        elif isinstance(module, MaskedBatchNorm1d):
            module.weight.fill_(1.0)
            module.bias.zero_()
            module.running_mean.zero_()
            module.running_var.fill_(1.0)
    return model


def build_model(cfg, generator=None):
    model = SearchModel(cfg, generator=generator)
    if generator is not None:
        init_parameters(model, generator)
        for dp in [m for m in model.modules() if isinstance(m, DropPath)]:
            dp.generator = generator
    return model
