"""Training loop: norm supervision plus instance matching, warmup/step-decay
schedule, line-delimited metrics log and bit-exact checkpointing."""
from __future__ import annotations

import json
from pathlib import Path

import torch

from . import data as data_mod
from .bmn import bnr_loss
from .config import CONFIG_VERSION, Config, from_dict, to_dict
from .model import build_model, image_tensor, normalized_boxes
from .oim import UNLABELED, boim_loss

CHECKPOINT_FORMAT = 1


class DivergenceError(RuntimeError):
    """Raised when the loss turns non-finite."""


def scene_labels(sample):
    """Person-box labels for one scene: identity index, or UNLABELED."""
    return [b.identity if b.identity is not None else UNLABELED
            for b in sample.boxes if b.kind == data_mod.PERSON]


def lr_factor(step, iters_per_epoch, paper_cfg):
    """Linear warmup across the first epoch(s), stepwise decay afterwards."""
    warm_iters = paper_cfg.warmup_epochs * iters_per_epoch
    if warm_iters and step < warm_iters:
        return (step + 1) / warm_iters
    epoch = step // iters_per_epoch
    drops = sum(1 for e in paper_cfg.decay_epochs if epoch >= e)
    return paper_cfg.decay_factor ** drops


class Trainer:
    def __init__(self, cfg: Config, train_samples):
        cfg.validate()
        self.cfg = cfg
        self.samples = list(train_samples)
        if not self.samples:
            raise ValueError("empty training split")
        self.gen_init = torch.Generator().manual_seed(cfg.seed)
        self.gen_order = torch.Generator().manual_seed(cfg.seed + 1)
        self.gen_sample = torch.Generator().manual_seed(cfg.seed + 2)
        self.model = build_model(cfg, generator=self.gen_init)
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=cfg.paper.learning_rate)
        self._iters_per_epoch = max(1, (len(self.samples) + cfg.paper.batch_scenes - 1)
                                    // cfg.paper.batch_scenes)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(
            self.optimizer,
            lambda step: lr_factor(step, self._iters_per_epoch, cfg.paper))
        self.metrics = []
        self._tensors = [image_tensor(s) for s in self.samples]
        self._person_boxes = [normalized_boxes(s, (data_mod.PERSON,)) for s in self.samples]
        self._bg_boxes = [normalized_boxes(s, (data_mod.BACKGROUND,)) for s in self.samples]
        self._labels = [scene_labels(s) for s in self.samples]

    def _train_batch(self, idx):
        cfg = self.cfg
        images = torch.stack([self._tensors[i] for i in idx])
        person_boxes = [self._person_boxes[i] for i in idx]
        bg_boxes = [self._bg_boxes[i] for i in idx]
        labels = torch.tensor([l for i in idx for l in self._labels[i]], dtype=torch.long)
        out = self.model.forward_head(images, person_boxes, bg_boxes)
        zero = images.sum() * 0.0
        term_bnr = bnr_loss(out["q"], out["q_labels"]) if "q" in out and out["q"].numel() else zero
        if out["final"].shape[0]:
            parts = boim_loss(out["final"], labels, self.model.oim,
                              margin=cfg.paper.triplet_margin,
                              num_pos=cfg.loss.triplet_p, num_neg=cfg.loss.triplet_n,
                              generator=self.gen_sample)
        else:
            parts = {"oim": zero, "triplet": zero}
        total = (cfg.loss.weight_bnr * term_bnr
                 + cfg.loss.weight_oim * parts["oim"]
                 + cfg.loss.weight_triplet * parts["triplet"])
        if not torch.isfinite(total):
            raise DivergenceError("non-finite training loss; aborting")
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.scheduler.step()
        if out["final"].shape[0]:
            self.model.oim.update(out["final"].detach(), labels)
        return {"loss": float(total.detach()), "bnr": float(term_bnr.detach()),
                "oim": float(parts["oim"].detach()), "triplet": float(parts["triplet"].detach())}

    def train_epoch(self, epoch):
        self.model.train()
        order = torch.randperm(len(self.samples), generator=self.gen_order).tolist()
        bs = self.cfg.paper.batch_scenes
        sums, count = {}, 0
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            stats = self._train_batch(idx)
            count += 1
            for k, v in stats.items():
                sums[k] = sums.get(k, 0.0) + v
        record = {"epoch": epoch, "lr": self.optimizer.param_groups[0]["lr"]}
        record.update({k: v / count for k, v in sums.items()})
        self.metrics.append(record)
        return record

    def fit(self, log_path=None, progress=None):
        log_fh = open(log_path, "w") if log_path else None
        try:
            for epoch in range(1, self.cfg.paper.epochs + 1):
                record = self.train_epoch(epoch)
                if log_fh:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                if progress:
                    progress(record)
        finally:
            if log_fh:
                log_fh.close()
        return self.metrics


def checkpoint_save(path, model, cfg, optimizer=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": to_dict(cfg),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "seed": cfg.seed,
    }
    torch.save(payload, path)


def checkpoint_load(path, expect_config: Config | None = None):
    """Rebuild the model from a checkpoint; refuses version/config mismatches."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as err:
        raise ValueError(f"unreadable checkpoint {path}: {err}") from err
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"checkpoint {path} has unsupported format "
                         f"{payload.get('format') if isinstance(payload, dict) else type(payload)}")
    cfg = from_dict(payload["config"])
    if cfg.version != CONFIG_VERSION:
        raise ValueError("checkpoint config version mismatch")
    if expect_config is not None and to_dict(expect_config) != payload["config"]:
        raise ValueError("checkpoint was trained under a different config; refusing to load")
    model = build_model(cfg)
    try:
        model.load_state_dict(payload["model"], strict=True)
    except RuntimeError as err:
        raise ValueError(f"checkpoint parameters incompatible with config: {err}") from err
    model.eval()
    return model, cfg


def train_from_config(cfg, train_samples, log_path=None, ckpt_path=None, progress=None):
    trainer = Trainer(cfg, train_samples)
    trainer.fit(log_path=log_path, progress=progress)
    if ckpt_path:
        checkpoint_save(ckpt_path, trainer.model, cfg, trainer.optimizer)
    return trainer


@torch.no_grad()
def extract_representations(model, samples, batch_scenes=8):
    """Eval-mode unit representations for the labeled person boxes.

    Returns dict of numpy arrays: features (N,D), identities, scene_ids,
    camera_ids.
    """
    import numpy as np

    model.eval()
    feats, ids, scenes, cams = [], [], [], []
    for start in range(0, len(samples), batch_scenes):
        chunk = samples[start:start + batch_scenes]
        images = torch.stack([image_tensor(s) for s in chunk])
        boxes, meta = [], []
        for s in chunk:
            keep = [b for b in s.boxes if b.kind == data_mod.PERSON and b.identity is not None]
            h, w = s.image.shape[0], s.image.shape[1]
            boxes.append([(b.xyxy[0] / w, b.xyxy[1] / h, b.xyxy[2] / w, b.xyxy[3] / h)
                          for b in keep])
            meta.extend((b.identity, s.scene_id, s.camera_id) for b in keep)
        out = model.forward_head(images, boxes)
        feats.append(out["final"].numpy())
        for identity, scene_id, camera_id in meta:
            ids.append(identity)
            scenes.append(scene_id)
            cams.append(camera_id)
    features = np.concatenate(feats, axis=0) if feats else np.zeros((0, model.embedding_dim))
    return {
        "features": features.astype(np.float64),
        "identities": np.array(ids, dtype=np.int64),
        "scene_ids": np.array(scenes, dtype=np.int64),
        "camera_ids": np.array(cams, dtype=np.int64),
    }
