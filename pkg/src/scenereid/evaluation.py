"""Retrieval metrics and protocols: mAP/top-1 over per-query galleries,
gallery-size sweeps, cross-camera galleries and the ablation comparison."""
from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PROTOCOLS = ("standard", "sweep", "cross-camera")


@dataclass
class GalleryIndex:
    """Identity-labeled unit representations with scene/camera provenance."""

    features: np.ndarray      # (M, D) unit rows
    identities: np.ndarray    # (M,)
    scene_ids: np.ndarray     # (M,)
    camera_ids: np.ndarray    # (M,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        norms = np.linalg.norm(self.features, axis=1)
        if self.features.size and np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("gallery representations must be unit-norm")
        if not (len(self.features) == len(self.identities)
                == len(self.scene_ids) == len(self.camera_ids)):
            raise ValueError("index arrays must share their length")

    def __len__(self):
        return len(self.identities)

    @classmethod
    def from_representations(cls, reps):
        return cls(features=reps["features"], identities=reps["identities"],
                   scene_ids=reps["scene_ids"], camera_ids=reps["camera_ids"])


@dataclass
class RetrievalResult:
    protocol: str
    gallery_size: int
    per_query_ap: np.ndarray
    per_query_top1: np.ndarray
    num_zero_relevant: int = 0
    extras: dict = field(default_factory=dict)

    @property
    def mean_ap(self):
        return float(self.per_query_ap.mean()) if self.per_query_ap.size else 0.0

    @property
    def top1(self):
        return float(self.per_query_top1.mean()) if self.per_query_top1.size else 0.0


def rank_gallery(query, features):
    """Indices sorted by descending cosine similarity; ties keep entry order."""
    if len(features) == 0:
        raise ValueError("empty gallery")
    sims = features @ query
    return np.argsort(-sims, kind="stable")


def average_precision(relevance):
    """Mean of precision-at-rank over the relevant ranks; 0 if none relevant."""
    relevance = np.asarray(relevance, dtype=bool)
    if not relevance.any():
        return 0.0
    hits = np.cumsum(relevance)
    ranks = np.arange(1, len(relevance) + 1)
    return float((hits[relevance] / ranks[relevance]).mean())


def _query_gallery(index, qi, gallery_size, rng, cross_camera):
    if cross_camera:
        eligible = index.camera_ids != index.camera_ids[qi]
    else:
        eligible = index.scene_ids != index.scene_ids[qi]
    eligible = np.nonzero(eligible)[0]
    matches = eligible[index.identities[eligible] == index.identities[qi]]
    distractors = eligible[index.identities[eligible] != index.identities[qi]]
    room = max(gallery_size - len(matches), 0)
    if len(distractors) > room:
        pick = rng.choice(len(distractors), size=room, replace=False)
        distractors = distractors[np.sort(pick)]
    return np.concatenate([matches, distractors]), len(matches)


def evaluate_protocol(index, protocol="standard", gallery_size=50, seed=0):
    """Per-query sampled galleries holding every true match plus distractors.

    'cross-camera' restricts the gallery to other cameras; 'standard' only
    excludes the query's own scene.
    """
    if protocol not in ("standard", "cross-camera"):
        raise ValueError(f"protocol must be standard or cross-camera, got {protocol}")
    if len(index) == 0:
        raise ValueError("cannot evaluate an empty index")
    aps, top1s = [], []
    zero_relevant = 0
    rng = np.random.default_rng(seed)
    for qi in range(len(index)):
        gallery, n_matches = _query_gallery(index, qi, gallery_size, rng,
                                            cross_camera=(protocol == "cross-camera"))
        if n_matches == 0:
            zero_relevant += 1
            aps.append(0.0)
            top1s.append(0.0)
            continue
        order = rank_gallery(index.features[qi], index.features[gallery])
        flags = index.identities[gallery][order] == index.identities[qi]
        aps.append(average_precision(flags))
        top1s.append(1.0 if flags[0] else 0.0)
    if zero_relevant:
        warnings.warn(f"{zero_relevant} queries had no relevant gallery entry; scored as AP 0")
    return RetrievalResult(protocol=protocol, gallery_size=gallery_size,
                           per_query_ap=np.array(aps), per_query_top1=np.array(top1s),
                           num_zero_relevant=zero_relevant)


def evaluate_sweep(index, sizes, seed=0):
    """mAP/top-1 at increasing gallery sizes (more distractors per query)."""
    if not sizes:
        raise ValueError("sweep needs at least one gallery size")
    return [evaluate_protocol(index, "standard", gallery_size=s, seed=seed) for s in sizes]


def evaluate(index, protocol="standard", gallery_size=50, sweep_sizes=(), seed=0):
    if protocol == "sweep":
        return evaluate_sweep(index, tuple(sweep_sizes), seed=seed)
    return evaluate_protocol(index, protocol, gallery_size=gallery_size, seed=seed)


def cross_scene_cosine(reps):
    """Mean cosine similarity over same-identity pairs from different scenes."""
    feats = np.asarray(reps["features"], dtype=np.float64)
    ids = np.asarray(reps["identities"])
    scenes = np.asarray(reps["scene_ids"])
    sims = []
    for identity in np.unique(ids):
        idx = np.nonzero(ids == identity)[0]
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                if scenes[idx[a]] != scenes[idx[b]]:
                    sims.append(float(feats[idx[a]] @ feats[idx[b]]))
    if not sims:
        raise ValueError("no same-identity cross-scene pair available")
    return float(np.mean(sims))


ABLATION_VARIANTS = {
    "full": {},
    "gfe": {"embedding": "gfe"},
    "mge-12x6": {"mge_levels": "12x6"},
    "bnr-off": {"bnr": "off"},
    "bnr-no-bn": {"bnr": "no-bn"},
    "fmn-off": {"fmn": "off"},
    "fmn-linear": {"fmn": "linear"},
    "all-off": {"embedding": "gfe", "bnr": "off", "fmn": "off"},
}


def variant_config(cfg, name):
    """Derive an ablation config from a base one by flipping model switches."""
    if name not in ABLATION_VARIANTS:
        raise ValueError(f"unknown ablation variant {name!r}; known: {sorted(ABLATION_VARIANTS)}")
    out = copy.deepcopy(cfg)
    for key, value in ABLATION_VARIANTS[name].items():
        setattr(out.model, key, value)
    return out.validate()


def ablation_report(variant_names, base_cfg, splits, gallery_size=None, seed=None,
                    progress=None):
    """Train each variant on the shared dataset and evaluate under one
    protocol; rows carry mAP/top-1 plus deltas against the first row."""
    from .train import Trainer, extract_representations

    gallery_size = base_cfg.eval.gallery_size if gallery_size is None else gallery_size
    seed = base_cfg.seed if seed is None else seed
    rows = []
    for name in variant_names:
        cfg = variant_config(base_cfg, name)
        cfg.seed = seed
        trainer = Trainer(cfg, splits["train"])
        trainer.fit()
        reps = extract_representations(trainer.model, splits["eval"],
                                       cfg.paper.batch_scenes)
        index = GalleryIndex.from_representations(reps)
        result = evaluate_protocol(index, "standard", gallery_size=gallery_size, seed=seed)
        row = {
            "variant": name,
            "map": result.mean_ap,
            "top1": result.top1,
            "cross_scene_cosine": cross_scene_cosine(reps),
            "final_loss": trainer.metrics[-1]["loss"],
        }
        rows.append(row)
        if progress:
            progress(row)
    base = rows[0]
    for row in rows:
        row["d_map"] = row["map"] - base["map"]
        row["d_top1"] = row["top1"] - base["top1"]
    return rows


def format_ablation_table(rows):
    header = f"{'variant':<12} {'mAP':>8} {'top-1':>8} {'dmAP':>8} {'dtop-1':>8}"
    lines = [header, "-" * len(header)]
    for r in rows:
        lines.append(f"{r['variant']:<12} {r['map']:>8.4f} {r['top1']:>8.4f} "
                     f"{r['d_map']:>+8.4f} {r['d_top1']:>+8.4f}")
    return "\n".join(lines)


def write_ablation_outputs(rows, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    (out_dir / "ablation.txt").write_text(format_ablation_table(rows) + "\n")
