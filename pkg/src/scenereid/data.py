"""Synthetic scene benchmark: part-colored person sprites composited onto
textured backgrounds, with per-camera tint/brightness transforms.

Background clutter leaks into every detection box (background noise); the
scene-wide tint distorts the person pixels themselves (foreground noise).
Identities share part colors, so telling them apart requires part-level cues.
Everything is deterministic given the config seed.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

PERSON = "person"
BACKGROUND = "background"

PALETTE = np.array([
    [0.85, 0.10, 0.10],  # red
    [0.10, 0.70, 0.15],  # green
    [0.15, 0.20, 0.85],  # blue
    [0.90, 0.85, 0.10],  # yellow
    [0.80, 0.15, 0.80],  # magenta
    [0.10, 0.78, 0.78],  # cyan
    [0.95, 0.55, 0.05],  # orange
    [0.92, 0.92, 0.92],  # white
])


@dataclass
class BoxAnnotation:
    xyxy: tuple[int, int, int, int]
    kind: str                      # person | background
    identity: int | None           # None for background boxes and unlabeled persons


@dataclass
class SceneSample:
    scene_id: int
    camera_id: int
    image: np.ndarray              # (H, W, 3) uint8
    boxes: list[BoxAnnotation] = field(default_factory=list)
    transform: dict = field(default_factory=dict)


def box_iou(a, b):
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    ix = max(0, min(ax1, bx1) - max(ax0, bx0))
    iy = max(0, min(ay1, by1) - max(ay0, by0))
    inter = ix * iy
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def identity_registry(num_identities, rng):
    """Distinct (head, torso, legs, stripe color, stripe position) tuples.

    Colors come from a small palette so identities collide on single parts;
    only the combination across parts is unique.
    """
    seen = set()
    specs = []
    while len(specs) < num_identities:
        spec = (int(rng.integers(len(PALETTE))), int(rng.integers(len(PALETTE))),
                int(rng.integers(len(PALETTE))), int(rng.integers(len(PALETTE))),
                int(rng.integers(3)))
        if spec[0] == spec[1] or spec in seen:
            continue
        seen.add(spec)
        specs.append(spec)
    return specs


def render_sprite(spec, height, width):
    """Rasterize one identity: colored head/torso/legs plus a torso stripe.

    Returns (rgb float image, silhouette mask); background shows through
    outside the silhouette.
    """
    head_c, torso_c, legs_c, stripe_c, stripe_pos = spec
    img = np.zeros((height, width, 3), dtype=np.float64)
    mask = np.zeros((height, width), dtype=bool)
    h0, h1 = 0, int(height * 0.22)
    t0, t1 = h1, int(height * 0.60)
    l0, l1 = t1, height
    # head: centered, half width
    cw0, cw1 = width // 4, width - width // 4
    img[h0:h1, cw0:cw1] = PALETTE[head_c]
    mask[h0:h1, cw0:cw1] = True
    # torso: full width minus a sliver
    img[t0:t1, 1:width - 1] = PALETTE[torso_c]
    mask[t0:t1, 1:width - 1] = True
    # stripe across the torso at one of three heights
    span = t1 - t0
    s0 = t0 + int(span * (0.15 + 0.3 * stripe_pos))
    s1 = min(s0 + max(span // 6, 1), t1)
    img[s0:s1, 1:width - 1] = PALETTE[stripe_c]
    # legs: two columns with a gap
    gap0, gap1 = int(width * 0.42), int(width * 0.58)
    img[l0:l1, 1:gap0] = PALETTE[legs_c]
    img[l0:l1, gap1:width - 1] = PALETTE[legs_c]
    mask[l0:l1, 1:gap0] = True
    mask[l0:l1, gap1:width - 1] = True
    return img, mask


def camera_profile(camera_id, num_cameras, tint_strength):
    """Per-camera scene transform base: color rotation axis/angle, channel
    gains and a brightness bias."""
    theta = 2.0 * math.pi * camera_id / num_cameras
    tint_dir = np.array([math.cos(theta),
                         math.cos(theta + 2.0 * math.pi / 3.0),
                         math.cos(theta + 4.0 * math.pi / 3.0)])
    axis = np.array([math.cos(theta) + 0.6, math.sin(theta) + 0.6, 1.0])
    return {
        "tint": 1.0 + 0.30 * tint_strength * tint_dir,
        "brightness": 0.10 * tint_strength * math.sin(theta),
        "rot_axis": axis / np.linalg.norm(axis),
        "rot_angle": 0.55 * tint_strength * math.sin(theta + 0.7),
        "bg_base": 0.40 + 0.12 * np.roll(tint_dir, 1),
    }


def rotation_matrix(axis, angle):
    """Rodrigues rotation in RGB color space."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0.0, -axis[2], axis[1]],
                  [axis[2], 0.0, -axis[0]],
                  [-axis[1], axis[0], 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def _textured_background(rng, h, w, base, strength):
    blocks = rng.normal(0.0, 1.0, (h // 16, w // 16, 3))
    low = np.kron(blocks, np.ones((16, 16, 1)))
    speckle = rng.normal(0.0, 1.0, (h, w, 3))
    return np.clip(base + 0.14 * strength * low + 0.06 * strength * speckle, 0.0, 1.0)


def _scatter_clutter(rng, img, strength, sprite_h, sprite_w):
    """Saturated distractor blobs drawn from the sprite palette.

    They share colors with person parts, so pooled box features pick them up
    unless the encoder learns to gate them out."""
    h, w = img.shape[:2]
    count = int(round(strength * h * w / 2500.0))
    for _ in range(count):
        bh = int(rng.integers(sprite_h // 5, max(sprite_h // 2, sprite_h // 5 + 1)))
        bw = int(rng.integers(sprite_w // 3, max(sprite_w, sprite_w // 3 + 1)))
        y0 = int(rng.integers(0, max(h - bh, 1)))
        x0 = int(rng.integers(0, max(w - bw, 1)))
        color = PALETTE[int(rng.integers(len(PALETTE)))]
        img[y0:y0 + bh, x0:x0 + bw] = 0.85 * color + 0.15 * img[y0:y0 + bh, x0:x0 + bw]
    return img


def _sample_background_boxes(rng, person_boxes, n, h, w, bh, bw, max_tries=60):
    out = []
    for _ in range(n):
        for _ in range(max_tries):
            x0 = int(rng.integers(0, max(w - bw, 1)))
            y0 = int(rng.integers(0, max(h - bh, 1)))
            cand = (x0, y0, x0 + bw, y0 + bh)
            if all(box_iou(cand, p) < 0.3 for p in person_boxes):
                out.append(cand)
                break
    return out


class SceneGenerator:
    def __init__(self, data_cfg, seed):
        self.cfg = data_cfg
        self.rng = np.random.default_rng(seed)
        self.registry = identity_registry(data_cfg.num_identities, self.rng)
        n_unlabeled = max(1, round(data_cfg.unlabeled_fraction * data_cfg.num_identities)) \
            if data_cfg.unlabeled_fraction > 0 else 0
        self.unlabeled_registry = identity_registry(n_unlabeled, self.rng) if n_unlabeled else []
        self.cameras = [camera_profile(c, data_cfg.num_cameras, data_cfg.tint_strength)
                        for c in range(data_cfg.num_cameras)]
        self._next_scene_id = 0

    def _placement_plan(self, num_scenes):
        """Assign identities to scenes so every identity lands in at least two
        distinct cameras, then fill remaining slots randomly."""
        cfg = self.cfg
        cameras = [int(self.rng.integers(cfg.num_cameras)) for _ in range(num_scenes)]
        capacity = [int(self.rng.integers(cfg.min_persons, cfg.max_persons + 1))
                    for _ in range(num_scenes)]
        slots = [[] for _ in range(num_scenes)]
        order = list(np.argsort(cameras, kind="stable"))
        cursor = 0
        for identity in range(cfg.num_identities):
            placed_cams = set()
            tries = 0
            while len(placed_cams) < 2 and tries < 4 * num_scenes:
                s = order[cursor % num_scenes]
                cursor += 1
                tries += 1
                if cameras[s] in placed_cams or identity in slots[s]:
                    continue
                slots[s].append(identity)
                placed_cams.add(cameras[s])
        for s in range(num_scenes):
            while len(slots[s]) < capacity[s]:
                if self.unlabeled_registry and self.rng.random() < self.cfg.unlabeled_fraction:
                    slots[s].append(-1 - int(self.rng.integers(len(self.unlabeled_registry))))
                else:
                    pick = int(self.rng.integers(self.cfg.num_identities))
                    if pick in slots[s]:
                        continue
                    slots[s].append(pick)
            self.rng.shuffle(slots[s])
        return cameras, slots

    def _render_scene(self, camera_id, occupant_ids):
        cfg = self.cfg
        h, w = cfg.image_height, cfg.image_width
        sh, sw = cfg.sprite_height, cfg.sprite_width
        if sh > h or sw > w:
            raise ValueError(f"sprite {sh}x{sw} larger than scene {h}x{w}")
        cam = self.cameras[camera_id]
        bg_base = np.clip(cam["bg_base"] + self.rng.normal(0.0, 0.04, 3), 0.05, 0.95)
        img = _textured_background(self.rng, h, w, bg_base, cfg.texture_strength)
        img = _scatter_clutter(self.rng, img, cfg.texture_strength, sh, sw)
        person_boxes, identities = [], []
        for occupant in occupant_ids:
            spec = (self.registry[occupant] if occupant >= 0
                    else self.unlabeled_registry[-occupant - 1])
            sprite, mask = render_sprite(spec, sh, sw)
            for _ in range(40):
                x0 = int(self.rng.integers(0, w - sw + 1))
                y0 = int(self.rng.integers(0, h - sh + 1))
                tight = (x0, y0, x0 + sw, y0 + sh)
                if all(box_iou(tight, p) < 0.15 for p in person_boxes):
                    break
            else:
                continue
            img[y0:y0 + sh, x0:x0 + sw][mask] = sprite[mask]
            person_boxes.append(tight)
            identities.append(occupant if occupant >= 0 else None)
        # scene transform: camera color rotation + channel gains + brightness,
        # jittered per scene and applied to the whole composited image
        tint = cam["tint"] + self.rng.normal(0.0, 0.05 * cfg.tint_strength, 3)
        brightness = cam["brightness"] + self.rng.normal(0.0, 0.04 * cfg.tint_strength)
        angle = cam["rot_angle"] + self.rng.normal(0.0, 0.08 * cfg.tint_strength)
        rot = rotation_matrix(cam["rot_axis"], angle)
        img = np.clip((img @ rot.T) * tint + brightness, 0.0, 1.0)

        m = cfg.box_margin
        boxes = []
        for tight, identity in zip(person_boxes, identities):
            x0, y0, x1, y1 = tight
            grown = (max(0, x0 - m), max(0, y0 - m), min(w, x1 + m), min(h, y1 + m))
            boxes.append(BoxAnnotation(xyxy=grown, kind=PERSON, identity=identity))
        bg = _sample_background_boxes(self.rng, [b.xyxy for b in boxes], len(boxes),
                                      h, w, sh + 2 * m, sw + 2 * m)
        boxes.extend(BoxAnnotation(xyxy=b, kind=BACKGROUND, identity=None) for b in bg)
        sample = SceneSample(
            scene_id=self._next_scene_id,
            camera_id=camera_id,
            image=(img * 255.0).round().astype(np.uint8),
            boxes=boxes,
            transform={"tint": [float(v) for v in tint],
                       "brightness": float(brightness),
                       "color_rotation": float(angle),
                       "bg_base": [float(v) for v in bg_base]},
        )
        self._next_scene_id += 1
        return sample

    def split(self, num_scenes):
        cameras, slots = self._placement_plan(num_scenes)
        return [self._render_scene(cameras[s], slots[s]) for s in range(num_scenes)]


def generate_dataset(cfg, seed=None):
    """Render the train and eval splits; deterministic given (config, seed)."""
    seed = cfg.seed if seed is None else seed
    g = SceneGenerator(cfg.data, seed)
    return {"train": g.split(cfg.data.num_scenes), "eval": g.split(cfg.data.eval_scenes)}


def save_dataset(splits, out_dir):
    out_dir = Path(out_dir)
    for split, samples in splits.items():
        split_dir = out_dir / split
        split_dir.mkdir(parents=True, exist_ok=True)
        with open(split_dir / "annotations.jsonl", "w") as fh:
            for s in samples:
                name = f"scene_{s.scene_id:05d}.png"
                Image.fromarray(s.image).save(split_dir / name)
                record = {
                    "scene": s.scene_id,
                    "camera": s.camera_id,
                    "image": name,
                    "transform": s.transform,
                    "boxes": [{"xyxy": list(b.xyxy), "kind": b.kind, "identity": b.identity}
                              for b in s.boxes],
                }
                fh.write(json.dumps(record) + "\n")


def load_split(split_dir):
    split_dir = Path(split_dir)
    ann = split_dir / "annotations.jsonl"
    if not ann.exists():
        raise FileNotFoundError(f"no annotations.jsonl under {split_dir}")
    samples = []
    with open(ann) as fh:
        for line in fh:
            rec = json.loads(line)
            image = np.asarray(Image.open(split_dir / rec["image"]).convert("RGB"))
            boxes = [BoxAnnotation(xyxy=tuple(b["xyxy"]), kind=b["kind"], identity=b["identity"])
                     for b in rec["boxes"]]
            samples.append(SceneSample(scene_id=rec["scene"], camera_id=rec["camera"],
                                       image=image, boxes=boxes, transform=rec["transform"]))
    return samples
