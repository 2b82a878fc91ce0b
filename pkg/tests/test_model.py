import json

import numpy as np
import pytest
import torch

from scenereid import data
from scenereid.config import benchmark_config, default_config, miniature_config, to_dict
from scenereid.gradcheck import check_gradients, module_leaves
from scenereid.model import ToyBackbone, build_model, image_tensor, normalized_boxes
from scenereid.train import (DivergenceError, Trainer, checkpoint_load,
                             checkpoint_save, extract_representations, lr_factor)


def gen(seed=0):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def tiny_dataset(seed=0, scenes=4, eval_scenes=2):
    cfg = miniature_config(seed)
    cfg.data.num_scenes = scenes
    cfg.data.eval_scenes = eval_scenes
    return cfg, data.generate_dataset(cfg)


# ---------------------------------------------------------------- backbone

def test_backbone_stride_arithmetic():
    net = ToyBackbone((4, 8, 8, 8))
    net.eval()
    out = net(torch.randn(1, 3, 64, 64, generator=gen(1)))
    assert out.shape == (1, 8, 4, 4)


def test_backbone_rejects_indivisible():
    net = ToyBackbone((4, 4, 4, 4))
    with pytest.raises(ValueError, match="stride"):
        net(torch.randn(1, 3, 60, 64, generator=gen(2)))


def test_backbone_eval_deterministic():
    net = ToyBackbone((4, 4, 4, 4))
    net.eval()
    x = torch.randn(2, 3, 32, 32, generator=gen(3))
    assert torch.equal(net(x), net(x.clone()))


def test_backbone_gradcheck():
    torch.set_default_dtype(torch.float64)
    try:
        net = ToyBackbone((2, 2, 2, 2))
        net.train()
        g = gen(4)
        x = torch.randn(2, 3, 16, 16, generator=g, requires_grad=True)
        proj = torch.randn(2, 2, 1, 1, generator=g)
        fn = lambda: (net(x) * proj).sum()
        check_gradients(fn, [("x", x)] + module_leaves(net), max_coords_per_leaf=12,
                        generator=g)
    finally:
        torch.set_default_dtype(torch.float32)


# ---------------------------------------------------------------- forward head

def test_forward_head_unit_final_representations():
    cfg, splits = tiny_dataset(0)
    model = build_model(cfg, gen(5))
    model.eval()
    samples = splits["train"][:2]
    images = torch.stack([image_tensor(s) for s in samples])
    boxes = [normalized_boxes(s) for s in samples]
    out = model.forward_head(images, boxes)
    norms = out["final"].norm(dim=1)
    assert torch.all((norms - 1.0).abs() < 1e-6)
    assert out["final"].shape[1] == cfg.embedding_dim


def test_forward_head_fmn_off_is_normalized_raw():
    cfg, splits = tiny_dataset(1)
    cfg.model.fmn = "off"
    model = build_model(cfg, gen(6))
    model.eval()
    s = splits["train"][0]
    out = model.forward_head(image_tensor(s).unsqueeze(0), [normalized_boxes(s)])
    expect = torch.nn.functional.normalize(out["raw"], dim=1, eps=1e-12)
    assert torch.equal(out["final"], expect)


def test_forward_head_bnr_labels_persons_and_background():
    cfg, splits = tiny_dataset(2)
    model = build_model(cfg, gen(7))
    model.train()
    samples = splits["train"][:2]
    images = torch.stack([image_tensor(s) for s in samples])
    person = [normalized_boxes(s, (data.PERSON,)) for s in samples]
    bg = [normalized_boxes(s, (data.BACKGROUND,)) for s in samples]
    out = model.forward_head(images, person, bg)
    n_person = sum(len(b) for b in person)
    n_bg = sum(len(b) for b in bg)
    assert out["q"].shape == (n_person + n_bg,)
    assert out["q_labels"].sum().item() == n_person
    assert torch.all((out["q"] > 0) & (out["q"] < 1))


def test_default_config_dims():
    cfg = default_config()
    assert cfg.embedding_dim == 1024
    assert cfg.paper.oim_temperature == pytest.approx(1.0 / 30.0)
    assert cfg.paper.drop_path == 0.1
    assert cfg.paper.oim_momentum == 0.5
    single = default_config()
    single.model.mge_levels = "12x6"
    assert single.embedding_dim == 512


def test_single_level_model_width():
    cfg, splits = tiny_dataset(3)
    cfg.model.mge_levels = "12x6"
    cfg.validate()
    model = build_model(cfg, gen(8))
    model.eval()
    s = splits["train"][0]
    out = model.forward_head(image_tensor(s).unsqueeze(0), [normalized_boxes(s)])
    assert out["final"].shape[1] == cfg.paper.embedding_dim // 2


# ---------------------------------------------------------------- training

def test_trainer_runs_and_logs(tmp_path):
    cfg, splits = tiny_dataset(4, scenes=4)
    cfg.paper.epochs = 2
    trainer = Trainer(cfg, splits["train"])
    log = tmp_path / "metrics.jsonl"
    metrics = trainer.fit(log_path=log)
    assert len(metrics) == 2
    lines = log.read_text().strip().splitlines()
    assert len(lines) == 2
    rec = json.loads(lines[0])
    assert {"epoch", "loss", "bnr", "oim", "triplet", "lr"} <= set(rec)


def test_training_deterministic_across_runs():
    cfg, splits = tiny_dataset(5, scenes=4)
    cfg.paper.epochs = 2
    m1 = Trainer(cfg, splits["train"]).fit()
    m2 = Trainer(cfg, splits["train"]).fit()
    assert m1 == m2


def test_lr_schedule_shape():
    cfg = benchmark_config()
    cfg.paper.warmup_epochs = 1
    cfg.paper.decay_epochs = (3, 5)
    cfg.paper.decay_factor = 0.1
    iters = 10
    assert lr_factor(0, iters, cfg.paper) == pytest.approx(0.1)
    assert lr_factor(9, iters, cfg.paper) == pytest.approx(1.0)   # warmup end
    assert lr_factor(15, iters, cfg.paper) == pytest.approx(1.0)  # epoch 1
    assert lr_factor(30, iters, cfg.paper) == pytest.approx(0.1)  # first decay
    assert lr_factor(55, iters, cfg.paper) == pytest.approx(0.01)


def test_divergence_aborts():
    cfg, splits = tiny_dataset(6, scenes=2)
    trainer = Trainer(cfg, splits["train"])
    with torch.no_grad():
        for p in trainer.model.parameters():
            p.fill_(float("nan"))
    with pytest.raises(DivergenceError):
        trainer.train_epoch(1)


# ---------------------------------------------------------------- checkpointing

def test_checkpoint_roundtrip_bitwise(tmp_path):
    cfg, splits = tiny_dataset(7, scenes=4)
    cfg.paper.epochs = 1
    trainer = Trainer(cfg, splits["train"])
    trainer.fit()
    path = tmp_path / "model.ckpt"
    checkpoint_save(path, trainer.model, cfg, trainer.optimizer)
    loaded, loaded_cfg = checkpoint_load(path)
    assert to_dict(loaded_cfg) == to_dict(cfg)
    probe = splits["eval"]
    a = extract_representations(trainer.model, probe, 2)
    b = extract_representations(loaded, probe, 2)
    assert np.array_equal(a["features"], b["features"])  # bitwise
    assert np.array_equal(a["identities"], b["identities"])


def test_checkpoint_corrupted_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="unreadable|format"):
        checkpoint_load(path)


def test_checkpoint_config_mismatch_refused(tmp_path):
    cfg, splits = tiny_dataset(8, scenes=2)
    model = build_model(cfg, gen(9))
    path = tmp_path / "m.ckpt"
    checkpoint_save(path, model, cfg)
    other = miniature_config(9)
    other.data.num_scenes = 2
    other.model.fmn = "off"
    with pytest.raises(ValueError, match="different config"):
        checkpoint_load(path, expect_config=other)


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        checkpoint_load(tmp_path / "nope.ckpt")
