import dataclasses
import json
import math
import struct

import numpy as np
import pytest

import noise2norm.training as training
from noise2norm.errors import CheckpointError, ConfigError, InvalidArgumentError, InvalidStateError, ShapeError
from noise2norm.evaluation import infer_maps
from noise2norm.model import ModelConfig, ParameterSet, init_model
from noise2norm.tensor import Tensor
from noise2norm.training import (CHECKPOINT_MAGIC, AdamWState, EarlyStopping, TrainConfig, adamw_step,
                                 checkpoint_bytes, cosine_lr, derive_seed, load_checkpoint, save_checkpoint,
                                 split_train_val, train)
from noise2norm.msssim import LossConfig, SsimParams
from noise2norm.noise import NoiseConfig

TINY = ModelConfig(base_channels=4)


def scalar_params(value, grad):
    ps = ParameterSet()
    ps.add("w", Tensor(np.full((1, 1, 1, 1), value, dtype=np.float64)))
    ps["w"].grad = np.full((1, 1, 1, 1), grad, dtype=np.float64)
    return ps


# -------------------------------------------------------------------- AdamW

def test_adamw_first_step_closed_form(f64):
    ps = scalar_params(1.0, 1.0)
    cfg = TrainConfig(lr0=1e-3, betas=(0.5, 0.999), weight_decay=0.01)
    state = adamw_step(ps, AdamWState(), 1e-3, cfg)
    want = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8)) - 1e-3 * 0.01 * 1.0
    assert ps["w"].item() == pytest.approx(want, abs=1e-12)
    assert ps["w"].item() == pytest.approx(0.99899, abs=1e-8)
    assert state.step == 1


def test_adamw_zero_gradient_no_decay_is_null(f64):
    ps = scalar_params(0.7, 0.0)
    adamw_step(ps, AdamWState(), 1e-2, TrainConfig(weight_decay=0.0))
    assert ps["w"].item() == 0.7


def test_adamw_degenerate_betas_follow_closed_form_recurrence(f64):
    # with betas (0, 0) and no decay the update is g / (|g| + eps); on f(w) = a w^2 / 2
    # the iterate is w <- w - lr * a w / (|a w| + eps)
    a, lr, eps = 3.0, 0.05, 1e-8
    cfg = TrainConfig(lr0=lr, betas=(0.0, 0.0), weight_decay=0.0, eps=eps)
    ps, state, w = scalar_params(1.3, 0.0), AdamWState(), 1.3
    for _ in range(10):
        ps["w"].grad = a * ps["w"].data
        adamw_step(ps, state, lr, cfg)
        w = w - lr * (a * w) / (abs(a * w) + eps)
        assert abs(ps["w"].item() - w) < 1e-6


def test_adamw_is_deterministic(rng):
    grads = [rng.standard_normal((4, 3, 3, 3)).astype(np.float32) for _ in range(5)]
    results = []
    for _ in range(2):
        ps = ParameterSet()
        ps.add("w", Tensor(np.ones((4, 3, 3, 3), dtype=np.float32)))
        state = AdamWState()
        for g in grads:
            ps["w"].grad = g
            adamw_step(ps, state, 1e-3, TrainConfig())
        results.append(ps["w"].data.tobytes())
    assert results[0] == results[1]


def test_adamw_missing_gradient():
    ps = init_model(TINY, 0)
    with pytest.raises(InvalidStateError, match="enc.l0.shallow.weight"):
        adamw_step(ps, AdamWState(), 1e-3, TrainConfig())


def test_train_config_validation():
    for kwargs in ({"val_fraction": 0.0}, {"val_fraction": 1.0}, {"patience": 0}, {"eta_min": 1.0},
                   {"betas": (1.0, 0.9)}, {"batch_size": 0}):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(**kwargs)


# ------------------------------------------------------------------- schedule

def test_cosine_schedule_values():
    cfg = TrainConfig(lr0=1e-4, eta_min=1e-6, t_max=100)
    assert cosine_lr(0, cfg) == pytest.approx(1e-4)
    assert cosine_lr(50, cfg) == pytest.approx((1e-4 + 1e-6) / 2)
    assert cosine_lr(99.999, cfg) == pytest.approx(1e-6, rel=1e-3)
    assert cosine_lr(100, cfg) == pytest.approx(1e-4)  # warm restart
    lrs = [cosine_lr(e, cfg) for e in range(100)]
    assert all(b < a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(InvalidArgumentError):
        cosine_lr(-1, cfg)


def test_literal_learning_rate_gives_constant_schedule():
    cfg = TrainConfig(lr0=1e-6, eta_min=1e-6)
    assert {cosine_lr(e, cfg) for e in range(0, 200, 7)} == {1e-6}


# ----------------------------------------------------------------- splitting

def test_split_sizes_and_disjointness():
    items = list(range(10))
    tr, va = split_train_val(items, 0.2, seed=0)
    assert len(tr) == 8 and len(va) == 2
    assert sorted(tr + va) == items
    assert split_train_val(items, 0.2, seed=0) == (tr, va)
    assert any(split_train_val(items, 0.2, seed=s) != (tr, va) for s in range(1, 5))


def test_split_rejects_degenerate_inputs():
    with pytest.raises(ConfigError):
        split_train_val([], 0.2, 0)
    with pytest.raises(ConfigError, match="empty train"):
        split_train_val(["only"], 0.2, 0)


def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert len({derive_seed(0, k) for k in range(100)}) == 100
    assert 0 <= derive_seed(7) < 2 ** 63


# ------------------------------------------------------------ early stopping

@pytest.mark.parametrize("plateau_at", [0, 5, 17])
def test_early_stopping_halts_patience_epochs_after_plateau(plateau_at):
    stopper = EarlyStopping(patience=20)
    for epoch in range(200):
        loss = 1.0 / (1 + min(epoch, plateau_at))
        if stopper.step(epoch, loss):
            break
    assert epoch == plateau_at + 20
    assert stopper.best_epoch == plateau_at


def test_early_stopping_never_triggers_while_improving():
    stopper = EarlyStopping(patience=3)
    assert not any(stopper.step(e, 1.0 / (e + 1)) for e in range(500))


# ---------------------------------------------------------------- training

@pytest.fixture(scope="module")
def tiny_run():
    gen = np.random.default_rng(3)
    images = [Tensor(gen.uniform(0, 1, (1, 3, 16, 16)).astype(np.float32)) for _ in range(6)]
    cfg = TrainConfig(max_epochs=4, batch_size=2, image_size=16, lr0=1e-3)
    records = []
    ckpt = train(images, TINY, NoiseConfig(), SsimParams(), LossConfig(), cfg, on_epoch=records.append)
    return images, cfg, ckpt, records


def test_train_returns_best_validation_checkpoint(tiny_run):
    _, _, ckpt, records = tiny_run
    assert [r.epoch for r in records] == [0, 1, 2, 3]
    assert ckpt.meta["epochs_run"] == 4
    assert ckpt.meta["train_size"] == 4 and ckpt.meta["val_size"] == 2
    best = min(r.val_loss for r in records)
    assert ckpt.meta["best_val_loss"] == best
    assert all(ckpt.meta["best_val_loss"] <= r.val_loss for r in records)
    assert records[ckpt.meta["best_epoch"]].val_loss == best


def test_train_is_deterministic(tiny_run):
    images, cfg, ckpt, records = tiny_run
    again = train(images, TINY, NoiseConfig(), SsimParams(), LossConfig(), cfg)
    assert checkpoint_bytes(again) == checkpoint_bytes(ckpt)


def test_train_halts_at_max_epochs(tiny_run):
    images, cfg, _, _ = tiny_run
    short = dataclasses.replace(cfg, max_epochs=2)
    assert train(images, TINY, train_cfg=short).meta["epochs_run"] == 2


# -------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_bit_exact(tmp_path, tiny_run):
    _, _, ckpt, _ = tiny_run
    path = tmp_path / "m.n2n"
    save_checkpoint(ckpt, str(path))
    back = load_checkpoint(str(path))
    assert back.params.names() == ckpt.params.names()
    for name in ckpt.params:
        assert back.params[name].data.tobytes() == ckpt.params[name].data.tobytes()
    assert back.configs_dict() == ckpt.configs_dict()
    assert back.meta == ckpt.meta
    assert checkpoint_bytes(back) == path.read_bytes()
    assert path.read_bytes()[:8] == CHECKPOINT_MAGIC


def test_reloaded_checkpoint_reproduces_maps(tmp_path, tiny_run):
    images, _, ckpt, _ = tiny_run
    path = tmp_path / "m.n2n"
    save_checkpoint(ckpt, str(path))
    before, _ = infer_maps(ckpt, images[:3], [1, 2, 3])
    after, _ = infer_maps(load_checkpoint(str(path)), images[:3], [1, 2, 3])
    assert before.tobytes() == after.tobytes()


@pytest.mark.parametrize("cut", [4, 12, 40, -1])
def test_truncated_checkpoint_is_rejected(tmp_path, tiny_run, cut):
    _, _, ckpt, _ = tiny_run
    raw = checkpoint_bytes(ckpt)
    path = tmp_path / "bad.n2n"
    path.write_bytes(raw[:cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_corrupt_checkpoints_are_rejected(tmp_path, tiny_run):
    _, _, ckpt, _ = tiny_run
    raw = checkpoint_bytes(ckpt)
    bad_magic = tmp_path / "magic.n2n"
    bad_magic.write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(bad_magic))
    trailing = tmp_path / "long.n2n"
    trailing.write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(trailing))
    with pytest.raises(CheckpointError):
        load_checkpoint(str(tmp_path / "missing.n2n"))


def test_checkpoint_with_wrong_model_names_parameter(tmp_path, tiny_run):
    _, _, ckpt, _ = tiny_run
    path = tmp_path / "m.n2n"
    save_checkpoint(ckpt, str(path))
    with pytest.raises(ShapeError, match="enc.l0.shallow.weight"):
        load_checkpoint(str(path), expected_model=ModelConfig(base_channels=8))


def test_checkpoint_save_is_atomic_on_failure(tmp_path, tiny_run, monkeypatch):
    _, _, ckpt, _ = tiny_run
    path = tmp_path / "m.n2n"
    save_checkpoint(ckpt, str(path))
    original = path.read_bytes()

    def boom(*_):
        raise RuntimeError("disk full")
    monkeypatch.setattr(training, "checkpoint_bytes", boom)
    with pytest.raises(RuntimeError):
        save_checkpoint(ckpt, str(path))
    assert path.read_bytes() == original
    assert [p.name for p in tmp_path.iterdir()] == ["m.n2n"]


def test_checkpoint_header_is_parseable(tiny_run):
    raw = checkpoint_bytes(tiny_run[2])
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n])
    assert header["format_version"] == 1
    assert {"model", "ssim", "loss", "noise", "meta", "params"} <= set(header)
    total = sum(p["nbytes"] for p in header["params"])
    assert len(raw) == 16 + n + total
    assert all(p["nbytes"] == 4 * math.prod(p["shape"]) for p in header["params"])
