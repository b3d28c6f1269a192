import csv
import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from hvsr import seeding
from hvsr.checkpoint import content_hash, load_lr_encoder, load_vae, parameter_hash
from hvsr.data import from_tensor, toy_faces
from hvsr.degradation import DegradationOperator
from hvsr.errors import ParentMismatchError, TrainingAborted
from hvsr.hvae import HVAE, HierarchySpec, desk_spec
from hvsr.lr_encoder import LrEncoder
from hvsr.training import (PlateauSchedule, TrainConfig, _Loop, batch_indices, lrenc_loss, plateau_lrs,
                           train_lr_encoder, train_vae, vae_loss)


def small_spec():
    return HierarchySpec(groups=((4, 1, 1), (4, 4, 4), (2, 8, 8)), widths={1: 16, 4: 16, 8: 8},
                         image_shape=(3, 8, 8))


def small_data(n=32, seed=0):
    return from_tensor(toy_faces(n, seed=seed, size=8), 0.25, 0)


# --------------------------------------------------------------------------
# config and schedule


def test_config_validation():
    for bad in [dict(batch_size=0), dict(learning_rate=-1.0), dict(plateau_factor=1.0), dict(plateau_factor=0.0),
                dict(grad_clip_norm=0.0), dict(seed=-1), dict(beta1=1.0)]:
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"learning_rte": 1e-3})
    cfg = TrainConfig.from_dict({"learning_rate": "2e-4", "batch_size": 8})
    assert cfg.learning_rate == 2e-4 and cfg.batch_size == 8
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.batch_size, cfg.learning_rate, cfg.max_iterations) == (16, 1e-4, 20_000)
    assert (cfg.plateau_patience, cfg.plateau_factor, cfg.plateau_threshold, cfg.max_lr_reductions) == (10, 0.1, 1e-3, 3)
    assert (cfg.beta1, cfg.beta2, cfg.eps, cfg.grad_clip_norm) == (0.9, 0.999, 1e-8, 200.0)


def test_two_plateau_triggers():
    cfg = TrainConfig(learning_rate=1.0, plateau_patience=3)
    lrs = plateau_lrs([5.0] + [5.0] * 6, cfg)
    assert lrs[-1] == pytest.approx(0.01)
    assert lrs[:3] == [1.0, 1.0, 1.0]


def test_at_most_three_reductions():
    cfg = TrainConfig(learning_rate=1.0, plateau_patience=1)
    assert plateau_lrs([1.0] * 20, cfg)[-1] == pytest.approx(1e-3)


def test_small_relative_improvement_counts_as_plateau():
    cfg = TrainConfig(learning_rate=1.0, plateau_patience=2, plateau_threshold=1e-3)
    # each step improves by 1e-4 relative: below threshold
    vals = [1.0 * (1 - 1e-4) ** i for i in range(3)]
    assert plateau_lrs(vals, cfg)[-1] == pytest.approx(0.1)


def _reference_schedule(values, lr, patience, factor, threshold, max_red):
    best, bad, red, out = None, 0, 0, []  # values are finite here
    for v in values:
        if best is None or (best - v) > threshold * abs(best):
            best, bad = v, 0
        else:
            bad += 1
            if bad == patience and red < max_red:
                lr, red, bad = lr * factor, red + 1, 0
        out.append(lr)
    return out


@settings(max_examples=100, deadline=None)
@given(values=st.lists(st.floats(-10, 10), max_size=60), patience=st.integers(1, 5))
def test_schedule_is_pure_function_of_losses(values, patience):
    cfg = TrainConfig(learning_rate=0.5, plateau_patience=patience)
    lrs = plateau_lrs(values, cfg)
    assert lrs == plateau_lrs(values, cfg)
    assert lrs == pytest.approx(_reference_schedule(values, 0.5, patience, 0.1, 1e-3, 3))
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_batch_indices_are_keyed_by_step():
    assert (batch_indices(100, 8, 0, 5) == batch_indices(100, 8, 0, 5)).all()
    assert not (batch_indices(100, 8, 0, 5) == batch_indices(100, 8, 0, 6)).all()
    assert len(set(batch_indices(100, 8, 0, 5).tolist())) == 8
    assert len(batch_indices(4, 8, 0, 0)) == 8


# --------------------------------------------------------------------------
# loop mechanics


def test_non_finite_steps_are_skipped_then_abort():
    w = torch.nn.Parameter(torch.ones(1))
    cfg = TrainConfig(max_iterations=10, eval_interval=5, learning_rate=0.1)

    def make_loop():
        return _Loop([w], torch.optim.Adam([w], lr=0.1), cfg)

    def sometimes_nan(idx, gen):
        return w.sum() * (math.nan if batch_loss.calls % 3 == 0 else 1.0)

    def batch_loss(idx, gen):
        batch_loss.calls += 1
        return sometimes_nan(idx, gen)

    batch_loss.calls = -1
    result = make_loop().run(batch_loss, lambda: None, 10, lambda s, i: None)
    assert result.skipped_steps == 4
    assert bool(torch.isfinite(w).all())

    cfg = TrainConfig(max_iterations=100, eval_interval=200)
    with pytest.raises(TrainingAborted):
        _Loop([w], torch.optim.Adam([w]), cfg).run(lambda i, g: w.sum() * math.inf, lambda: None, 10,
                                                   lambda s, i: None)


def test_vae_smoke_training_reduces_loss(tmp_path):
    torch.manual_seed(0)
    model = HVAE(desk_spec())
    data = from_tensor(toy_faces(32, seed=0), 0.0, 0)
    x = data.images

    def full_loss():
        with torch.no_grad():
            return float(vae_loss(model, x, seeding.generator(123)))

    before = full_loss()
    cfg = TrainConfig(batch_size=8, learning_rate=1e-3, max_iterations=200, eval_interval=50)
    result = train_vae(model, data, cfg, out_dir=tmp_path)
    assert full_loss() < before
    assert [r.step for r in result.history] == [0, 50, 100, 150, 200]
    # empty validation split: plateau detection falls back to the train loss
    assert all(math.isnan(r.val_loss) for r in result.history)
    for name in ("best.ckpt", "last.ckpt", "train_state.pt", "history.csv"):
        assert (tmp_path / name).is_file()
    with open(tmp_path / "history.csv") as f:
        assert next(csv.reader(f)) == ["step", "train_loss", "val_loss", "lr"]
    loaded, meta = load_vae(tmp_path / "last.ckpt")
    assert meta["step"] == 200 and parameter_hash(loaded) == parameter_hash(model)


def test_resume_replays_bitwise(tmp_path):
    data = small_data()
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, max_iterations=20, eval_interval=5, val_batch_size=8)

    torch.manual_seed(0)
    ref_model = HVAE(small_spec())
    ref = train_vae(ref_model, data, cfg)

    torch.manual_seed(0)
    part = HVAE(small_spec())
    train_vae(part, data, TrainConfig(**{**cfg.to_dict(), "max_iterations": 10}), out_dir=tmp_path)
    resumed = HVAE(small_spec())
    out = train_vae(resumed, data, cfg, resume=tmp_path / "train_state.pt")
    # repr so that the nan of the step-0 row compares equal
    assert [repr((r.step, r.train_loss, r.val_loss, r.lr)) for r in out.history] == \
        [repr((r.step, r.train_loss, r.val_loss, r.lr)) for r in ref.history]
    assert parameter_hash(resumed) == parameter_hash(ref_model)


def test_rerun_is_bitwise_identical():
    data = small_data()
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, max_iterations=10, eval_interval=5)
    models = []
    for _ in range(2):
        torch.manual_seed(0)
        models.append(HVAE(small_spec()))
        train_vae(models[-1], data, cfg)
    assert parameter_hash(models[0]) == parameter_hash(models[1])


# --------------------------------------------------------------------------
# LR encoder


def _trained_small(tmp_path):
    torch.manual_seed(0)
    model = HVAE(small_spec())
    data = small_data(64)
    train_vae(model, data, TrainConfig(batch_size=8, learning_rate=1e-3, max_iterations=30, eval_interval=30),
              out_dir=tmp_path / "vae")
    return model, data, content_hash(tmp_path / "vae" / "last.ckpt")


def test_lr_encoder_training_freezes_vae(tmp_path):
    model, data, parent = _trained_small(tmp_path)
    before = parameter_hash(model)
    flags = [p.requires_grad for p in model.parameters()]
    lrenc = LrEncoder(model.spec, 2)
    cfg = TrainConfig(batch_size=8, learning_rate=1e-3, max_iterations=40, eval_interval=20)
    result = train_lr_encoder(model, lrenc, data, DegradationOperator(scale=2), cfg, out_dir=tmp_path / "lr",
                              parent_hash=parent)
    assert parameter_hash(model) == before
    assert [p.requires_grad for p in model.parameters()] == flags
    assert result.history[-1].val_loss < result.history[0].val_loss
    loaded, meta = load_lr_encoder(tmp_path / "lr" / "last.ckpt", parent)
    assert meta["parent_hash"] == parent and parameter_hash(loaded) == parameter_hash(lrenc)


def test_lr_encoder_resume_checks_parent(tmp_path):
    model, data, parent = _trained_small(tmp_path)
    op = DegradationOperator(scale=2)
    cfg = TrainConfig(batch_size=8, max_iterations=4, eval_interval=2)
    train_lr_encoder(model, LrEncoder(model.spec, 2), data, op, cfg, out_dir=tmp_path / "lr", parent_hash=parent)
    with pytest.raises(ParentMismatchError):
        train_lr_encoder(model, LrEncoder(model.spec, 2), data, op, cfg, parent_hash="f" * 64,
                         resume=tmp_path / "lr" / "train_state.pt")
    with pytest.raises(ValueError, match="parent"):
        train_lr_encoder(model, LrEncoder(model.spec, 2), data, op, cfg, out_dir=tmp_path / "x")
    with pytest.raises(ValueError, match="scale"):
        train_lr_encoder(model, LrEncoder(model.spec, 2), data, DegradationOperator(scale=4), cfg)


def test_lr_encoder_desk_smoke():
    """500 desk-scale steps reduce the validation KL."""
    torch.manual_seed(0)
    model = HVAE(desk_spec()).eval()
    data = from_tensor(toy_faces(256, seed=0), 0.25, 0)
    lrenc = LrEncoder(model.spec, 4)
    op = DegradationOperator(scale=4)
    val = data.val[:64]
    y = op and __import__("hvsr.degradation", fromlist=["downsample"]).downsample(op, val)

    def val_kl():
        with torch.no_grad():
            return float(lrenc_loss(model, lrenc, val, y, seeding.generator(0, 12)))

    before = val_kl()
    cfg = TrainConfig(batch_size=16, learning_rate=1e-3, max_iterations=500, eval_interval=250)
    result = train_lr_encoder(model, lrenc, data, op, cfg)
    assert result.history[0].val_loss == pytest.approx(before)
    assert result.history[-1].val_loss < before
