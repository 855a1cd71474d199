import math

import numpy as np
import pytest

from refinery import rntb
from refinery.backbone import BackboneSpec
from refinery.cascade import CascadeSpec, build
from refinery.data import gen_synthetic
from refinery.engine import Tensor
from refinery.errors import CheckpointMismatch, ConfigError, TrainingDiverged
from refinery.nn import Module
from refinery.train import SGD, TrainConfig, batch_indices, resume, train


def tiny_spec(**kw):
    bb = BackboneSpec(stem_channels=4, channels=(4, 6, 8, 8), residual_gain=0.25)
    args = dict(num_classes=3, backbone=bb, refine_channels=(4, 4, 4, 6), residual_gain=0.25)
    args.update(kw)
    return CascadeSpec(**args)


@pytest.fixture(scope="module")
def data():
    return gen_synthetic(12, 32, 32, 3, seed=0)


def small_cfg(**kw):
    base = dict(lr=0.01, batch_size=2, iterations=6, crop=(32, 32), clip_grad_norm=1.0)
    base.update(kw)
    return TrainConfig(**base)


def params_bytes(model):
    return {n: p.data.tobytes() for n, p in model.named_parameters()}


def test_zero_lr_leaves_parameters(data):
    model = build(tiny_spec(), seed=0)
    before = params_bytes(model)
    train(model, data, small_cfg(lr=0.0))
    assert params_bytes(model) == before


class Quadratic(Module):
    """L = 0.5 * (w0 - 3)^2 + 2 * w1^2 (no data dependence)."""

    def __init__(self):
        super().__init__()
        self.w = self.add_param("w", Tensor(np.array([1.0, 1.0]), requires_grad=True))

    def grad(self):
        w = self.w.data
        return np.array([w[0] - 3.0, 4.0 * w[1]])


def test_hand_stepped_sgd():
    q = Quadratic()
    opt = SGD(q.named_parameters(), momentum=0.0, weight_decay=0.0)
    q.w.grad = q.grad()
    opt.step(0.1)
    np.testing.assert_array_equal(q.w.data, [1.0 - 0.1 * -2.0, 1.0 - 0.1 * 4.0])


def test_momentum_and_decay_hand_steps():
    q = Quadratic()
    opt = SGD(q.named_parameters(), momentum=0.9, weight_decay=0.5)
    w, v = np.array([1.0, 1.0]), np.zeros(2)
    for _ in range(3):
        q.w.grad = q.grad()
        g = np.array([w[0] - 3.0, 4.0 * w[1]])
        v = 0.9 * v + g + 0.5 * w
        w = w - 0.05 * v
        opt.step(0.05)
        np.testing.assert_allclose(q.w.data, w, rtol=0, atol=1e-15)


def test_poly_schedule():
    cfg = TrainConfig(lr=0.1, iterations=10, power=0.9)
    assert cfg.lr_at(0) == 0.1
    assert cfg.lr_at(5) == pytest.approx(0.1 * 0.5 ** 0.9)
    assert TrainConfig(lr=0.1, schedule="constant").lr_at(999) == 0.1


@pytest.mark.parametrize("bad", [dict(lr=-1), dict(momentum=1.0), dict(batch_size=0),
                                 dict(schedule="cosine"), dict(scale_range=(1.3, 0.7))])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_batch_order_is_epoch_permutation():
    seen = sum((batch_indices(7, it, 4, 12) for it in range(3)), [])
    assert sorted(seen) == list(range(12))
    assert batch_indices(7, 5, 4, 12) == batch_indices(7, 5, 4, 12)


def test_deterministic_loss_curve(data):
    a = train(build(tiny_spec(), 0), data, small_cfg())
    b = train(build(tiny_spec(), 0), data, small_cfg())
    assert a.log_lines == b.log_lines
    assert all(math.isfinite(v) for v in a.losses)


def test_resume_is_bit_exact(data, tmp_path):
    cfg = small_cfg(iterations=8)
    full = train(build(tiny_spec(), 0), data, cfg)
    half = train(build(tiny_spec(), 0), data, cfg, out_dir=tmp_path, until=4)
    assert half.state.iteration == 4
    cont = resume(tmp_path / "last.rntc", data, cfg, spec=tiny_spec(), out_dir=tmp_path)
    assert params_bytes(cont.model) == params_bytes(full.model)
    assert full.log_lines[4:] == cont.log_lines
    log = (tmp_path / "train_log.csv").read_text().splitlines()
    assert log[0] == "iter,loss,lr" and log[1:] == full.log_lines


def test_momentum_buffers_round_trip(data, tmp_path):
    res = train(build(tiny_spec(), 0), data, small_cfg(iterations=3), out_dir=tmp_path)
    entries = rntb.load_container(tmp_path / "last.rntc")
    for k, v in res.state.optimizer.buffers.items():
        assert entries[f"optim.momentum.{k}"].tobytes() == v.tobytes()
    assert any(np.any(v != 0) for v in res.state.optimizer.buffers.values())


def test_resume_with_wrong_spec(data, tmp_path):
    train(build(tiny_spec(), 0), data, small_cfg(iterations=2), out_dir=tmp_path)
    with pytest.raises(CheckpointMismatch):
        resume(tmp_path / "last.rntc", data, small_cfg(), spec=tiny_spec(variant="single"))


def test_periodic_checkpoints(data, tmp_path):
    res = train(build(tiny_spec(), 0), data, small_cfg(iterations=5, checkpoint_period=2),
                out_dir=tmp_path)
    assert [p.name for p in res.checkpoints] == ["ckpt_000002.rntc", "ckpt_000004.rntc",
                                                 "ckpt_000005.rntc"]


def test_nan_aborts_before_update(data, tmp_path):
    model = build(tiny_spec(), 0)
    train(model, data, small_cfg(iterations=2), out_dir=tmp_path)
    last = (tmp_path / "last.rntc").read_bytes()
    poisoned = build(tiny_spec(), 0)
    poisoned.classifier.weight.data[:] = np.nan
    before = params_bytes(poisoned)
    with pytest.raises(TrainingDiverged, match="iteration 1"):
        train(poisoned, data, small_cfg(iterations=2), out_dir=tmp_path / "other")
    assert params_bytes(poisoned) == before
    assert (tmp_path / "last.rntc").read_bytes() == last


def test_gradient_audit_nonzero_at_step_one(data, tmp_path):
    res = train(build(tiny_spec(), 0), data, small_cfg(iterations=2, audit_grad=True), out_dir=tmp_path)
    lines = (tmp_path / "grad_audit.csv").read_text().splitlines()
    assert lines[0].startswith("iter,backbone") and len(lines) == 3
    norms = res.audit[0]
    assert set(norms) >= {"backbone", "refine4", "refine1", "head"}
    assert all(v > 0 for v in norms.values())


def test_labels_beyond_classes_rejected(data):
    model = build(tiny_spec(num_classes=2), 0)
    with pytest.raises(ConfigError, match="sample"):
        train(model, data, small_cfg())


def test_single_sample_overfit():
    sample = gen_synthetic(1, 32, 32, 3, seed=11)
    model = build(tiny_spec(), 0)
    cfg = TrainConfig(lr=0.01, batch_size=1, iterations=500, augment=False, weight_decay=0.0,
                      schedule="constant", clip_grad_norm=1.0)
    res = train(model, sample, cfg)
    assert min(res.losses[-20:]) < 0.05
