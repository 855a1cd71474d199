import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refinery.backbone import Backbone, BackboneSpec
from refinery.engine import Tensor, no_grad
from refinery.errors import ShapeError
from refinery.gradcheck import grad_check
from refinery.ops import add, conv2d, relu, weighted_sum


def small_spec(**kw):
    kw.setdefault("stem_channels", 2)
    kw.setdefault("channels", (2, 3, 3, 4))
    return BackboneSpec(**kw)


def test_64_input_scales(rng):
    bb = Backbone(BackboneSpec(), rng)
    with no_grad():
        feats = bb(Tensor(rng.random((1, 3, 64, 64)).astype(np.float32)))
    assert [f.shape[2:] for f in feats] == [(16, 16), (8, 8), (4, 4), (2, 2)]
    assert [f.shape[1] for f in feats] == [32, 64, 128, 256]


def test_224_input_is_32x_smaller(rng):
    bb = Backbone(small_spec(), rng)
    with no_grad():
        f4 = bb(Tensor(rng.random((1, 3, 224, 224))))[3]
    assert f4.shape[2:] == (7, 7)


def test_indivisible_input_rejected(rng):
    bb = Backbone(small_spec(), rng)
    with pytest.raises(ShapeError, match="pad or crop"):
        bb(Tensor(rng.random((1, 3, 48, 64))))


def test_spec_invariants():
    with pytest.raises(ShapeError):
        BackboneSpec(channels=(32, 64, 128))
    with pytest.raises(ShapeError):
        BackboneSpec(strides=(2, 2, 2, 2))
    with pytest.raises(ShapeError):
        BackboneSpec(channels=(64, 32, 128, 256))


def test_zero_branch_reduces_to_projection_path(rng):
    spec = small_spec(units=(2, 1, 2, 1))
    bb = Backbone(spec, rng, np.float64)
    for name, p in bb.named_parameters():
        if ".conv1." in name or ".conv2." in name:
            if name.startswith("block"):
                p.data[...] = 0
    x = Tensor(rng.random((1, 3, 32, 64)))
    feats = bb(x)
    # closed form: stem, then each stage is its first unit's 1x1 projection
    y = bb.stem2(relu(bb.stem1(x)))
    for units, f in zip(bb.blocks, feats):
        p = units[0].proj
        y = y if p is None else conv2d(y, p.weight, p.bias, p.spec)
        np.testing.assert_allclose(f.data, y.data, atol=1e-12)


def test_gradient_from_f4_reaches_stem(rng):
    bb = Backbone(small_spec(), rng, np.float64)
    f4 = bb(Tensor(rng.random((1, 3, 64, 64))))[3]
    weighted_sum(f4, rng.standard_normal(f4.shape)).backward()
    assert np.linalg.norm(bb.stem1.weight.grad) > 0


def test_parameter_names(rng):
    names = [n for n, _ in Backbone(small_spec(), rng).named_parameters()]
    assert "block1.unit1.conv1.weight" in names
    assert "block4.unit1.proj.weight" in names
    assert names[0] == "stem.conv1.weight"


def test_backbone_gradcheck(rng):
    bb = Backbone(small_spec(), rng, np.float64)
    x = Tensor(rng.random((1, 3, 32, 32)))
    rep = grad_check(lambda: bb(x)[3], bb.parameters(), tol=1e-4, max_coords=6, eps=1e-6)
    assert rep.passed, rep


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.integers(1, 2))
def test_halving_law(hm, wm, c0, units):
    spec = BackboneSpec(stem_channels=1, channels=(c0, c0, c0 + 1, c0 + 2), units=(units,) * 4)
    bb = Backbone(spec, np.random.default_rng(0))
    h, w = 32 * hm, 32 * wm
    with no_grad():
        feats = bb(Tensor(np.zeros((1, 3, h, w), dtype=np.float32)))
    for m, f in enumerate(feats, start=1):
        assert f.shape[2:] == (h // 2 ** (m + 1), w // 2 ** (m + 1))
