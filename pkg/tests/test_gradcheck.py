import numpy as np

from refinery.engine import Tensor
from refinery.gradcheck import grad_check
from refinery.ops import ConvSpec, conv2d, weighted_sum

from conftest import rand_tensor


def test_linear_function_machine_precision(rng):
    x = rand_tensor(rng, (1, 2, 3, 3))
    w = rng.standard_normal(x.shape)
    rep = grad_check(lambda: weighted_sum(x, w), [x], eps=1e-3, tol=1e-9)
    assert rep.passed and rep.max_rel_err < 1e-9


def test_single_conv_layer(rng):
    spec = ConvSpec(2, 2, 3, 1, 1, True)
    x = rand_tensor(rng, (1, 2, 5, 5))
    w = rand_tensor(rng, spec.weight_shape)
    b = rand_tensor(rng, (2,))
    rep = grad_check(lambda: conv2d(x, w, b, spec), [x, w, b], eps=1e-4, tol=1e-6)
    assert rep.passed, rep
    assert len(rep.per_param) == 3


def test_detects_wrong_gradient(rng):
    from refinery.engine import record

    def bad_square(t):
        return record("bad", t.data ** 2, (t,), lambda g: (g * t.data,))  # missing factor 2

    x = rand_tensor(rng, (1, 1, 2, 2))
    rep = grad_check(lambda: bad_square(x), [x])
    assert not rep.passed and rep.max_rel_err > 0.1


def test_reports_non_finite(rng):
    from refinery.engine import record

    x = Tensor(np.ones((1, 1, 1, 2)), requires_grad=True)
    bomb = lambda: record("bomb", np.log(x.data - 1.0), (x,), lambda g: (g / (x.data - 1.0),))
    with np.errstate(divide="ignore", invalid="ignore"):
        rep = grad_check(bomb, [x])
    assert not rep.passed and "non-finite" in rep.failure


def test_random_subset_size(rng):
    x = rand_tensor(rng, (1, 4, 10, 10))
    w = rng.standard_normal(x.shape)
    rep = grad_check(lambda: weighted_sum(x, w), [x], max_coords=17)
    assert rep.checked == 17


def test_kink_near_point_is_refined():
    from refinery.ops import relu
    # relu kink 3e-6 away from the point: the wide step straddles it
    x = Tensor(np.array([3e-6, 1.0]), requires_grad=True)
    rep = grad_check(lambda: relu(x), [x], eps=1e-5, tol=1e-6)
    assert rep.passed and rep.refined == 1
    assert not grad_check(lambda: relu(x), [x], eps=1e-5, tol=1e-6, refine_steps=0).passed


def test_refinement_does_not_hide_wrong_gradient(rng):
    from refinery.engine import record
    x = Tensor(rng.standard_normal(4), requires_grad=True)

    def wrong():
        return record("twice", x.data * 2, (x,), lambda g: (g * 1.9,))

    rep = grad_check(wrong, [x], refine_steps=4)
    assert not rep.passed and rep.max_rel_err > 0.01
