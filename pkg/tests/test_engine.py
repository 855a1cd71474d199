import numpy as np
import pytest

from refinery.engine import Tape, Tensor, no_grad
from refinery.ops import add, relu, weighted_sum

from conftest import rand_tensor


def test_tape_is_topologically_ordered(rng):
    x = rand_tensor(rng, (1, 2, 3, 3))
    y = relu(add(x, x))
    z = add(y, relu(y))
    tape = Tape(weighted_sum(z, np.ones(z.shape)))
    position = {id(n): i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for t in node.inputs:
            if t.node is not None:
                assert position[id(t.node)] < position[id(node)]
    assert tape.ops()[-1] == "weighted_sum"


def test_add_chain_accumulates():
    # ((x + x) + x) -> dL/dx = 3 * upstream
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2), requires_grad=True)
    y = add(add(x, x), x)
    up = np.full(y.shape, 0.5)
    y.backward(up)
    np.testing.assert_array_equal(x.grad, 3 * up)


def test_backward_twice_doubles(rng):
    x = rand_tensor(rng, (1, 2, 4, 4))
    loss = weighted_sum(relu(x), rng.standard_normal(x.shape))
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    np.testing.assert_array_equal(x.grad, 2 * first)


def test_no_grad_records_nothing(rng):
    x = rand_tensor(rng, (1, 1, 2, 2))
    with no_grad():
        y = relu(x)
    assert y.node is None and not y.requires_grad


def test_backward_requires_grad():
    with pytest.raises(RuntimeError):
        Tensor(np.zeros(1)).backward()


def test_constant_operand_gets_no_grad(rng):
    x = rand_tensor(rng, (1, 1, 2, 2))
    c = rand_tensor(rng, (1, 1, 2, 2), requires_grad=False)
    weighted_sum(add(x, c), np.ones((1, 1, 2, 2))).backward()
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, np.ones((1, 1, 2, 2)))
