import numpy as np
import pytest

from vfcnn.autograd import Tape, Tensor, backward
from vfcnn.errors import GradientError


def test_grad_present_iff_requires_grad():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.ones((2, 3)))
    assert a.grad.shape == a.shape
    assert b.grad is None
    assert a.data.size == np.prod(a.shape)


def test_sum_gives_ones(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = x.sum()
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_sum_of_squares_gives_2x(rng):
    x = Tensor(rng.standard_normal((5,)), requires_grad=True)
    with Tape() as tape:
        loss = (x * x).sum()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2 * x.data, rtol=0, atol=1e-15)


def test_non_scalar_loss_rejected(rng):
    x = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(GradientError):
        tape.backward(y)


def test_unreachable_gradients_stay_zero(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    z = Tensor(rng.standard_normal(3), requires_grad=True)
    with Tape() as tape:
        loss = (x * 3.0).sum()
        _ = (z * 2.0).sum()
    tape.backward(loss)
    np.testing.assert_array_equal(z.grad, np.zeros(3))
    np.testing.assert_array_equal(x.grad, np.full(3, 3.0))


def test_accumulation_is_additive(rng):
    data = rng.standard_normal(4)
    x1 = Tensor(data, requires_grad=True)
    with Tape() as tape:
        loss = (x1 * x1 * 2.0).sum()
    tape.backward(loss)
    tape.backward(loss)

    x2 = Tensor(data, requires_grad=True)
    with Tape() as tape2:
        loss2 = (x2 * x2).sum() * 4.0
    tape2.backward(loss2)
    np.testing.assert_allclose(x1.grad, x2.grad, rtol=1e-15)


def test_reused_node_receives_both_contributions(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        loss = (y + y * y).sum()
    tape.backward(loss)
    np.testing.assert_allclose(x.grad, 2.0 + 8.0 * x.data, rtol=1e-14)


def test_tape_records_in_topological_order(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        z = y + 1.0
        loss = z.sum()
    produced = set()
    for rec in tape.records:
        for inp in rec.inputs:
            assert inp is x or not inp.requires_grad or id(inp) in produced
        produced.add(id(rec.output))
    assert tape.ops() == ["mul", "add", "sum"]
    assert loss.requires_grad


def test_clear_drops_graph_not_data(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    before = x.data.copy()
    with Tape() as tape:
        (x * 2.0).sum()
    tape.clear()
    assert len(tape) == 0
    np.testing.assert_array_equal(x.data, before)


def test_no_tape_means_no_recording(rng):
    x = Tensor(rng.standard_normal(3), requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_broadcast_gradients_reduce(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 3)), requires_grad=True)
    with Tape() as tape:
        loss = (a * b).sum()
    tape.backward(loss)
    np.testing.assert_allclose(b.grad, a.data.sum(axis=0, keepdims=True))
    np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, (2, 3)))


def test_division_and_mean(rng):
    a = Tensor(rng.uniform(1, 2, 4), requires_grad=True)
    b = Tensor(rng.uniform(1, 2, 4), requires_grad=True)
    with Tape() as tape:
        loss = (a / b).mean()
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, 0.25 / b.data)
    np.testing.assert_allclose(b.grad, -0.25 * a.data / b.data ** 2)
