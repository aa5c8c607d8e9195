import numpy as np
import pytest

from vfcnn.autograd import Tensor
from vfcnn.errors import ConfigurationError, GradientError
from vfcnn.optim import SGD, SgdConfig


def make_param(value, grad):
    p = Tensor([value], requires_grad=True, name="w")
    p.grad[:] = grad
    return p


def test_defaults():
    cfg = SgdConfig()
    assert (cfg.learning_rate, cfg.momentum, cfg.weight_decay) == (1e-4, 0.9, 1e-5)


def test_vanilla_step():
    p = make_param(1.0, 1.0)
    SGD([p], SgdConfig(0.1, 0.0, 0.0)).step()
    assert p.data[0] == pytest.approx(0.9, abs=1e-15)
    assert p.grad[0] == 0.0


def test_momentum_two_steps():
    p = make_param(1.0, 1.0)
    opt = SGD([p], SgdConfig(0.1, 0.9, 0.0))
    opt.step()
    assert p.data[0] == pytest.approx(0.9, abs=1e-15)
    p.grad[:] = 1.0
    opt.step()
    # v = 0.9 * 1 + 1 = 1.9 ; 0.9 - 0.1 * 1.9
    assert p.data[0] == pytest.approx(0.71, abs=1e-15)


def test_weight_decay_only():
    p = make_param(2.0, 0.0)
    SGD([p], SgdConfig(0.1, 0.0, 1e-5)).step()
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 1e-5 * 2.0, abs=1e-16)


def test_velocity_matches_shapes():
    params = {"a": Tensor(np.zeros((2, 3)), requires_grad=True),
              "b": Tensor(np.zeros(4), requires_grad=True)}
    opt = SGD(params)
    assert {k: v.shape for k, v in opt.velocity.items()} == {"a": (2, 3), "b": (4,)}
    assert all(not v.any() for v in opt.velocity.values())


def test_missing_gradient_names_parameter():
    frozen = Tensor([1.0], name="frozen")
    with pytest.raises(GradientError, match="frozen"):
        SGD({"frozen": frozen}).step()


@pytest.mark.parametrize("kwargs", [{"learning_rate": 0}, {"momentum": 1.0}, {"weight_decay": -1}])
def test_config_validation(kwargs):
    with pytest.raises(ConfigurationError):
        SgdConfig(**kwargs)
