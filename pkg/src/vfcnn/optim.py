from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, GradientError


@dataclass
class SgdConfig:
    learning_rate: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be non-negative, got {self.weight_decay}")


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient.

    ``params`` is a mapping name -> Tensor or a sequence of Tensors.
    """

    def __init__(self, params, config=None):
        if isinstance(params, dict):
            items = list(params.items())
        else:
            items = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
        self.params = items
        self.config = config or SgdConfig()
        self.velocity = {name: np.zeros_like(p.data) for name, p in items}

    def step(self):
        cfg = self.config
        for name, p in self.params:
            if p.grad is None:
                raise GradientError(f"parameter {name!r} has no gradient")
        for name, p in self.params:
            v = self.velocity[name]
            v *= cfg.momentum
            v += p.grad + cfg.weight_decay * p.data
            p.data -= cfg.learning_rate * v
            p.grad.fill(0.0)

    def zero_grad(self):
        for _, p in self.params:
            p.zero_grad()


def sgd_step(params, config, optimizer=None):
    """Apply one update; pass back the returned optimizer to keep momentum."""
    optimizer = optimizer or SGD(params, config)
    optimizer.step()
    return optimizer
