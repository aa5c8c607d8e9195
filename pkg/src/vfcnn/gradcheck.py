"""Central finite-difference checks for every differentiable operation."""
import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import Tape, Tensor
from .metrics import LossConfig, combined_loss
from .model import Vfcnn, VfcnnConfig

OP_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class GradcheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float = 0.0

    @property
    def passed(self):
        return bool(self.max_rel_error <= self.tolerance)


def relative_error(analytic, numeric):
    """Max-norm error relative to the larger of the two gradients."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def numerical_grad(f, tensor, h=1e-5, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``tensor``."""
    flat = tensor.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def analytic_grads(f, inputs):
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        loss = f()
    tape.backward(loss)
    return [t.grad.copy() for t in inputs]


def check_function(name, f, inputs, h=1e-5, tol=OP_TOL):
    """Compare tape gradients of scalar ``f()`` against finite differences
    for every entry of every tensor in ``inputs``."""
    start = time.perf_counter()
    analytic = analytic_grads(f, inputs)

    def value():
        return f().item()

    err = 0.0
    for t, g in zip(inputs, analytic):
        err = max(err, relative_error(g, numerical_grad(value, t, h).reshape(g.shape)))
    return GradcheckResult(name, err, tol, time.perf_counter() - start)


def _param(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _projected(out, proj):
    return (out * proj).sum()


def case_conv3d(rng):
    x = _param(rng, 1, 2, 6, 6, 6)
    w = _param(rng, 3, 2, 3, 3, 3)
    b = _param(rng, 3)
    proj = rng.standard_normal((1, 3, 3, 3, 3))
    return (lambda: _projected(ops.conv3d(x, w, b, stride=2, padding=1), proj)), [x, w, b]


def case_conv_transpose3d(rng):
    x = _param(rng, 1, 2, 3, 4, 3)
    w = _param(rng, 2, 3, 3, 3, 3)
    b = _param(rng, 3)
    outpad = (1, 0, 1)
    dhw = [ops.conv_transpose_output_size(n, 3, 2, 1, o) for n, o in zip((3, 4, 3), outpad)]
    proj = rng.standard_normal((1, 3, *dhw))
    return (lambda: _projected(
        ops.conv_transpose3d(x, w, b, stride=2, padding=1, output_padding=outpad), proj)), [x, w, b]


def case_prelu(rng):
    raw = rng.standard_normal((2, 3, 2, 3, 2))
    # keep entries clear of the kink at zero
    raw = np.sign(raw) * (np.abs(raw) + 0.1)
    x = Tensor(raw, requires_grad=True)
    slope = Tensor(rng.uniform(0.1, 0.5, 3), requires_grad=True)
    proj = rng.standard_normal(raw.shape)
    return (lambda: _projected(ops.prelu(x, slope), proj)), [x, slope]


def case_batchnorm3d(rng):
    x = _param(rng, 2, 3, 2, 2, 2)
    gamma = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = _param(rng, 3)
    state = ops.BatchNormState(3)
    proj = rng.standard_normal(x.shape)
    return (lambda: _projected(ops.batchnorm3d(x, gamma, beta, state, training=True), proj)), [x, gamma, beta]


def case_sigmoid(rng):
    x = _param(rng, 2, 3, 4, scale=3.0)
    proj = rng.standard_normal(x.shape)
    return (lambda: _projected(ops.sigmoid(x), proj)), [x]


def _loss_case(rng, dice_sign):
    pred = Tensor(rng.uniform(0.05, 0.95, (1, 1, 4, 5, 5)), requires_grad=True)
    target = (rng.random((4, 5, 5)) < 0.4).astype(float)
    target[0] = 0.0  # one empty ground-truth slice
    cfg = LossConfig(lam=0.5, dice_sign=dice_sign)
    return (lambda: combined_loss(pred, target, cfg)), [pred]


def case_loss_subtract(rng):
    return _loss_case(rng, "subtract")


def case_loss_literal(rng):
    return _loss_case(rng, "literal")


OP_CASES = {
    "conv3d": case_conv3d,
    "conv_transpose3d": case_conv_transpose3d,
    "prelu": case_prelu,
    "batchnorm3d": case_batchnorm3d,
    "sigmoid": case_sigmoid,
    "combined_loss[subtract]": case_loss_subtract,
    "combined_loss[literal]": case_loss_literal,
}


def check_model(seed=0, n_params=10, config=None, size=(24, 24, 24), h=1e-5, tol=MODEL_TOL):
    """Spot-check whole-network gradients (forward + loss) on randomly
    chosen scalar parameters."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    model = Vfcnn(config or VfcnnConfig(seed=seed))
    x = Tensor(rng.random((1, 1) + tuple(size)))
    target = (rng.random(size) < 0.3).astype(float)
    loss_cfg = LossConfig(lam=0.5)

    def f():
        return combined_loss(model.forward(x, training=True), target, loss_cfg)

    def kink_pattern():
        with Tape() as tape:
            f()
        return np.concatenate([rec.inputs[0].data.ravel() >= 0
                               for rec in tape.records if rec.op == "prelu"])

    def crosses_kink(p, idx):
        flat = p.data.reshape(-1)
        orig = flat[idx]
        flat[idx] = orig + h
        plus = kink_pattern()
        flat[idx] = orig - h
        minus = kink_pattern()
        flat[idx] = orig
        return not np.array_equal(plus, minus)

    names = list(model.params)
    analytic = analytic_grads(f, list(model.params.values()))
    grads = dict(zip(names, analytic))
    err = 0.0
    checked = 0
    while checked < n_params:
        name = names[rng.integers(len(names))]
        p = model.params[name]
        idx = int(rng.integers(p.size))
        # the central difference straddles a PReLU kink: not a smooth point
        if crosses_kink(p, idx):
            continue
        a = grads[name].reshape(-1)[idx]
        n = numerical_grad(lambda: f().item(), p, h, [idx])[0]
        err = max(err, float(abs(a - n) / max(abs(a), abs(n), 1e-7)))
        checked += 1
    return GradcheckResult("vfcnn[model spot check]", err, tol, time.perf_counter() - start)


def run_suite(seed=0, cases=None, include_model=True):
    rng = np.random.default_rng(seed)
    results = []
    for name, build in (cases or OP_CASES).items():
        f, inputs = build(rng)
        results.append(check_function(name, f, inputs))
    if include_model:
        results.append(check_model(seed))
    return results


def format_table(results):
    width = max(len(r.name) for r in results)
    lines = [f"{'op'.ljust(width)}  max_rel_error  tolerance  result"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {r.max_rel_error:13.3e}  {r.tolerance:9.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
