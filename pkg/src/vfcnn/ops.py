"""Differentiable volumetric primitives: 3D (transposed) convolution,
PReLU, batch normalisation and the logistic sigmoid.

Activations use the N x C x D x H x W layout.  Convolutions are computed
as a fixed-order loop over kernel taps, each tap a small matrix product on
a channel-last strided view, so results are bit-reproducible and memory
stays at the size of the output.
"""
from dataclasses import dataclass
from itertools import product

import numpy as np

from .autograd import Tensor, _result, as_tensor
from .errors import ConfigurationError, DimensionError

_AXES = ("D", "H", "W")


def _triple(value, name):
    if np.isscalar(value):
        value = (int(value),) * 3
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ConfigurationError(f"{name} must be an int or a triple, got {value}")
    return value


def _to_cl(a):
    return np.ascontiguousarray(np.moveaxis(a, 1, -1))


def _from_cl(a):
    return np.ascontiguousarray(np.moveaxis(a, -1, 1))


def _window(k0, n, s):
    return slice(k0, k0 + s * (n - 1) + 1, s)


def _gather(xp_cl, w, stride, out_dhw):
    # out[n, z, y, x, o] = sum_{tap, i} xp[n, s*z + a, s*y + b, s*x + c, i] * w[o, i, a, b, c]
    n = xp_cl.shape[0]
    out = np.zeros((n,) + tuple(out_dhw) + (w.shape[0],))
    for a, b, c in product(*(range(k) for k in w.shape[2:])):
        patch = xp_cl[:, _window(a, out_dhw[0], stride[0]),
                      _window(b, out_dhw[1], stride[1]),
                      _window(c, out_dhw[2], stride[2]), :]
        out += patch @ w[:, :, a, b, c].T
    return out


def _scatter(g_cl, w, stride, padded_dhw):
    # adjoint of _gather with respect to xp
    n, d, h, wd = g_cl.shape[:4]
    gp = np.zeros((n,) + tuple(padded_dhw) + (w.shape[1],))
    for a, b, c in product(*(range(k) for k in w.shape[2:])):
        gp[:, _window(a, d, stride[0]), _window(b, h, stride[1]),
           _window(c, wd, stride[2]), :] += g_cl @ w[:, :, a, b, c]
    return gp


def _weight_grad(xp_cl, g_cl, stride, kshape):
    out_dhw = g_cl.shape[1:4]
    gw = np.zeros((g_cl.shape[-1], xp_cl.shape[-1]) + tuple(kshape))
    for a, b, c in product(*(range(k) for k in kshape)):
        patch = xp_cl[:, _window(a, out_dhw[0], stride[0]),
                      _window(b, out_dhw[1], stride[1]),
                      _window(c, out_dhw[2], stride[2]), :]
        gw[:, :, a, b, c] = np.tensordot(g_cl, patch, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
    return gw


def _pad_cl(x_cl, padding):
    pd, ph, pw = padding
    if not (pd or ph or pw):
        return x_cl
    return np.pad(x_cl, ((0, 0), (pd, pd), (ph, ph), (pw, pw), (0, 0)))


def _crop_cl(x_cl, padding, dhw):
    pd, ph, pw = padding
    return x_cl[:, pd:pd + dhw[0], ph:ph + dhw[1], pw:pw + dhw[2], :]


def _check_5d(t, what):
    if t.ndim != 5:
        raise DimensionError(f"{what} must be 5-D, got shape {t.shape}", axis="ndim")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv_transpose_output_size(size, kernel, stride, padding, output_padding=0):
    return (size - 1) * stride - 2 * padding + kernel + output_padding


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlate ``x`` (N, Cin, D, H, W) with ``weight`` (Cout, Cin, kd, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    _check_5d(x, "conv3d input")
    _check_5d(weight, "conv3d weight")
    if min(stride) < 1:
        raise ConfigurationError(f"stride components must be >= 1, got {stride}")
    if min(padding) < 0:
        raise ConfigurationError(f"padding must be non-negative, got {padding}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"in_channels mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}",
            axis="in_channels")
    kshape = weight.shape[2:]
    dhw = x.shape[2:]
    for ax, n, k, p in zip(_AXES, dhw, kshape, padding):
        if k > n + 2 * p:
            raise DimensionError(
                f"kernel extent {k} exceeds padded input extent {n + 2 * p} on axis {ax}", axis=ax)
    out_dhw = tuple(conv_output_size(n, k, s, p) for n, k, s, p in zip(dhw, kshape, stride, padding))

    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(
                f"bias shape {bias.shape} does not match out_channels {weight.shape[0]}",
                axis="out_channels")
        inputs.append(bias)

    xp_cl = _pad_cl(_to_cl(x.data), padding)
    out_cl = _gather(xp_cl, weight.data, stride, out_dhw)
    if bias is not None:
        out_cl += bias.data

    def rule(g):
        g_cl = _to_cl(g)
        gx = gw = None
        if x.requires_grad:
            gp = _scatter(g_cl, weight.data, stride, xp_cl.shape[1:4])
            gx = _from_cl(_crop_cl(gp, padding, dhw))
        if weight.requires_grad:
            gw = _weight_grad(xp_cl, g_cl, stride, kshape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return _result(_from_cl(out_cl), inputs, rule, "conv3d")


def conv_transpose3d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution; ``weight`` is (Cin, Cout, kd, kh, kw).

    The forward map is the adjoint of :func:`conv3d` with the same weight,
    stride and padding, taken with respect to its input.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    output_padding = _triple(output_padding, "output_padding")
    _check_5d(x, "conv_transpose3d input")
    _check_5d(weight, "conv_transpose3d weight")
    if min(stride) < 1:
        raise ConfigurationError(f"stride components must be >= 1, got {stride}")
    for ax, op, s in zip(_AXES, output_padding, stride):
        if not 0 <= op < s:
            raise ConfigurationError(
                f"output_padding {op} on axis {ax} must lie in [0, stride={s})")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"in_channels mismatch: input has {x.shape[1]}, weight expects {weight.shape[0]}",
            axis="in_channels")
    kshape = weight.shape[2:]
    dhw = x.shape[2:]
    out_dhw = tuple(conv_transpose_output_size(n, k, s, p, op)
                    for n, k, s, p, op in zip(dhw, kshape, stride, padding, output_padding))
    for ax, n in zip(_AXES, out_dhw):
        if n < 1:
            raise DimensionError(f"transposed convolution output collapses on axis {ax}", axis=ax)
    padded = tuple(n + 2 * p for n, p in zip(out_dhw, padding))

    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(
                f"bias shape {bias.shape} does not match out_channels {weight.shape[1]}",
                axis="out_channels")
        inputs.append(bias)

    x_cl = _to_cl(x.data)
    out_cl = _crop_cl(_scatter(x_cl, weight.data, stride, padded), padding, out_dhw)
    if bias is not None:
        out_cl = out_cl + bias.data

    def rule(g):
        gp_cl = _pad_cl(_to_cl(g), padding)
        gx = gw = None
        if x.requires_grad:
            gx = _from_cl(_gather(gp_cl, weight.data, stride, dhw))
        if weight.requires_grad:
            gw = _weight_grad(gp_cl, x_cl, stride, kshape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3, 4)))
        return grads

    return _result(_from_cl(out_cl), inputs, rule, "conv_transpose3d")


def _channel_view(param, ndim):
    return param.reshape((1, -1) + (1,) * (ndim - 2))


def prelu(x, slope):
    """Parametric ReLU with one learnable negative-side slope per channel (axis 1)."""
    x, slope = as_tensor(x), as_tensor(slope)
    if x.ndim < 2 or slope.shape != (x.shape[1],):
        raise DimensionError(
            f"prelu slope shape {slope.shape} must equal (channels,) for input {x.shape}",
            axis="channels")
    s = _channel_view(slope.data, x.ndim)
    positive = x.data >= 0
    out = np.where(positive, x.data, s * x.data)
    reduce_axes = tuple(i for i in range(x.ndim) if i != 1)

    def rule(g):
        gx = g * np.where(positive, 1.0, s)
        gs = (g * np.where(positive, 0.0, x.data)).sum(axis=reduce_axes)
        return gx, gs

    return _result(out, (x, slope), rule, "prelu")


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer.

    ``running_mean``/``running_var`` stay ``None`` until the first
    training-mode call.
    """

    channels: int
    eps: float = 1e-5
    momentum: float = 0.1
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    num_batches_tracked: int = 0

    @property
    def initialized(self):
        return self.running_mean is not None


def batchnorm3d(x, gamma, beta, state, training=True):
    """Per-channel batch normalisation over the N, D, H, W axes.

    Training mode normalises with the biased batch variance and updates
    ``state`` in place; eval mode uses the running statistics and leaves
    ``state`` untouched.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check_5d(x, "batchnorm3d input")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.channels != c:
        raise DimensionError(f"batchnorm parameters do not match {c} channels", axis="channels")
    axes = (0, 2, 3, 4)
    count = x.data.size // c

    if training:
        if count < 2:
            raise DimensionError(
                f"batchnorm3d in train mode needs N*D*H*W >= 2 per channel, got {count}",
                axis="spatial")
        mu = x.data.mean(axis=axes)
        var = ((x.data - _channel_view(mu, 5)) ** 2).mean(axis=axes)
        if state.running_mean is None:
            state.running_mean = np.zeros(c)
            state.running_var = np.ones(c)
        m = state.momentum
        state.running_mean = (1.0 - m) * state.running_mean + m * mu
        state.running_var = (1.0 - m) * state.running_var + m * var
        state.num_batches_tracked += 1
    else:
        if not state.initialized:
            raise RuntimeError(
                "batchnorm3d eval mode requires running statistics; run a training step first")
        mu, var = state.running_mean, state.running_var

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (x.data - _channel_view(mu, 5)) * _channel_view(inv_std, 5)
    out = xhat * _channel_view(gamma.data, 5) + _channel_view(beta.data, 5)

    def rule(g):
        gxhat = g * _channel_view(gamma.data, 5)
        if training:
            s1 = gxhat.sum(axis=axes)
            s2 = (gxhat * xhat).sum(axis=axes)
            gx = _channel_view(inv_std / count, 5) * (
                count * gxhat - _channel_view(s1, 5) - xhat * _channel_view(s2, 5))
        else:
            gx = gxhat * _channel_view(inv_std, 5)
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _result(out, (x, gamma, beta), rule, "batchnorm3d")


def sigmoid(x):
    x = as_tensor(x)
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


__all__ = [
    "Tensor", "BatchNormState", "conv3d", "conv_transpose3d", "prelu", "batchnorm3d",
    "sigmoid", "conv_output_size", "conv_transpose_output_size",
]
