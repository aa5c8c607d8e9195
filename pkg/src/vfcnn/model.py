"""The volumetric fully convolutional segmentation network.

The down path is a stack of stride-2 convolution blocks, the up path a
mirrored stack of transposed-convolution blocks; every block is
conv -> batch norm -> PReLU.  There is no pooling and no skip connection:
the up path only ever sees the bottleneck activation.  A 1x1x1 projection
and a sigmoid produce per-voxel foreground probabilities at input size.
"""
import json
import os
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import Tensor
from .errors import ConfigurationError, ShapePlanError, VfcnnError
from .ops import (BatchNormState, batchnorm3d, conv3d, conv_output_size,
                  conv_transpose3d, conv_transpose_output_size, prelu, sigmoid)
from .volume import DEFAULT_SPACING, MaskVolume

CHECKPOINT_MAGIC = b"VFCNN1"


@dataclass
class VfcnnConfig:
    in_channels: int = 1
    channels: tuple = (16, 32, 64, 128)
    kernel: int = 3
    stride: int = 2
    final_activation: str = "sigmoid"
    seed: int = 0
    prelu_init: float = 0.25
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.in_channels < 1:
            raise ConfigurationError("in_channels must be positive")
        if not self.channels or min(self.channels) < 1:
            raise ConfigurationError(f"channels must be a non-empty list of positive ints, got {self.channels}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigurationError(f"kernel must be a positive odd int, got {self.kernel}")
        if self.stride < 1:
            raise ConfigurationError(f"stride must be positive, got {self.stride}")
        if self.final_activation != "sigmoid":
            raise ConfigurationError("only the sigmoid final activation is supported")

    @property
    def padding(self):
        return (self.kernel - 1) // 2

    @property
    def stages(self):
        return len(self.channels)

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ShapeLedger:
    """Spatial (D, H, W) sizes along the down path, input first."""

    sizes: list = field(default_factory=list)

    @property
    def input(self):
        return self.sizes[0]

    @property
    def bottleneck(self):
        return self.sizes[-1]

    def __len__(self):
        return len(self.sizes)


@dataclass
class ShapePlan:
    ledger: ShapeLedger
    # one triple per up stage, in up-path order (deepest first)
    output_paddings: list


def _axis_ok(n, config):
    k, s, p = config.kernel, config.stride, config.padding
    for _ in range(config.stages):
        if n < 2 or n + 2 * p < k:
            return False
        n = conv_output_size(n, k, s, p)
    return n >= 1


def minimum_extent(config):
    """Smallest axis length that survives every down stage of ``config``."""
    n = 1
    while not _axis_ok(n, config):
        n += 1
    return n


def plan_shapes(input_dhw, config):
    """Down-path sizes plus the output paddings that make the up path land
    back on ``input_dhw`` exactly.

    Every stage needs an input extent of at least 2 on each axis so it
    actually has something to downsample.
    """
    input_dhw = tuple(int(n) for n in input_dhw)
    if len(input_dhw) != 3:
        raise ShapePlanError(f"expected a (D, H, W) triple, got {input_dhw}")
    k, s, p = config.kernel, config.stride, config.padding
    sizes = [input_dhw]
    for stage in range(config.stages):
        cur = sizes[-1]
        for axis, n in zip("DHW", cur):
            if n < 2 or n + 2 * p < k:
                minimum = minimum_extent(config)
                raise ShapePlanError(
                    f"input {input_dhw} is too small on axis {axis} for {config.stages} stages "
                    f"(stage {stage} sees extent {n}); the minimum supported size per axis "
                    f"is {minimum}", minimum=minimum)
        sizes.append(tuple(conv_output_size(n, k, s, p) for n in cur))

    paddings = []
    for i in range(config.stages, 0, -1):
        src, dst = sizes[i], sizes[i - 1]
        op = tuple(t - conv_transpose_output_size(n, k, s, p) for n, t in zip(src, dst))
        assert all(0 <= o < s for o in op), (src, dst, op)
        paddings.append(op)
    return ShapePlan(ShapeLedger(sizes), paddings)


class Vfcnn:
    """Network parameters, batch-norm state and the forward pass."""

    def __init__(self, config=None):
        self.config = config or VfcnnConfig()
        self.params = OrderedDict()
        self.bn = OrderedDict()
        self._build()

    def _build(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        k = cfg.kernel

        def uniform(shape, fan_in):
            bound = np.sqrt(1.0 / fan_in)
            return rng.uniform(-bound, bound, size=shape)

        def block(prefix, cin, cout, transposed):
            wshape = (cin, cout, k, k, k) if transposed else (cout, cin, k, k, k)
            fan = cin * k ** 3
            self._add(f"{prefix}.weight", uniform(wshape, fan))
            self._add(f"{prefix}.bias", uniform((cout,), fan))
            self._add(f"{prefix}.bn.gamma", np.ones(cout))
            self._add(f"{prefix}.bn.beta", np.zeros(cout))
            self._add(f"{prefix}.prelu", np.full(cout, cfg.prelu_init))
            self.bn[prefix] = BatchNormState(cout, eps=cfg.bn_eps, momentum=cfg.bn_momentum)

        cin = cfg.in_channels
        for i, cout in enumerate(cfg.channels):
            block(f"down{i}", cin, cout, transposed=False)
            cin = cout
        for i, cout in enumerate(reversed(cfg.channels)):
            block(f"up{i}", cin, cout, transposed=True)
            cin = cout
        self._add("head.weight", uniform((1, cin, 1, 1, 1), cin))
        self._add("head.bias", uniform((1,), cin))

    def _add(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def layer_sequence(self):
        """Names of the layer operations in forward order."""
        seq = []
        for i in range(self.config.stages):
            seq += [("conv3d", f"down{i}"), ("batchnorm3d", f"down{i}"), ("prelu", f"down{i}")]
        for i in range(self.config.stages):
            seq += [("conv_transpose3d", f"up{i}"), ("batchnorm3d", f"up{i}"), ("prelu", f"up{i}")]
        seq += [("conv3d", "head"), ("sigmoid", "head")]
        return seq

    def _block(self, x, prefix, training, transposed=False, output_padding=0):
        cfg, P = self.config, self.params
        conv = conv_transpose3d if transposed else conv3d
        kwargs = {"output_padding": output_padding} if transposed else {}
        x = conv(x, P[f"{prefix}.weight"], P[f"{prefix}.bias"],
                 stride=cfg.stride, padding=cfg.padding, **kwargs)
        x = batchnorm3d(x, P[f"{prefix}.bn.gamma"], P[f"{prefix}.bn.beta"], self.bn[prefix],
                        training=training)
        return prelu(x, P[f"{prefix}.prelu"])

    def forward(self, volume, training=True):
        """Map a (1, C, D, H, W) volume to same-size foreground probabilities."""
        x = volume if isinstance(volume, Tensor) else Tensor(volume)
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ConfigurationError(
                f"expected input (N, {self.config.in_channels}, D, H, W), got {x.shape}")
        plan = plan_shapes(x.shape[2:], self.config)
        for i in range(self.config.stages):
            x = self._block(x, f"down{i}", training)
        for i, op in enumerate(plan.output_paddings):
            x = self._block(x, f"up{i}", training, transposed=True, output_padding=op)
        x = conv3d(x, self.params["head.weight"], self.params["head.bias"])
        return sigmoid(x)

    __call__ = forward

    def state_arrays(self):
        arrays = OrderedDict((name, p.data) for name, p in self.params.items())
        for prefix, st in self.bn.items():
            if st.initialized:
                arrays[f"{prefix}.bn.running_mean"] = st.running_mean
                arrays[f"{prefix}.bn.running_var"] = st.running_var
        return arrays


def predict_mask(probabilities, threshold=0.5, spacing=DEFAULT_SPACING):
    """Binarise a probability volume; a voxel is foreground iff p >= threshold."""
    p = probabilities.data if isinstance(probabilities, Tensor) else np.asarray(probabilities)
    if p.ndim == 5:
        p = p[0, 0]
    return MaskVolume((p >= threshold).astype(np.uint8), spacing)


# Checkpoint layout (all integers little-endian):
#   6 bytes   magic "VFCNN1"
#   u32       length of the JSON metadata block, then that many UTF-8 bytes
#             ({"config": ..., "bn_tracked": {...}, "extra": {...}})
#   u32       number of arrays
#   per array: u32 name length, UTF-8 name, u32 ndim, ndim x u32 dims,
#             prod(dims) little-endian float64 values


def save_checkpoint(model, path, extra=None):
    meta = {
        "config": model.config.to_dict(),
        "bn_tracked": {k: st.num_batches_tracked for k, st in model.bn.items()},
        "extra": extra or {},
    }
    chunks = [CHECKPOINT_MAGIC]
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks += [struct.pack("<I", len(blob)), blob]
    arrays = model.state_arrays()
    chunks.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        chunks += [struct.pack("<I", len(encoded)), encoded,
                   struct.pack("<I", arr.ndim), struct.pack(f"<{arr.ndim}I", *arr.shape),
                   np.ascontiguousarray(arr, dtype="<f8").tobytes()]
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class CheckpointError(VfcnnError, ValueError):
    pass


def load_checkpoint(path):
    """Return ``(model, extra)`` restored from a VFCNN1 checkpoint."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a VFCNN1 checkpoint")
    pos = len(CHECKPOINT_MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    model = Vfcnn(VfcnnConfig.from_dict(meta["config"]))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last array")

    for name, p in model.params.items():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        if arrays[name].shape != p.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {arrays[name].shape}, config implies {p.shape}")
        p.data[...] = arrays[name]
    for prefix, st in model.bn.items():
        key = f"{prefix}.bn.running_mean"
        if key in arrays:
            st.running_mean = arrays[key].copy()
            st.running_var = arrays[f"{prefix}.bn.running_var"].copy()
        st.num_batches_tracked = int(meta["bn_tracked"].get(prefix, 0))
    return model, meta.get("extra", {})
