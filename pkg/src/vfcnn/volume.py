"""Volume containers and the VOLR1 detached-header file format.

A VOLR1 volume is two files: a small text header and a raw payload::

    VOLR1
    dims = 24 24 16
    spacing = 0.625 0.625 0.625
    dtype = f64
    endian = little
    binary = 0
    payload = case000.raw

``dims`` is (W, H, Z) and the payload is row-major with X varying fastest,
so it maps onto a numpy array of shape (Z, H, W).  ``spacing`` is in mm in
the same (x, y, z) order.  ``dtype`` is one of u8, u16, f32, f64; integer
payloads are rescaled to [0, 1] by the dtype maximum on read, except mask
files (``binary = 1``, always u8) which hold 0/1 directly.  The payload
path is relative to the header's directory.
"""
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import VfcnnError

MAGIC = "VOLR1"
DEFAULT_SPACING = (0.625, 0.625, 0.625)
_DTYPES = {"u8": "<u1", "u16": "<u2", "f32": "<f4", "f64": "<f8"}
_INT_MAX = {"u8": 255, "u16": 65535}


class VolumeFormatError(VfcnnError, ValueError):
    pass


class MagicError(VolumeFormatError):
    pass


class SizeMismatchError(VolumeFormatError):
    pass


class UnsupportedDtypeError(VolumeFormatError):
    pass


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or min(spacing) <= 0:
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    return spacing


@dataclass
class Volume:
    """Scalar 3D field stored as a (Z, H, W) float64 array.

    ``spacing`` is (x, y, z) in mm.
    """

    data: np.ndarray
    spacing: tuple = DEFAULT_SPACING

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D (Z, H, W), got {self.data.shape}")
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self):
        z, h, w = self.data.shape
        return (w, h, z)

    @property
    def spacing_zyx(self):
        return self.spacing[::-1]


@dataclass
class MaskVolume:
    """Binary 3D field, (Z, H, W) uint8 with values in {0, 1}."""

    data: np.ndarray
    spacing: tuple = DEFAULT_SPACING

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask data must be 3-D (Z, H, W), got {data.shape}")
        if not np.isin(data, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        self.data = np.ascontiguousarray(data, dtype=np.uint8)
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self):
        z, h, w = self.data.shape
        return (w, h, z)

    @property
    def spacing_zyx(self):
        return self.spacing[::-1]

    @property
    def count(self):
        return int(self.data.sum())


def _payload_path(header_path):
    root, _ = os.path.splitext(header_path)
    return root + ".raw"


def _atomic_write(path, blob, mode="wb"):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_payload(data, dtype):
    if dtype not in _DTYPES:
        raise UnsupportedDtypeError(f"unsupported dtype {dtype!r}; expected one of {sorted(_DTYPES)}")
    if dtype in _INT_MAX:
        top = _INT_MAX[dtype]
        data = np.rint(np.clip(data, 0.0, 1.0) * top)
    return np.ascontiguousarray(data, dtype=_DTYPES[dtype]).tobytes()


def write_volume(volume, path, dtype=None):
    """Write ``volume`` as ``path`` (header) plus a sibling ``.raw`` payload.

    Masks are always stored as binary u8; volumes default to f64.
    """
    is_mask = isinstance(volume, MaskVolume)
    if is_mask:
        dtype = "u8"
        payload = np.ascontiguousarray(volume.data, dtype="<u1").tobytes()
    else:
        dtype = dtype or "f64"
        payload = encode_payload(volume.data, dtype)
    payload_path = _payload_path(path)
    w, h, z = volume.dims
    header = "\n".join([
        MAGIC,
        f"dims = {w} {h} {z}",
        "spacing = " + " ".join(repr(float(s)) for s in volume.spacing),
        f"dtype = {dtype}",
        "endian = little",
        f"binary = {int(is_mask)}",
        f"payload = {os.path.basename(payload_path)}",
    ]) + "\n"
    _atomic_write(payload_path, payload)
    _atomic_write(path, header.encode("ascii"))


def read_header(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError:
        raise MagicError(f"{path}: not a {MAGIC} header")
    lines = text.splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise MagicError(f"{path}: bad magic, expected {MAGIC!r}")
    fields = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise VolumeFormatError(f"{path}: malformed header line {line!r}")
        fields[key.strip()] = value.strip()
    for key in ("dims", "spacing", "dtype"):
        if key not in fields:
            raise VolumeFormatError(f"{path}: header missing {key!r}")
    if fields["dtype"] not in _DTYPES:
        raise UnsupportedDtypeError(f"{path}: unsupported dtype {fields['dtype']!r}")
    if fields.get("endian", "little") != "little":
        raise VolumeFormatError(f"{path}: only little-endian payloads are supported")
    return {
        "dims": tuple(int(v) for v in fields["dims"].split()),
        "spacing": tuple(float(v) for v in fields["spacing"].split()),
        "dtype": fields["dtype"],
        "binary": fields.get("binary", "0") == "1",
        "payload": fields.get("payload", os.path.basename(_payload_path(path))),
    }


def read_volume(path):
    """Read a VOLR1 header and its payload; returns a Volume or MaskVolume."""
    header = read_header(path)
    w, h, z = header["dims"]
    dtype = header["dtype"]
    payload = os.path.join(os.path.dirname(os.path.abspath(path)), header["payload"])
    with open(payload, "rb") as fh:
        blob = fh.read()
    expected = w * h * z * np.dtype(_DTYPES[dtype]).itemsize
    if len(blob) != expected:
        raise SizeMismatchError(
            f"{payload}: payload has {len(blob)} bytes, header implies {expected}")
    arr = np.frombuffer(blob, dtype=_DTYPES[dtype]).reshape(z, h, w)
    if header["binary"]:
        if dtype != "u8":
            raise VolumeFormatError(f"{path}: binary masks must be u8")
        return MaskVolume(arr.copy(), header["spacing"])
    if dtype in _INT_MAX:
        data = arr.astype(np.float64) / _INT_MAX[dtype]
    else:
        data = arr.astype(np.float64)
    return Volume(data, header["spacing"])
