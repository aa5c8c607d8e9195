"""Synthetic atrium-like phantoms and dataset splitting.

A phantom is an ellipsoidal body with a few tubular "veins" leaving its
top (low-Z) side, cut flat by a plane near its bottom (high-Z) side.
"""
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError
from .volume import DEFAULT_SPACING, MaskVolume, Volume


@dataclass
class PhantomConfig:
    dims: tuple = (64, 64, 48)           # (W, H, Z) voxels
    center: tuple = None                 # (x, y, z) voxels; default near the middle
    semi_axes: tuple = None              # (rx, ry, rz) voxels; default scales with dims
    vein_count: int = 4
    vein_radius: tuple = (1.0, 2.0)
    vein_length: tuple = (4.0, 10.0)
    cut_fraction: float = 0.7            # bottom plane at center_z + cut_fraction * rz
    noise_sigma: float = 0.05
    contrast: float = 0.6
    background: float = 0.2
    spacing: tuple = DEFAULT_SPACING
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(v) for v in self.dims)
        w, h, z = self.dims
        if self.center is None:
            self.center = ((w - 1) / 2.0, (h - 1) / 2.0, 0.55 * (z - 1))
        if self.semi_axes is None:
            self.semi_axes = (0.28 * w, 0.25 * h, 0.3 * z)
        self.center = tuple(float(v) for v in self.center)
        self.semi_axes = tuple(float(v) for v in self.semi_axes)
        self.vein_radius = tuple(float(v) for v in self.vein_radius)
        self.vein_length = tuple(float(v) for v in self.vein_length)
        self.spacing = tuple(float(v) for v in self.spacing)
        if min(self.dims) < 1:
            raise ConfigurationError(f"dims must be positive, got {self.dims}")
        if min(self.semi_axes) < 1 or (self.vein_count > 0 and self.vein_radius[0] < 1):
            raise ConfigurationError("semi-axes and vein radii must be at least one voxel")
        if self.vein_count < 0:
            raise ConfigurationError("vein_count must be non-negative")
        for axis, c, r, n in zip("xyz", self.center, self.semi_axes, self.dims):
            if c - r < 0 or c + r > n - 1:
                raise ConfigurationError(
                    f"ellipsoid leaves the volume along {axis}: center {c}, semi-axis {r}, size {n}")

    def to_dict(self):
        return asdict(self)


def _grid(dims):
    w, h, z = dims
    zz, yy, xx = np.meshgrid(np.arange(z), np.arange(h), np.arange(w), indexing="ij")
    return xx.astype(float), yy.astype(float), zz.astype(float)


def ellipsoid_mask(dims, center, semi_axes):
    xx, yy, zz = _grid(dims)
    (cx, cy, cz), (rx, ry, rz) = center, semi_axes
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 + ((zz - cz) / rz) ** 2 <= 1.0


def _segment_distance(points, a, b):
    ab = b - a
    denom = ab @ ab
    if denom == 0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


def _vein_segments(config, rng):
    w, h, z = config.dims
    center = np.array(config.center)
    axes = np.array(config.semi_axes)
    upper = np.array([w - 1, h - 1, z - 1], dtype=float)
    segments = []
    for _ in range(config.vein_count):
        phi = rng.uniform(0.0, 2 * np.pi)
        theta = rng.uniform(np.radians(20), np.radians(50))
        radius = rng.uniform(*config.vein_radius)
        length = rng.uniform(*config.vein_length)
        direction = np.array([np.cos(phi) * np.sin(theta), np.sin(phi) * np.sin(theta), -np.cos(theta)])
        # start inside the body so the tube stays connected to it
        start = center + 0.8 * axes * direction
        # shorten rather than leave the volume
        for axis in range(3):
            d = direction[axis]
            if d > 0:
                length = min(length, (upper[axis] - radius - start[axis]) / d)
            elif d < 0:
                length = min(length, (start[axis] - radius) / -d)
        length = max(length, 0.0)
        segments.append((start, start + length * direction, radius))
    return segments


def generate_phantom(config=None):
    """Return ``(Volume, MaskVolume)`` for ``config``; deterministic per seed."""
    config = config or PhantomConfig()
    rng = np.random.default_rng(config.seed)
    mask = ellipsoid_mask(config.dims, config.center, config.semi_axes)
    xx, yy, zz = _grid(config.dims)
    points = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    for a, b, r in _vein_segments(config, rng):
        mask |= (_segment_distance(points, a, b) <= r).reshape(mask.shape)
    cut = config.center[2] + config.cut_fraction * config.semi_axes[2]
    mask &= zz <= cut

    image = config.contrast * mask + config.background
    if config.noise_sigma > 0:
        image = image + rng.normal(0.0, config.noise_sigma, size=mask.shape)
    image = np.clip(image, 0.0, 1.0)
    return Volume(image, config.spacing), MaskVolume(mask.astype(np.uint8), config.spacing)


def split_dataset(ids, n_val, seed=0):
    """Shuffle ``ids`` with ``seed`` and hold out ``n_val`` for validation."""
    ids = list(ids)
    if not 0 <= n_val < len(ids):
        raise ValueError(f"n_val must lie in [0, {len(ids)}), got {n_val}")
    order = np.random.default_rng(seed).permutation(len(ids))
    val = [ids[i] for i in order[:n_val]]
    train = [ids[i] for i in order[n_val:]]
    return train, val
