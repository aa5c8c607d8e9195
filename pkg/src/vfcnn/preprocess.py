"""Slice-wise intensity pipeline and in-plane resampling.

Each slice is min-max normalised, equalised with CLAHE, sharpened with an
unsharp-mask style high-pass blend, smoothed with a Gaussian and finally
resampled in-plane with a Catmull-Rom bicubic kernel.  Z is never
resampled.  Network probabilities go back to the original in-plane size
with the same kernel before thresholding.
"""
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .autograd import Tensor
from .errors import ConfigurationError
from .volume import DEFAULT_SPACING, MaskVolume, Volume


@dataclass
class PipelineConfig:
    clip_limit: float = 2.0
    tile_grid: tuple = (8, 8)
    nbins: int = 256
    gaussian_sigma: float = 1.0
    highpass_sigma: float = 4.0
    highpass_blend: float = 0.5
    target_size: tuple = (127, 127)
    restore_size: tuple = (640, 640)

    def __post_init__(self):
        self.tile_grid = tuple(int(v) for v in self.tile_grid)
        self.target_size = tuple(int(v) for v in self.target_size)
        self.restore_size = tuple(int(v) for v in self.restore_size)
        if self.clip_limit < 1:
            raise ConfigurationError(f"clip_limit must be >= 1, got {self.clip_limit}")
        if min(self.tile_grid) < 1:
            raise ConfigurationError(f"tile_grid must be positive, got {self.tile_grid}")
        if self.gaussian_sigma <= 0 or self.highpass_sigma <= 0:
            raise ConfigurationError("filter sigmas must be positive")
        if min(self.target_size) < 2:
            raise ConfigurationError(f"target_size must be >= 2 per axis, got {self.target_size}")

    def to_dict(self):
        return asdict(self)


@dataclass
class ClaheResult:
    image: np.ndarray
    fallback: bool = False


def _tile_edges(n, tiles):
    return np.rint(np.linspace(0, n, tiles + 1)).astype(int)


def _tile_interp(n, edges):
    """Fractional tile coordinate of every pixel plus the two bracketing
    tile indices, clamped at the outer tile centres."""
    centres = (edges[:-1] + edges[1:] - 1) / 2.0
    tiles = len(centres)
    pos = np.interp(np.arange(n), centres, np.arange(tiles)) if tiles > 1 else np.zeros(n)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, tiles - 1)
    return lo, hi, pos - lo


def clahe_slice(image, clip_limit=2.0, tile_grid=(8, 8), nbins=256, return_info=False):
    """Contrast-limited adaptive histogram equalisation of a [0, 1] slice.

    ``clip_limit`` is a multiple of the mean bin count per tile
    (``math.inf`` disables clipping).  Clipped excess is spread evenly over
    all bins.  Tile mappings are blended bilinearly between tile centres.
    Slices with fewer than two pixels per tile fall back to a single tile.
    """
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    h, w = img.shape
    ty, tx = tile_grid
    fallback = h // ty < 2 or w // tx < 2
    if fallback:
        warnings.warn(f"slice {img.shape} smaller than tile grid {tile_grid}; using one tile")
        ty = tx = 1
    bins = np.minimum((img * nbins).astype(int), nbins - 1)
    ys, xs = _tile_edges(h, ty), _tile_edges(w, tx)

    maps = np.empty((ty, tx, nbins))
    for i in range(ty):
        for j in range(tx):
            tile = bins[ys[i]:ys[i + 1], xs[j]:xs[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=nbins).astype(np.float64)
            n = tile.size
            if math.isfinite(clip_limit):
                limit = max(1.0, clip_limit * n / nbins)
                excess = np.maximum(hist - limit, 0.0).sum()
                hist = np.minimum(hist, limit) + excess / nbins
            maps[i, j] = np.cumsum(hist) / n

    y0, y1, wy = _tile_interp(h, ys)
    x0, x1, wx = _tile_interp(w, xs)
    wy, wx = wy[:, None], wx[None, :]
    r0, r1, c0, c1 = y0[:, None], y1[:, None], x0[None, :], x1[None, :]
    out = ((1 - wy) * ((1 - wx) * maps[r0, c0, bins] + wx * maps[r0, c1, bins])
           + wy * ((1 - wx) * maps[r1, c0, bins] + wx * maps[r1, c1, bins]))
    out = np.clip(out, 0.0, 1.0)
    if return_info:
        return ClaheResult(out, fallback)
    return out


def gaussian_blur_slice(image, sigma):
    """Separable Gaussian blur, kernel radius round(3 sigma), reflected borders."""
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    return ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), sigma,
                                   mode="reflect", truncate=3.0)


def highpass_blend(image, sigma=4.0, blend=0.5):
    img = np.asarray(image, dtype=np.float64)
    detail = img - gaussian_blur_slice(img, sigma)
    return np.clip(img + blend * detail, 0.0, 1.0)


def cubic_kernel(t, a=-0.5):
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2) * t3 - (a + 3) * t2 + 1
    far = a * t3 - 5 * a * t2 + 8 * a * t - 4 * a
    return np.where(t <= 1, near, np.where(t < 2, far, 0.0))


def resample_matrix(n_in, n_out, a=-0.5):
    """(n_out, n_in) bicubic interpolation weights with pixel-centre
    alignment and clamped edge indices."""
    scale = n_in / n_out
    centres = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(centres).astype(int)
    rows = np.arange(n_out)
    mat = np.zeros((n_out, n_in))
    for k in (-1, 0, 1, 2):
        src = base + k
        np.add.at(mat, (rows, np.clip(src, 0, n_in - 1)), cubic_kernel(centres - src, a))
    return mat


def bicubic_resample_slice(image, target, clip=None):
    """Resample a 2D slice to ``target`` = (rows, cols).

    The interpolation itself is linear in the input; pass ``clip=(lo, hi)``
    to clamp the overshoot of the cubic kernel.
    """
    img = np.asarray(image, dtype=np.float64)
    th, tw = (int(v) for v in target)
    if th < 2 or tw < 2:
        raise ConfigurationError(f"target must be >= 2 per axis, got {target}")
    out = resample_matrix(img.shape[0], th) @ img @ resample_matrix(img.shape[1], tw).T
    if clip is not None:
        out = np.clip(out, *clip)
    return out


@dataclass
class PreprocessInfo:
    degenerate_slices: list = field(default_factory=list)
    clahe_fallback: bool = False


def preprocess_slice(image, config):
    """Normalise, equalise, filter and downsample one slice.

    Returns ``(slice, degenerate, clahe_fallback)``.
    """
    lo, hi = float(image.min()), float(image.max())
    if not hi > lo:
        return np.zeros(config.target_size), True, False
    x = (image - lo) / (hi - lo)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        eq = clahe_slice(x, config.clip_limit, config.tile_grid, config.nbins, return_info=True)
    x = highpass_blend(eq.image, config.highpass_sigma, config.highpass_blend)
    x = np.clip(gaussian_blur_slice(x, config.gaussian_sigma), 0.0, 1.0)
    x = bicubic_resample_slice(x, config.target_size, clip=(0.0, 1.0))
    return x, False, eq.fallback


def preprocess_volume(volume, config=None, return_info=False):
    """Run the slice pipeline over a (Z, H, W) volume; returns a
    (1, 1, Z, h, w) tensor at the configured target size."""
    config = config or PipelineConfig()
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume, dtype=np.float64)
    z, h, w = data.shape
    th, tw = config.target_size
    if h < th or w < tw:
        raise ValueError(f"in-plane size {(h, w)} is smaller than the target {config.target_size}")
    out = np.empty((z, th, tw))
    info = PreprocessInfo()
    for k in range(z):
        out[k], degenerate, fallback = preprocess_slice(data[k], config)
        if degenerate:
            info.degenerate_slices.append(k)
        info.clahe_fallback |= fallback
    tensor = Tensor(out[None, None])
    return (tensor, info) if return_info else tensor


def restore_mask(prob, size=(640, 640), threshold=0.5, spacing=DEFAULT_SPACING):
    """Bicubic-upsample probabilities slice by slice, then threshold."""
    p = prob.data if isinstance(prob, Tensor) else np.asarray(prob, dtype=np.float64)
    if p.ndim == 5:
        p = p[0, 0]
    up = np.stack([bicubic_resample_slice(s, size) for s in p])
    return MaskVolume((up >= threshold).astype(np.uint8), spacing)
