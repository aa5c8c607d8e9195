"""Training loss and segmentation evaluation metrics.

The loss mixes a voxelwise squared error with a slice-averaged soft Dice
term.  Evaluation uses the hard Dice overlap (whole volume and per
anatomical third along Z) and the Hausdorff distance between voxel
boundary surfaces, reported in mm.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .autograd import Tensor, as_tensor
from .errors import ConfigurationError, DimensionError
from .volume import MaskVolume

REGIONS = ("top", "mid", "bottom")


@dataclass
class LossConfig:
    lam: float = 1e-3
    eps: float = 1e-6
    dice_sign: str = "subtract"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be non-negative, got {self.lam}")
        if self.eps < 0:
            raise ConfigurationError(f"eps must be non-negative, got {self.eps}")
        if self.dice_sign not in ("subtract", "literal"):
            raise ConfigurationError(f"dice_sign must be 'subtract' or 'literal', got {self.dice_sign!r}")


@dataclass
class LossTerms:
    loss: Tensor
    mse: float
    dice: float


def _target_array(target):
    if isinstance(target, MaskVolume):
        return target.data.astype(np.float64)
    if isinstance(target, Tensor):
        return target.data
    return np.asarray(target, dtype=np.float64)


def combined_loss(pred, target, config=None, return_terms=False):
    """MSE plus lambda-weighted slice-wise soft Dice.

    ``pred`` is a (1, 1, Z, H, W) probability tensor; ``target`` a binary
    mask of shape (Z, H, W) or (1, 1, Z, H, W).  With ``dice_sign`` =
    ``"subtract"`` the Dice part enters as ``lam * (1 - mean Dice)``; with
    ``"literal"`` as ``lam * mean Dice``.
    """
    config = config or LossConfig()
    pred = as_tensor(pred)
    y = _target_array(target)
    if y.ndim == 3:
        y = y[None, None]
    if y.shape != pred.shape:
        raise DimensionError(f"prediction {pred.shape} and target {y.shape} differ", axis="shape")
    if pred.ndim != 5:
        raise DimensionError(f"prediction must be (N, C, Z, H, W), got {pred.shape}", axis="ndim")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("target must be binary")

    y_t = Tensor(y)
    diff = pred - y_t
    mse = (diff * diff).mean()

    slice_axes = (0, 1, 3, 4)
    inter = (pred * y_t).sum(axis=slice_axes)
    denom = pred.sum(axis=slice_axes) + y.sum(axis=slice_axes)
    dsc = (inter * 2.0 + config.eps) / (denom + config.eps)
    mean_dsc = dsc.mean()
    if config.dice_sign == "subtract":
        loss = mse + (1.0 - mean_dsc) * config.lam
    else:
        loss = mse + mean_dsc * config.lam
    if return_terms:
        return LossTerms(loss, mse.item(), mean_dsc.item())
    return loss


def _binary(mask):
    arr = mask.data if isinstance(mask, MaskVolume) else np.asarray(mask)
    return arr.astype(bool)


def dice_metric(a, b):
    """Hard Dice overlap; 1.0 when both masks are empty."""
    a, b = _binary(a), _binary(b)
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}", axis="shape")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def region_bounds(gt):
    """Split the Z extent occupied by ``gt`` into (top, mid, bottom) slice
    ranges; leftover slices go to the middle.  Top is the low-Z end."""
    occupied = np.flatnonzero(_binary(gt).reshape(_binary(gt).shape[0], -1).any(axis=1))
    if occupied.size == 0:
        raise ValueError("ground truth is empty; regional Dice needs a foreground extent")
    z0, z1 = int(occupied[0]), int(occupied[-1])
    length = z1 - z0 + 1
    third = length // 3
    mid = length - 2 * third
    return {
        "top": range(z0, z0 + third),
        "mid": range(z0 + third, z0 + third + mid),
        "bottom": range(z0 + third + mid, z1 + 1),
    }


def regional_dice(pred, gt):
    """Per-region slice-wise Dice as ``{region: (mean, sd)}``.

    Slices empty in both masks are skipped; sd is the population value.
    A region with no usable slice reports ``(nan, nan)``.
    """
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}", axis="shape")
    out = {}
    for name, zs in region_bounds(g).items():
        scores = [dice_metric(p[z], g[z]) for z in zs if p[z].any() or g[z].any()]
        if scores:
            out[name] = (float(np.mean(scores)), float(np.std(scores)))
        else:
            out[name] = (math.nan, math.nan)
    return out


def extract_surface(mask, spacing=(1.0, 1.0, 1.0)):
    """Boundary voxel centres in mm, as an (n, 3) array.

    A foreground voxel is on the boundary if any of its six face
    neighbours is background or lies outside the array.  ``spacing`` is
    given per array axis.
    """
    m = _binary(mask)
    padded = np.pad(m, 1)
    interior = m.copy()
    for axis in range(m.ndim):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    idx = np.argwhere(m & ~interior)
    return idx.astype(np.float64) * np.asarray(spacing, dtype=np.float64)


def _sq_dist(a, b):
    d0 = a[:, None, 0] - b[None, :, 0]
    d1 = a[:, None, 1] - b[None, :, 1]
    d2 = a[:, None, 2] - b[None, :, 2]
    return d0 * d0 + d1 * d1 + d2 * d2


def directed_hausdorff(source, target, method="brute", chunk=2048):
    """max over ``source`` points of the distance to the nearest ``target`` point.

    ``method="kdtree"`` finds nearest neighbours with a k-d tree, then
    re-measures each matched pair with the same arithmetic as the brute
    force path, so both methods agree bit for bit.
    """
    source = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(source) == 0 or len(target) == 0:
        raise ValueError("Hausdorff distance is undefined for an empty surface")
    if method == "brute":
        worst = 0.0
        for start in range(0, len(source), chunk):
            block = source[start:start + chunk]
            worst = max(worst, float(_sq_dist(block, target).min(axis=1).max()))
        return math.sqrt(worst)
    if method == "kdtree":
        _, nearest = cKDTree(target).query(source, k=1)
        matched = target[nearest]
        d = source - matched
        sq = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
        return math.sqrt(float(sq.max()))
    raise ValueError(f"unknown method {method!r}")


def hausdorff(a, b, method="brute"):
    return max(directed_hausdorff(a, b, method), directed_hausdorff(b, a, method))


def _pct(x):
    return "  n/a " if math.isnan(x) else f"{100.0 * x:.2f}"


@dataclass
class EvalReport:
    """Dice and Hausdorff summary for one predicted volume."""

    regions: dict
    dice: float
    hd_directed: float
    hd_symmetric: float

    def format_region(self, name):
        mean, sd = self.regions[name]
        return f"{_pct(mean)} ({_pct(sd)})"

    def to_text(self, label="1"):
        head = ["", "TOP", "MID", "BOTTOM", "3D", "3D"]
        sub = ["Case", "DM (%)", "DM (%)", "DM (%)", "DM (%)", "HD (mm)"]
        row = [label] + [self.format_region(r) for r in REGIONS] + [
            _pct(self.dice), f"{self.hd_directed:.2f}"]
        widths = [max(len(a), len(b), len(c)) for a, b, c in zip(head, sub, row)]
        lines = [" | ".join(s.ljust(w) for s, w in zip(line, widths)) for line in (head, sub, row)]
        lines.insert(2, "-+-".join("-" * w for w in widths))
        lines.append(f"symmetric HD (mm): {self.hd_symmetric:.2f}")
        return "\n".join(lines) + "\n"

    def to_kv(self):
        """``key=value`` lines; fractions in [0, 1], distances in mm."""
        items = []
        for r in REGIONS:
            items.append((f"dice_{r}_mean", self.regions[r][0]))
            items.append((f"dice_{r}_sd", self.regions[r][1]))
        items += [("dice_whole", self.dice), ("hd_directed_mm", self.hd_directed),
                  ("hd_symmetric_mm", self.hd_symmetric)]
        return "".join(f"{k}={v!r}\n" for k, v in items)

    @classmethod
    def from_kv(cls, text):
        vals = {}
        for line in text.splitlines():
            if line.strip():
                k, _, v = line.partition("=")
                vals[k.strip()] = float(v)
        regions = {r: (vals[f"dice_{r}_mean"], vals[f"dice_{r}_sd"]) for r in REGIONS}
        return cls(regions, vals["dice_whole"], vals["hd_directed_mm"], vals["hd_symmetric_mm"])


def evaluate(pred, gt, spacing=None):
    """Full report for ``pred`` against ground truth ``gt``.

    The directed distance runs from the ground-truth surface to the
    prediction.  ``spacing`` defaults to the ground truth's (x, y, z) mm.
    """
    p, g = _binary(pred), _binary(gt)
    if p.shape != g.shape:
        raise DimensionError(f"mask shapes differ: {p.shape} vs {g.shape}", axis="shape")
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, MaskVolume) else (1.0, 1.0, 1.0)
    zyx = tuple(spacing)[::-1]
    s_gt, s_pred = extract_surface(g, zyx), extract_surface(p, zyx)
    if len(s_pred) == 0:
        hd_dir = hd_sym = math.inf
    else:
        hd_dir = directed_hausdorff(s_gt, s_pred, method="kdtree")
        hd_sym = max(hd_dir, directed_hausdorff(s_pred, s_gt, method="kdtree"))
    return EvalReport(regional_dice(p, g), dice_metric(p, g), hd_dir, hd_sym)
