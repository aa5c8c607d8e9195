from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError
from .volume import MaskVolume, Volume


@dataclass
class AugmentConfig:
    p_flip_h: float = 0.5
    p_flip_v: float = 0.5
    max_translate: int = 10
    seed: int = 0

    def __post_init__(self):
        for name in ("p_flip_h", "p_flip_v"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {p}")
        if int(self.max_translate) != self.max_translate or self.max_translate < 0:
            raise ConfigurationError("max_translate must be a non-negative integer")
        self.max_translate = int(self.max_translate)

    def to_dict(self):
        return asdict(self)


@dataclass
class Transform:
    flip_v: bool
    flip_h: bool
    shift: tuple


def sample_transform(config, rng):
    # always consume the same number of draws so streams stay aligned
    flip_v = bool(rng.random() < config.p_flip_v)
    flip_h = bool(rng.random() < config.p_flip_h)
    m = config.max_translate
    dy, dx = (int(v) for v in rng.integers(-m, m + 1, size=2))
    return Transform(flip_v, flip_h, (dy, dx))


def translate(stack, dy, dx, fill=0):
    """Integer in-plane shift of a (..., H, W) array, filling vacated pixels."""
    out = np.full_like(stack, fill)
    h, w = stack.shape[-2:]
    if abs(dy) >= h or abs(dx) >= w:
        return out
    src_y = slice(max(0, -dy), h - max(0, dy))
    dst_y = slice(max(0, dy), h - max(0, -dy))
    src_x = slice(max(0, -dx), w - max(0, dx))
    dst_x = slice(max(0, dx), w - max(0, -dx))
    out[..., dst_y, dst_x] = stack[..., src_y, src_x]
    return out


def apply_transform(stack, t, fill=0):
    if t.flip_v:
        stack = stack[..., ::-1, :]
    if t.flip_h:
        stack = stack[..., :, ::-1]
    return translate(np.ascontiguousarray(stack), *t.shift, fill=fill)


def augment_pair(image, mask, config, rng):
    """Apply one random flip/translation, shared by every slice, to an
    image stack and its mask.  Accepts arrays or Volume/MaskVolume."""
    img = image.data if isinstance(image, Volume) else np.asarray(image)
    msk = mask.data if isinstance(mask, MaskVolume) else np.asarray(mask)
    if img.shape != msk.shape:
        raise ValueError(f"image {img.shape} and mask {msk.shape} differ")
    t = sample_transform(config, rng)
    img_out = apply_transform(img, t, fill=0)
    msk_out = apply_transform(msk, t, fill=0)
    if isinstance(image, Volume):
        img_out = Volume(img_out, image.spacing)
    if isinstance(mask, MaskVolume):
        msk_out = MaskVolume(msk_out, mask.spacing)
    return img_out, msk_out
