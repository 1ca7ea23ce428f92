"""
plaincnn Augmentation Module
On-the-fly affine augmentation for training images: rotation, shear,
shift and zoom combined into one inverse map and resampled bilinearly,
plus the one-time intensity rescale applied at load.

There are no flip or cutout options.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from errors import InvalidParameterError, InvalidShapeError
from tensor import AUGMENT_STREAM, substream


DEFAULT_RESCALE = 1.0 / 255.0

# Numeric ranges are conventional mild values; only the on/off menu
# (rotation for mnist only, no flips, no cutout) is fixed.
AUGMENT_PRESETS = {
    "mnist": {"rotation_deg": 10.0, "use_rotation": True},
    "cifar10": {"rotation_deg": 0.0, "use_rotation": False},
    "cifar100": {"rotation_deg": 0.0, "use_rotation": False},
    "svhn": {"rotation_deg": 0.0, "use_rotation": False},
    "stl10": {"rotation_deg": 0.0, "use_rotation": False},
}

PARAM_NAMES = ("rotation", "shear", "shift_x", "shift_y", "zoom_x", "zoom_y")


@dataclass(frozen=True)
class AugmentConfig:
    rotation_deg: float = 0.0
    shear: float = 0.15
    shift_frac: float = 0.10
    zoom_delta: float = 0.10
    rescale: float = DEFAULT_RESCALE
    use_rotation: bool = False
    use_shear: bool = True
    use_shift: bool = True
    use_zoom: bool = True

    def __post_init__(self):
        if self.rotation_deg < 0 or self.shear < 0:
            raise InvalidParameterError("rotation_deg and shear must be >= 0")
        if not 0 <= self.shift_frac < 1:
            raise InvalidParameterError(f"shift_frac must be in [0, 1), got {self.shift_frac}")
        if not 0 <= self.zoom_delta < 1:
            raise InvalidParameterError(f"zoom_delta must be in [0, 1), got {self.zoom_delta}")
        if self.rescale <= 0:
            raise InvalidParameterError(f"rescale must be > 0, got {self.rescale}")

    @property
    def is_identity(self):
        return not (
            (self.use_rotation and self.rotation_deg > 0)
            or (self.use_shear and self.shear > 0)
            or (self.use_shift and self.shift_frac > 0)
            or (self.use_zoom and self.zoom_delta > 0)
        )

    def to_dict(self):
        return asdict(self)


def preset_augment_config(name, **overrides):
    """AugmentConfig for a dataset preset, with field overrides."""
    if name not in AUGMENT_PRESETS:
        raise InvalidParameterError(f"No augmentation preset for {name!r}")
    fields = dict(AUGMENT_PRESETS[name])
    fields.update(overrides)
    return AugmentConfig(**fields)


DISABLED = AugmentConfig(
    rotation_deg=0.0, shear=0.0, shift_frac=0.0, zoom_delta=0.0,
    use_rotation=False, use_shear=False, use_shift=False, use_zoom=False,
)


# ---------------------------------------------------------------------------
# Affine maps
# ---------------------------------------------------------------------------

def affine_matrix(rotation_deg, shear, shift_x_frac, shift_y_frac, zoom_x, zoom_y, width, height):
    """
    2x3 inverse map (output pixel (x, y) -> input coordinates).

    The forward transform about the image centre is
    translate . rotate . shear . scale; the inverse is built from the
    inverse factors in reverse order so the identity comes out exact.
    """
    if zoom_x <= 0 or zoom_y <= 0:
        raise InvalidParameterError(f"zoom must be > 0, got ({zoom_x}, {zoom_y})")
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    theta = math.radians(rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    tx = shift_x_frac * width
    ty = shift_y_frac * height

    to_center = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    from_center = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    inv_translate = np.array([[1.0, 0.0, -tx], [0.0, 1.0, -ty], [0.0, 0.0, 1.0]])
    inv_rotate = np.array([[cos_t, sin_t, 0.0], [-sin_t, cos_t, 0.0], [0.0, 0.0, 1.0]])
    inv_shear = np.array([[1.0, -shear, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    inv_scale = np.array([[1.0 / zoom_x, 0.0, 0.0], [0.0, 1.0 / zoom_y, 0.0], [0.0, 0.0, 1.0]])

    m = from_center @ inv_scale @ inv_shear @ inv_rotate @ inv_translate @ to_center
    return m[:2]


def compose(a, b):
    """Affine map equivalent to applying inverse map `b`, then `a`."""
    a3 = np.vstack([a, [0.0, 0.0, 1.0]])
    b3 = np.vstack([b, [0.0, 0.0, 1.0]])
    return (b3 @ a3)[:2]


def warp_image(img, affine, fill=0.0):
    """
    Resample [c,h,w] through a 2x3 inverse map with bilinear interpolation.
    Samples outside the input take `fill`.
    """
    if img.ndim != 3:
        raise InvalidShapeError(f"warp_image needs [c,h,w], got {list(img.shape)}")
    _, h, w = img.shape
    ii, jj = np.mgrid[0:h, 0:w].astype(np.float64)
    src_x = affine[0, 0] * jj + affine[0, 1] * ii + affine[0, 2]
    src_y = affine[1, 0] * jj + affine[1, 1] * ii + affine[1, 2]
    coords = np.stack([src_y, src_x])
    out = np.empty_like(img)
    for ch in range(img.shape[0]):
        out[ch] = ndimage.map_coordinates(
            img[ch], coords, order=1, mode="constant", cval=fill, prefilter=False
        )
    return out


# ---------------------------------------------------------------------------
# Random augmentation
# ---------------------------------------------------------------------------

def draw_params(config, rng):
    """Draw each enabled technique's parameter uniformly from its symmetric range."""
    params = {"rotation": 0.0, "shear": 0.0, "shift_x": 0.0, "shift_y": 0.0, "zoom_x": 1.0, "zoom_y": 1.0}
    if config.use_rotation and config.rotation_deg > 0:
        params["rotation"] = float(rng.uniform(-config.rotation_deg, config.rotation_deg))
    if config.use_shear and config.shear > 0:
        params["shear"] = float(rng.uniform(-config.shear, config.shear))
    if config.use_shift and config.shift_frac > 0:
        params["shift_x"] = float(rng.uniform(-config.shift_frac, config.shift_frac))
        params["shift_y"] = float(rng.uniform(-config.shift_frac, config.shift_frac))
    if config.use_zoom and config.zoom_delta > 0:
        params["zoom_x"] = float(rng.uniform(1 - config.zoom_delta, 1 + config.zoom_delta))
        params["zoom_y"] = float(rng.uniform(1 - config.zoom_delta, 1 + config.zoom_delta))
    return params


def random_augment(img, label, config, rng, return_params=False):
    """
    Augment one [c,h,w] image. The label passes through untouched.
    With return_params=True also returns the drawn parameters.
    """
    params = draw_params(config, rng)
    if config.is_identity:
        out = img.copy()
    else:
        _, h, w = img.shape
        affine = affine_matrix(
            params["rotation"], params["shear"], params["shift_x"], params["shift_y"],
            params["zoom_x"], params["zoom_y"], w, h,
        )
        out = warp_image(img, affine, fill=0.0)
    if return_params:
        return out, label, params
    return out, label


def augment_batch(images, indices, config, seed, epoch, workers=0):
    """
    Augment a [b,c,h,w] batch. Sample k uses the (seed, epoch, indices[k])
    substream, so the result does not depend on how work is scheduled.
    """
    if config.is_identity:
        return images

    def one(k):
        rng = substream(seed, epoch, int(indices[k]), stream=AUGMENT_STREAM)
        return random_augment(images[k], None, config, rng)[0]

    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = list(pool.map(one, range(len(images))))
    else:
        out = [one(k) for k in range(len(images))]
    return np.stack(out).astype(images.dtype, copy=False)


def rescale(img, factor):
    """Multiply every element by factor (applied once, at load)."""
    if factor <= 0:
        raise InvalidParameterError(f"rescale factor must be > 0, got {factor}")
    return img * np.asarray(factor, dtype=img.dtype if img.dtype.kind == "f" else np.float32)
