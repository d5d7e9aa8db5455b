# imgcore.py
"""
Image representation, gamma conversions, geometric preprocessing and PSNR.

Images are H×W×3 float64 arrays in [0, 1]. Two wrappers tell the domains
apart: `EncodedImage` holds display-referred (gamma-encoded) values as stored
in PNG/JPEG files, `LinearImage` holds linear light. Quantisation to 8 bits
happens only in `read_png` / `write_png`.

Gamma convention
    A single decoding exponent g (default 2.2) is used:
        linear  = encoded ** g
        encoded = linear ** (1 / g)
    Written as X = (X')^(1/γ) this is γ = 1/g; only g is exposed.

Bilinear resampling (corner aligned)
    For an input of size H×W and output H'×W', output row i samples source
    coordinate
        y(i) = i · (H − 1) / (H' − 1)      if H' > 1
        y(i) = (H − 1) / 2                 if H' = 1
    (columns likewise). With y0 = floor(y), y1 = min(y0 + 1, H − 1),
    wy = y − y0 and the same for x:
        out = (1−wy)(1−wx)·I[y0,x0] + (1−wy)·wx·I[y0,x1]
            + wy·(1−wx)·I[y1,x0]   + wy·wx·I[y1,x1]
    Corner pixels map onto corner pixels; constants stay constant.

Random crops
    `crop_random` draws its offsets from `np.random.default_rng(seed)`:
        top  = rng.integers(0, H − crop_h + 1)
        left = rng.integers(0, W − crop_w + 1)
    in that order, so a crop is a pure function of (image, dims, seed).
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, TypeVar, Union

import numpy as np
from PIL import Image
from scipy import ndimage

from src.core.errors import InvalidArgumentError, InvalidInputError
from src.core.fileio import atomic_write_bytes

ImageT = TypeVar("ImageT", bound="RGBImage")
ArrayOrImage = Union["RGBImage", np.ndarray]


@dataclass(frozen=True)
class GammaParam:
    gamma: float = 2.2

    def __post_init__(self):
        if not math.isfinite(self.gamma) or self.gamma <= 0:
            raise InvalidArgumentError(f"gamma must be a positive finite number, got {self.gamma}")


@dataclass(frozen=True, eq=False)
class RGBImage:
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise InvalidArgumentError(f"expected an H×W×3 array, got shape {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvalidArgumentError(f"image dimensions must be >= 1, got {arr.shape[:2]}")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape


class EncodedImage(RGBImage):
    """Gamma-encoded (display-referred) pixels."""


class LinearImage(RGBImage):
    """Linear-light pixels."""


def _check_finite(img: RGBImage) -> None:
    if not np.all(np.isfinite(img.data)):
        raise InvalidInputError("image contains non-finite pixel values")


def _as_array(img: ArrayOrImage) -> np.ndarray:
    return img.data if isinstance(img, RGBImage) else np.asarray(img, dtype=np.float64)


# ---------------- GAMMA ----------------
def decode_gamma(img: EncodedImage, g: GammaParam = GammaParam()) -> LinearImage:
    _check_finite(img)
    return LinearImage(np.clip(np.power(np.clip(img.data, 0.0, 1.0), g.gamma), 0.0, 1.0))


def encode_gamma(img: LinearImage, g: GammaParam = GammaParam()) -> EncodedImage:
    _check_finite(img)
    return EncodedImage(np.clip(np.power(np.clip(img.data, 0.0, 1.0), 1.0 / g.gamma), 0.0, 1.0))


# ---------------- GEOMETRY ----------------
def _sample_coords(src: int, dst: int) -> np.ndarray:
    if dst == 1:
        return np.array([(src - 1) / 2.0])
    return np.arange(dst, dtype=np.float64) * ((src - 1) / (dst - 1))


def resize_bilinear(img: ImageT, new_height: int, new_width: int) -> ImageT:
    if new_height < 1 or new_width < 1:
        raise InvalidArgumentError(f"target size must be >= 1, got {new_height}x{new_width}")
    if (new_height, new_width) == (img.height, img.width):
        return type(img)(img.data.copy())

    ys = _sample_coords(img.height, new_height)
    xs = _sample_coords(img.width, new_width)
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((new_height, new_width, 3), dtype=np.float64)
    for c in range(3):
        # order=1 is exactly the bilinear formula above; coordinates never leave the grid
        out[:, :, c] = ndimage.map_coordinates(img.data[:, :, c], [grid_y, grid_x], order=1, mode="nearest")
    return type(img)(out)


def crop_offsets(height: int, width: int, crop_h: int, crop_w: int, seed: int) -> Tuple[int, int]:
    if crop_h < 1 or crop_w < 1:
        raise InvalidArgumentError(f"crop size must be >= 1, got {crop_h}x{crop_w}")
    if crop_h > height or crop_w > width:
        raise InvalidArgumentError(f"crop {crop_h}x{crop_w} does not fit into {height}x{width}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, height - crop_h + 1))
    left = int(rng.integers(0, width - crop_w + 1))
    return top, left


def crop_random(img: ImageT, crop_h: int, crop_w: int, seed: int) -> ImageT:
    top, left = crop_offsets(img.height, img.width, crop_h, crop_w, seed)
    return type(img)(img.data[top:top + crop_h, left:left + crop_w, :].copy())


# ---------------- METRIC ----------------
def psnr(a: ArrayOrImage, b: ArrayOrImage, peak: float = 1.0) -> float:
    """10·log10(peak² / MSE); identical inputs give math.inf."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"shape mismatch: {x.shape} vs {y.shape}")
    mse = float(np.mean(np.square(x - y)))
    if mse == 0.0:
        return math.inf
    return float(10.0 * np.log10(peak * peak / mse))


# ---------------- PNG ----------------
def read_png(path: Path) -> EncodedImage:
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    return EncodedImage(rgb / 255.0)


def quantize(img: ArrayOrImage) -> np.ndarray:
    # half-up rounding onto 256 levels
    return np.floor(np.clip(_as_array(img), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(img: ArrayOrImage, path: Path) -> Path:
    buf = io.BytesIO()
    Image.fromarray(quantize(img), mode="RGB").save(buf, format="PNG")
    return atomic_write_bytes(Path(path), buf.getvalue())


# ---------------- TENSOR BRIDGE ----------------
def image_to_tensor(img: RGBImage) -> np.ndarray:
    """H×W×3 image → 1×3×H×W array."""
    return np.ascontiguousarray(img.data.transpose(2, 0, 1)[None, ...])


def tensor_to_image(values: np.ndarray, index: int = 0) -> EncodedImage:
    """N×3×H×W array → clamped image (export-only clamp)."""
    if values.ndim != 4 or values.shape[1] != 3:
        raise InvalidArgumentError(f"expected N×3×H×W values, got shape {values.shape}")
    return EncodedImage(np.clip(values[index].transpose(1, 2, 0), 0.0, 1.0))


# ---------------- LAYERS ----------------
def restore_transmission(t_prime: EncodedImage, alpha: float, g: GammaParam = GammaParam()) -> EncodedImage:
    """Undo the glass attenuation: T = T' / α in linear light."""
    if not 0.0 < alpha <= 1.0:
        raise InvalidArgumentError(f"alpha must be in (0, 1], got {alpha}")
    linear = decode_gamma(t_prime, g)
    return encode_gamma(LinearImage(np.clip(linear.data / alpha, 0.0, 1.0)), g)


def estimate_reflection(mixture: EncodedImage, t_prime: EncodedImage) -> EncodedImage:
    """Residual layer R' = I − T', clamped."""
    if mixture.shape != t_prime.shape:
        raise InvalidArgumentError(f"shape mismatch: {mixture.shape} vs {t_prime.shape}")
    return EncodedImage(np.clip(mixture.data - t_prime.data, 0.0, 1.0))

