"""Image containers, color conversion, Gaussian kernels and 2-D convolution.

Pixel intensities live in [0, 1] single precision everywhere inside the
package; 8-bit quantization happens only when reading or writing files.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidInputError, InvalidParameterError, ShapeError

# ITU-R BT.601 luminance weights
_LUMA_R = 0.299
_LUMA_G = 0.587
_LUMA_B = 0.114


def _validate_pixels(data: np.ndarray, ndim: int, what: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != ndim:
        raise InvalidInputError(f"{what} expects a {ndim}-D array, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidInputError(f"{what} must not be empty")
    if not np.isfinite(arr).all():
        raise InvalidInputError(f"{what} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidInputError(f"{what} intensities must lie in [0, 1]")
    arr = np.ascontiguousarray(arr)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GrayImage:
    """Single-channel raster, shape (H, W), float32 in [0, 1], immutable."""

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _validate_pixels(self.data, 2, "GrayImage"))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class RgbImage:
    """Three-channel raster, shape (H, W, 3), float32 in [0, 1], immutable."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise InvalidInputError(f"RgbImage expects shape (H, W, 3), got {arr.shape}")
        object.__setattr__(self, "data", _validate_pixels(arr, 3, "RgbImage"))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Kernel:
    """Square (2r+1)x(2r+1) convolution window whose weights sum to 1.

    Weights are double precision so normalization holds to 1e-9; the
    convolution itself runs in single precision like the pixel domain.
    """

    radius: int
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        side = 2 * self.radius + 1
        if self.radius < 1:
            raise InvalidParameterError(f"kernel radius must be >= 1, got {self.radius}")
        if w.shape != (side, side):
            raise ShapeError("kernel weights shape mismatch", w.shape, (side, side))
        w = np.ascontiguousarray(w)
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)


def to_grayscale(img: RgbImage) -> GrayImage:
    """BT.601 luminance: 0.299 R + 0.587 G + 0.114 B."""
    lum = (_LUMA_R * img.data[:, :, 0]
           + _LUMA_G * img.data[:, :, 1]
           + _LUMA_B * img.data[:, :, 2])
    return GrayImage(np.clip(lum, 0.0, 1.0))


def gray_to_rgb(img: GrayImage) -> RgbImage:
    """Replicate a single channel into an RGB raster."""
    return RgbImage(np.repeat(img.data[:, :, None], 3, axis=2))


def gaussian_kernel(sigma: float, radius: int | None = None) -> Kernel:
    """Sampled isotropic Gaussian, renormalized so the weights sum to 1.

    The default radius ceil(3*sigma) captures more than 99% of the mass.
    """
    if sigma <= 0.0:
        raise InvalidParameterError(f"sigma must be positive, got {sigma}")
    if radius is None:
        radius = max(1, math.ceil(3.0 * sigma))
    if radius < 1:
        raise InvalidParameterError(f"radius must be >= 1, got {radius}")
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    xx, yy = np.meshgrid(ax, ax)
    w = np.exp(-(xx * xx + yy * yy) / (2.0 * sigma * sigma)) / (2.0 * np.pi * sigma * sigma)
    w /= w.sum()
    return Kernel(radius=radius, weights=w)


def convolve(img: GrayImage, kernel: Kernel) -> GrayImage:
    """Same-size 2-D convolution with replicate border padding."""
    out = convolve_raw(img.data, kernel)
    # a normalized non-negative kernel keeps values in [0,1] up to rounding
    return GrayImage(np.clip(out, 0.0, 1.0))


def convolve_raw(data: np.ndarray, kernel: Kernel) -> np.ndarray:
    """convolve() without the [0,1] container contract; used on raw rasters."""
    r = kernel.radius
    padded = np.pad(data, r, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel.weights.shape)
    # centrally symmetric kernel: correlation equals convolution
    weights = kernel.weights.astype(data.dtype, copy=False)
    return np.einsum("ijkl,kl->ij", windows, weights)


# ---------------------------------------------------------------------------
# File I/O: 8-bit PNG via Pillow, PGM/PPM natively.
# ---------------------------------------------------------------------------

def _quantize(data: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(data * 255.0), 0, 255).astype(np.uint8)


def save_image(img: GrayImage | RgbImage, path: str | os.PathLike) -> None:
    path = os.fspath(path)
    gray = isinstance(img, GrayImage)
    raw = _quantize(img.data)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pgm":
        if not gray:
            raw = _quantize(to_grayscale(img).data)
        _write_pnm(path, raw, b"P5")
    elif ext == ".ppm":
        if gray:
            raw = np.repeat(raw[:, :, None], 3, axis=2)
        _write_pnm(path, raw, b"P6")
    elif ext == ".png":
        from PIL import Image

        Image.fromarray(raw, mode="L" if gray else "RGB").save(path, format="PNG")
    else:
        raise InvalidParameterError(f"unsupported image extension: {path}")


def load_rgb(path: str | os.PathLike) -> RgbImage:
    raw = _load_raw(path)
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    return RgbImage(raw.astype(np.float32) / 255.0)


def load_gray(path: str | os.PathLike) -> GrayImage:
    raw = _load_raw(path)
    if raw.ndim == 3:
        return to_grayscale(RgbImage(raw.astype(np.float32) / 255.0))
    return GrayImage(raw.astype(np.float32) / 255.0)


def _load_raw(path: str | os.PathLike) -> np.ndarray:
    path = os.fspath(path)
    ext = os.path.splitext(path)[1].lower()
    if ext in (".pgm", ".ppm"):
        return _read_pnm(path)
    if ext == ".png":
        from PIL import Image

        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB")
            return np.asarray(im)
    raise InvalidParameterError(f"unsupported image extension: {path}")


def _write_pnm(path: str, raw: np.ndarray, magic: bytes) -> None:
    h, w = raw.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(raw.tobytes())


def _read_pnm(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields: list[bytes] = []
    pos = 0
    # header = magic, width, height, maxval; '#' starts a comment
    while len(fields) < 4 and pos < len(blob):
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if len(fields) < 4:
        raise FormatError(f"truncated PNM header in {path}")
    magic, width, height, maxval = fields
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r} in {path}")
    try:
        w, h, mx = int(width), int(height), int(maxval)
    except ValueError as exc:
        raise FormatError(f"malformed PNM header in {path}") from exc
    if mx != 255:
        raise FormatError(f"only maxval 255 PNM supported, got {mx}")
    pos += 1  # single whitespace after maxval
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    body = blob[pos:pos + need]
    if len(body) != need:
        raise FormatError(f"truncated PNM pixel data in {path}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((h, w) if channels == 1 else (h, w, 3))
