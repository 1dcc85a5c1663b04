"""Local Binary Pattern extraction over 3x3 neighborhoods.

Neighbor ordering is row-major from the top-left, excluding the center,
with the first neighbor in the most significant bit.  A neighbor
contributes 1 only when it is strictly greater than the center, so the
codes are invariant under any strictly increasing intensity remap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .image import GrayImage

# row-major 3x3 offsets around the center, center excluded
_OFFSETS = ((-1, -1), (-1, 0), (-1, 1),
            (0, -1), (0, 1),
            (1, -1), (1, 0), (1, 1))


@dataclass(frozen=True)
class LbpMap:
    """Per-pixel 8-bit codes with the same spatial size as the source."""

    codes: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.codes, dtype=np.uint8)
        if arr.ndim != 2 or arr.size == 0:
            raise InvalidInputError(f"LbpMap expects a 2-D code array, got {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "codes", arr)

    @property
    def height(self) -> int:
        return self.codes.shape[0]

    @property
    def width(self) -> int:
        return self.codes.shape[1]


def lbp_code(img: GrayImage, x: int, y: int) -> int:
    """LBP code at one pixel; borders use replicate padding."""
    h, w = img.height, img.width
    if not (0 <= x < w and 0 <= y < h):
        raise InvalidInputError(f"pixel ({x},{y}) outside {h}x{w} image")
    center = img.data[y, x]
    code = 0
    for dy, dx in _OFFSETS:
        ny = min(max(y + dy, 0), h - 1)
        nx = min(max(x + dx, 0), w - 1)
        code = (code << 1) | (1 if img.data[ny, nx] > center else 0)
    return code


def extract_lbp(img: GrayImage) -> LbpMap:
    """lbp_code applied at every pixel, vectorized."""
    padded = np.pad(img.data, 1, mode="edge")
    center = img.data
    codes = np.zeros(center.shape, dtype=np.uint8)
    for dy, dx in _OFFSETS:
        neighbor = padded[1 + dy:1 + dy + center.shape[0], 1 + dx:1 + dx + center.shape[1]]
        codes = (codes << 1) | (neighbor > center)
    return LbpMap(codes)


def lbp_to_image(lbp: LbpMap) -> GrayImage:
    """Codes scaled to [0,1]; invertible by rounding back to code/255."""
    return GrayImage(lbp.codes.astype(np.float32) / 255.0)


def image_to_lbp(img: GrayImage) -> LbpMap:
    """Inverse of lbp_to_image."""
    return LbpMap(np.rint(img.data * 255.0).astype(np.uint8))
