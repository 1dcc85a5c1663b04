"""SIFT keypoint detection, descriptor generation, and ratio-test matching.

Deliberately simpler than production SIFT so every stage stays
oracle-checkable: no initial 2x upsampling, no sub-pixel refinement,
integer-grid extrema, a single dominant orientation per keypoint, and
descriptor binning without trilinear interpolation.  Pipelines that only
care about where keypoints land and what their descriptors look like get
bit-deterministic output.
"""

from __future__ import annotations

import io
import os
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateInputWarning,
    FormatError,
    InvalidInputError,
    InvalidParameterError,
)
from .image import GrayImage, gaussian_kernel, convolve

DESCRIPTOR_SIZE = 128
_ORI_BINS = 36
_ORI_SIGMA_FACTOR = 1.5
_DESC_WINDOW = 16          # window side in pixels
_DESC_CELLS = 4            # 4x4 spatial cells
_DESC_ORI_BINS = 8
_DESC_CLAMP = 0.2
# half diagonal of the rotated 16x16 window plus one pixel of bilinear slack
_DESC_MARGIN = 12
_MIN_OCTAVE_DIM = 8

_SFT_MAGIC = b"SFT1"


@dataclass(frozen=True)
class SiftParams:
    octaves: int = 3
    scales_per_octave: int = 3
    sigma0: float = 1.6
    contrast_thresh: float = 0.03
    edge_ratio: float = 10.0


@dataclass
class ScaleSpace:
    """Per octave: Gaussian-blurred levels and their absolute sigma values.

    Octave o, level i carries sigma0 * 2**o * k**i with k = 2**(1/s);
    each octave is spatially half of the previous one.
    """

    levels: list[list[GrayImage]]
    sigmas: list[list[float]]
    sigma0: float
    scales_per_octave: int

    @property
    def k(self) -> float:
        return 2.0 ** (1.0 / self.scales_per_octave)


@dataclass
class DogPyramid:
    """Adjacent-level differences; one fewer level per octave than the source."""

    levels: list[list[np.ndarray]]


@dataclass
class ExtractionStats:
    detected: int = 0
    dropped_orientation: int = 0
    dropped_window: int = 0

    @property
    def kept(self) -> int:
        return self.detected - self.dropped_orientation - self.dropped_window


@dataclass
class SiftFeatures:
    """Parallel keypoint/descriptor lists plus the source image dimensions.

    keypoints rows are (x, y, sigma, theta) in original-image pixels with
    theta in [0, 2*pi).  responses/octaves/levels are extraction metadata
    used for deterministic collision handling; they are zero for features
    loaded from a file and are not serialized.
    """

    keypoints: np.ndarray
    descriptors: np.ndarray
    height: int
    width: int
    responses: np.ndarray = None
    octaves: np.ndarray = None
    levels: np.ndarray = None
    stats: ExtractionStats | None = field(default=None, compare=False)

    def __post_init__(self):
        self.keypoints = np.asarray(self.keypoints, dtype=np.float32).reshape(-1, 4)
        self.descriptors = np.asarray(self.descriptors, dtype=np.float32).reshape(-1, DESCRIPTOR_SIZE)
        n = len(self.keypoints)
        if len(self.descriptors) != n:
            raise InvalidInputError(
                f"keypoint/descriptor count mismatch: {n} vs {len(self.descriptors)}")
        for name in ("responses", "octaves", "levels"):
            val = getattr(self, name)
            val = np.zeros(n, dtype=np.float32) if val is None else np.asarray(val, dtype=np.float32)
            if val.shape != (n,):
                raise InvalidInputError(f"{name} must have shape ({n},)")
            setattr(self, name, val)

    def __len__(self) -> int:
        return len(self.keypoints)

    def __eq__(self, other) -> bool:
        if not isinstance(other, SiftFeatures):
            return NotImplemented
        return (self.height == other.height and self.width == other.width
                and np.array_equal(self.keypoints, other.keypoints)
                and np.array_equal(self.descriptors, other.descriptors))

    def subset(self, indices: np.ndarray) -> "SiftFeatures":
        idx = np.asarray(indices, dtype=np.int64)
        return SiftFeatures(
            keypoints=self.keypoints[idx],
            descriptors=self.descriptors[idx],
            height=self.height,
            width=self.width,
            responses=self.responses[idx],
            octaves=self.octaves[idx],
            levels=self.levels[idx],
        )


# ---------------------------------------------------------------------------
# Scale space and DoG
# ---------------------------------------------------------------------------

def build_scale_space(img: GrayImage, octaves: int = 3, scales_per_octave: int = 3,
                      sigma0: float = 1.6) -> ScaleSpace:
    """Gaussian pyramid with s+3 levels per octave, halving between octaves."""
    if octaves < 1:
        raise InvalidParameterError(f"octaves must be >= 1, got {octaves}")
    if scales_per_octave < 3:
        raise InvalidParameterError(
            f"scales_per_octave must be >= 3, got {scales_per_octave}")
    if sigma0 <= 0.0:
        raise InvalidParameterError(f"sigma0 must be positive, got {sigma0}")
    if min(img.height, img.width) < 32:
        raise InvalidParameterError(
            f"image must be at least 32x32, got {img.height}x{img.width}")
    if (min(img.height, img.width) >> (octaves - 1)) < _MIN_OCTAVE_DIM:
        raise InvalidParameterError(
            f"image {img.height}x{img.width} too small for {octaves} octaves")

    k = 2.0 ** (1.0 / scales_per_octave)
    n_levels = scales_per_octave + 3
    # in-octave blur relative to the octave pixel grid; identical per octave
    rel = [sigma0 * k ** i for i in range(n_levels)]

    levels: list[list[GrayImage]] = []
    sigmas: list[list[float]] = []
    base = convolve(img, gaussian_kernel(sigma0))  # input treated as unblurred
    for o in range(octaves):
        row = [base]
        for i in range(1, n_levels):
            inc = float(np.sqrt(rel[i] ** 2 - rel[i - 1] ** 2))
            row.append(convolve(row[-1], gaussian_kernel(inc)))
        levels.append(row)
        sigmas.append([sigma0 * (2.0 ** o) * k ** i for i in range(n_levels)])
        if o + 1 < octaves:
            # level s has relative blur 2*sigma0; subsampling restores sigma0
            base = GrayImage(row[scales_per_octave].data[::2, ::2])
    return ScaleSpace(levels=levels, sigmas=sigmas, sigma0=sigma0,
                      scales_per_octave=scales_per_octave)


def build_dog(ss: ScaleSpace) -> DogPyramid:
    """D_i = L_{i+1} - L_i elementwise, per octave."""
    out = []
    for row in ss.levels:
        if len(row) < 2:
            raise InvalidParameterError("need at least 2 levels per octave")
        out.append([row[i + 1].data - row[i].data for i in range(len(row) - 1)])
    return DogPyramid(levels=out)


# ---------------------------------------------------------------------------
# Extrema detection
# ---------------------------------------------------------------------------

def detect_extrema(dog: DogPyramid, contrast_thresh: float = 0.03,
                   edge_ratio: float = 10.0) -> list[tuple[int, int, int, int]]:
    """Strict 26-neighbor extrema of the DoG pyramid, contrast- and edge-filtered.

    Returns (x, y, octave, level) tuples in octave pixel coordinates,
    ordered by (octave, level, y, x).
    """
    results: list[tuple[int, int, int, int]] = []
    edge_bound = (edge_ratio + 1.0) ** 2 / edge_ratio
    for o, levels in enumerate(dog.levels):
        if len(levels) < 3:
            raise InvalidParameterError("need at least 3 DoG levels per octave")
        for li in range(1, len(levels) - 1):
            below, center, above = levels[li - 1], levels[li], levels[li + 1]
            c = center[1:-1, 1:-1]
            gt = np.ones_like(c, dtype=bool)
            lt = np.ones_like(c, dtype=bool)
            for lvl in (below, center, above):
                for dy in (0, 1, 2):
                    for dx in (0, 1, 2):
                        if lvl is center and dy == 1 and dx == 1:
                            continue
                        nb = lvl[dy:dy + c.shape[0], dx:dx + c.shape[1]]
                        gt &= c > nb
                        lt &= c < nb
            cand = (gt | lt) & (np.abs(c) >= contrast_thresh)
            if not cand.any():
                continue
            ys, xs = np.nonzero(cand)
            ys = ys + 1
            xs = xs + 1
            dxx = center[ys, xs + 1] - 2.0 * center[ys, xs] + center[ys, xs - 1]
            dyy = center[ys + 1, xs] - 2.0 * center[ys, xs] + center[ys - 1, xs]
            dxy = 0.25 * (center[ys + 1, xs + 1] - center[ys + 1, xs - 1]
                          - center[ys - 1, xs + 1] + center[ys - 1, xs - 1])
            tr = dxx + dyy
            det = dxx * dyy - dxy * dxy
            keep = (det > 0) & (tr * tr < edge_bound * det)
            for y, x in zip(ys[keep], xs[keep]):
                results.append((int(x), int(y), o, li))
    results.sort(key=lambda p: (p[2], p[3], p[1], p[0]))
    return results


# ---------------------------------------------------------------------------
# Orientation and descriptor
# ---------------------------------------------------------------------------

def assign_orientation(ss: ScaleSpace, point: tuple[int, int, int, int]) -> float | None:
    """Dominant gradient orientation at (x, y, octave, level), or None.

    Builds a 36-bin histogram of gradient orientations in a Gaussian
    window of sigma_w = 1.5 * sigma around the point and returns the
    center angle of the maximal bin.  None signals a gradient-free
    window; the caller drops the keypoint.
    """
    x, y, octave, level = point
    img = ss.levels[octave][level].data
    h, w = img.shape
    sigma_w = _ORI_SIGMA_FACTOR * ss.sigma0 * ss.k ** level
    radius = int(round(3.0 * sigma_w))

    y0, y1 = max(y - radius, 1), min(y + radius, h - 2)
    x0, x1 = max(x - radius, 1), min(x + radius, w - 2)
    if y1 < y0 or x1 < x0:
        return None
    patch_dx = img[y0:y1 + 1, x0 + 1:x1 + 2] - img[y0:y1 + 1, x0 - 1:x1]
    patch_dy = img[y0 + 1:y1 + 2, x0:x1 + 1] - img[y0 - 1:y1, x0:x1 + 1]
    mag = np.hypot(patch_dx, patch_dy)
    ori = np.mod(np.arctan2(patch_dy, patch_dx), 2.0 * np.pi)

    yy, xx = np.mgrid[y0 - y:y1 - y + 1, x0 - x:x1 - x + 1]
    weight = np.exp(-(xx * xx + yy * yy) / (2.0 * sigma_w * sigma_w))
    votes = weight * mag
    if not votes.any():
        return None
    bin_width = 2.0 * np.pi / _ORI_BINS
    bins = np.minimum((ori / bin_width).astype(np.int64), _ORI_BINS - 1)
    hist = np.bincount(bins.ravel(), weights=votes.ravel(), minlength=_ORI_BINS)
    return float((np.argmax(hist) + 0.5) * bin_width)


def _descriptor_at(ss: ScaleSpace, x: float, y: float, octave: int, level: int,
                   theta: float) -> np.ndarray | None:
    """128-d descriptor for a point in octave coordinates, or None if the
    rotated 16x16 window would leave the image."""
    img = ss.levels[octave][level].data
    h, w = img.shape
    if (x - _DESC_MARGIN < 0 or x + _DESC_MARGIN > w - 1
            or y - _DESC_MARGIN < 0 or y + _DESC_MARGIN > h - 1):
        return None

    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])

    half = _DESC_WINDOW / 2.0
    offs = np.arange(_DESC_WINDOW, dtype=np.float64) - half + 0.5  # -7.5 .. 7.5
    u, v = np.meshgrid(offs, offs)  # u: right, v: down, window frame
    ct, st = np.cos(theta), np.sin(theta)
    sx = x + u * ct - v * st
    sy = y + u * st + v * ct

    ix = np.floor(sx).astype(np.int64)
    iy = np.floor(sy).astype(np.int64)
    fx = sx - ix
    fy = sy - iy

    def bilinear(grid):
        return ((1 - fy) * ((1 - fx) * grid[iy, ix] + fx * grid[iy, ix + 1])
                + fy * ((1 - fx) * grid[iy + 1, ix] + fx * grid[iy + 1, ix + 1]))

    sdx = bilinear(gx)
    sdy = bilinear(gy)
    mag = np.hypot(sdx, sdy)
    ori = np.mod(np.arctan2(sdy, sdx) - theta, 2.0 * np.pi)

    weight = np.exp(-(u * u + v * v) / (2.0 * half * half))
    cell_u = np.minimum(((u + half) / (2 * half / _DESC_CELLS)).astype(np.int64), _DESC_CELLS - 1)
    cell_v = np.minimum(((v + half) / (2 * half / _DESC_CELLS)).astype(np.int64), _DESC_CELLS - 1)
    obin = np.minimum((ori / (2.0 * np.pi / _DESC_ORI_BINS)).astype(np.int64),
                      _DESC_ORI_BINS - 1)
    flat = (cell_v * _DESC_CELLS + cell_u) * _DESC_ORI_BINS + obin
    desc = np.bincount(flat.ravel(), weights=(weight * mag).ravel(),
                       minlength=DESCRIPTOR_SIZE)

    norm = np.linalg.norm(desc)
    if norm < 1e-12:
        return np.zeros(DESCRIPTOR_SIZE, dtype=np.float32)
    desc = desc / norm
    np.clip(desc, None, _DESC_CLAMP, out=desc)
    desc /= np.linalg.norm(desc)
    return desc.astype(np.float32)


def compute_descriptor(ss: ScaleSpace, keypoint) -> np.ndarray | None:
    """Descriptor for a keypoint (x, y, sigma, theta) in original-image
    coordinates; octave and level are recovered from sigma."""
    x, y, sigma, theta = (float(v) for v in keypoint)
    if sigma <= 0.0:
        raise InvalidParameterError(f"keypoint sigma must be positive, got {sigma}")
    best = None
    for o, row in enumerate(ss.sigmas):
        for li in range(len(row)):
            err = abs(np.log(row[li]) - np.log(sigma))
            if best is None or err < best[0]:
                best = (err, o, li)
    _, octave, level = best
    scale = float(2 ** octave)
    return _descriptor_at(ss, x / scale, y / scale, octave, level, theta)


# ---------------------------------------------------------------------------
# Full extraction
# ---------------------------------------------------------------------------

def extract_sift(img: GrayImage, params: SiftParams = SiftParams()) -> SiftFeatures:
    """Run the full pipeline; deterministic for fixed image and params."""
    ss = build_scale_space(img, params.octaves, params.scales_per_octave, params.sigma0)
    dog = build_dog(ss)
    points = detect_extrema(dog, params.contrast_thresh, params.edge_ratio)

    stats = ExtractionStats(detected=len(points))
    kps, descs, resp, octs, lvls = [], [], [], [], []
    for (x, y, o, li) in points:
        theta = assign_orientation(ss, (x, y, o, li))
        if theta is None:
            stats.dropped_orientation += 1
            continue
        desc = _descriptor_at(ss, float(x), float(y), o, li, theta)
        if desc is None:
            stats.dropped_window += 1
            continue
        scale = float(2 ** o)
        kps.append((x * scale, y * scale, ss.sigmas[o][li], theta))
        descs.append(desc)
        resp.append(dog.levels[o][li][y, x])
        octs.append(o)
        lvls.append(li)

    n = len(kps)
    return SiftFeatures(
        keypoints=np.asarray(kps, dtype=np.float32).reshape(n, 4),
        descriptors=np.asarray(descs, dtype=np.float32).reshape(n, DESCRIPTOR_SIZE),
        height=img.height,
        width=img.width,
        responses=np.asarray(resp, dtype=np.float32),
        octaves=np.asarray(octs, dtype=np.float32),
        levels=np.asarray(lvls, dtype=np.float32),
        stats=stats,
    )


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between rows of a (n,d) and b (m,d)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.sqrt(np.maximum(sq, 0.0))


def match_descriptors(fa: SiftFeatures, fb: SiftFeatures,
                      t: float = 0.8) -> list[tuple[int, int]]:
    """Ratio-test matching: (i, j) kept iff j is i's nearest neighbor in fb
    and d1/d2 < t.  Not symmetric in its arguments."""
    if not 0.0 < t < 1.0:
        raise InvalidParameterError(f"ratio threshold must be in (0,1), got {t}")
    if len(fb) < 2:
        warnings.warn("ratio test needs at least 2 candidate descriptors",
                      DegenerateInputWarning, stacklevel=2)
        return []
    if len(fa) == 0:
        return []
    dist = pairwise_distances(fa.descriptors, fb.descriptors)
    order = np.argpartition(dist, 1, axis=1)[:, :2]
    matches = []
    for i in range(len(fa)):
        j1, j2 = order[i]
        d1, d2 = dist[i, j1], dist[i, j2]
        if d1 > d2:
            j1, j2 = j2, j1
            d1, d2 = d2, d1
        if d1 < t * d2:
            matches.append((i, int(j1)))
    return matches


# ---------------------------------------------------------------------------
# SFT1 serialization
# ---------------------------------------------------------------------------

def save_sift(feats: SiftFeatures, path: str | os.PathLike) -> None:
    """Write the SFT1 binary format (little-endian)."""
    buf = io.BytesIO()
    buf.write(_SFT_MAGIC)
    buf.write(struct.pack("<III", feats.height, feats.width, len(feats)))
    for i in range(len(feats)):
        buf.write(struct.pack("<4f", *feats.keypoints[i]))
        buf.write(feats.descriptors[i].astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_sift(path: str | os.PathLike) -> SiftFeatures:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _SFT_MAGIC:
        raise FormatError(f"bad SFT1 magic in {os.fspath(path)}")
    if len(blob) < 16:
        raise FormatError(f"truncated SFT1 header in {os.fspath(path)}")
    h, w, n = struct.unpack("<III", blob[4:16])
    rec = 4 * (4 + DESCRIPTOR_SIZE)
    if len(blob) != 16 + n * rec:
        raise FormatError(
            f"SFT1 size mismatch in {os.fspath(path)}: "
            f"expected {16 + n * rec} bytes, got {len(blob)}")
    body = np.frombuffer(blob, dtype="<f4", offset=16).reshape(n, 4 + DESCRIPTOR_SIZE)
    return SiftFeatures(keypoints=body[:, :4].copy(), descriptors=body[:, 4:].copy(),
                        height=h, width=w)
