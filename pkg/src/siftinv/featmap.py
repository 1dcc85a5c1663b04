"""Dense model inputs built from sparse SIFT features.

A FeatureMap places each 128-d descriptor at its rounded keypoint pixel
(zero vectors elsewhere); a BinaryMap keeps only the 0/1 occupancy.
Both serialize to the "SMP1" little-endian format.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidInputError, InvalidParameterError
from .sift import DESCRIPTOR_SIZE, SiftFeatures

_SMP_MAGIC = b"SMP1"


@dataclass(frozen=True)
class FeatureMap:
    """H x W x 128 raster; pixels without a keypoint are exactly zero."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or arr.shape[2] != DESCRIPTOR_SIZE:
            raise InvalidInputError(
                f"FeatureMap expects shape (H, W, {DESCRIPTOR_SIZE}), got {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return DESCRIPTOR_SIZE


@dataclass(frozen=True)
class BinaryMap:
    """H x W occupancy mask with values in {0, 1}."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise InvalidInputError(f"BinaryMap expects shape (H, W), got {arr.shape}")
        if not np.isin(arr, (0.0, 1.0)).all():
            raise InvalidInputError("BinaryMap values must be 0 or 1")
        arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1


def _round_half_up(v: np.ndarray) -> np.ndarray:
    return np.floor(v + 0.5).astype(np.int64)


def _placement_order(feats: SiftFeatures) -> np.ndarray:
    """Indices sorted so the survivor of a pixel collision comes first:
    largest |DoG response|, then smallest (octave, level, y, x, index)."""
    n = len(feats)
    keys = sorted(
        range(n),
        key=lambda i: (-abs(float(feats.responses[i])), float(feats.octaves[i]),
                       float(feats.levels[i]), float(feats.keypoints[i, 1]),
                       float(feats.keypoints[i, 0]), i))
    return np.asarray(keys, dtype=np.int64)


def _rounded_coords(feats: SiftFeatures) -> tuple[np.ndarray, np.ndarray]:
    x = feats.keypoints[:, 0]
    y = feats.keypoints[:, 1]
    if len(feats) and (x.min() < 0 or y.min() < 0 or x.max() >= feats.width
                       or y.max() >= feats.height):
        raise InvalidInputError("keypoint coordinates outside [0,W)x[0,H)")
    cx = np.clip(_round_half_up(x), 0, feats.width - 1)
    cy = np.clip(_round_half_up(y), 0, feats.height - 1)
    return cx, cy


def build_feature_map(feats: SiftFeatures) -> FeatureMap:
    """Write each descriptor at its rounded pixel; on collision the keypoint
    with the largest |DoG response| survives (deterministic tie-break)."""
    data = np.zeros((feats.height, feats.width, DESCRIPTOR_SIZE), dtype=np.float32)
    cx, cy = _rounded_coords(feats)
    taken: set[tuple[int, int]] = set()
    for i in _placement_order(feats):
        key = (int(cy[i]), int(cx[i]))
        if key in taken:
            continue
        taken.add(key)
        data[key] = feats.descriptors[i]
    return FeatureMap(data)


def build_binary_map(feats: SiftFeatures) -> BinaryMap:
    """1 at each rounded keypoint coordinate, 0 elsewhere."""
    data = np.zeros((feats.height, feats.width), dtype=np.float32)
    cx, cy = _rounded_coords(feats)
    data[cy, cx] = 1.0
    return BinaryMap(data)


def subsample_features(feats: SiftFeatures, fraction: float, seed: int) -> SiftFeatures:
    """Uniform random subset of round(fraction*n) keypoints, kept in
    original order; deterministic per seed."""
    if not 0.0 < fraction <= 1.0:
        raise InvalidParameterError(f"fraction must be in (0,1], got {fraction}")
    n = len(feats)
    k = int(np.floor(fraction * n + 0.5))
    if k >= n:
        return feats.subset(np.arange(n))
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = np.sort(rng.choice(n, size=k, replace=False))
    return feats.subset(idx)


# ---------------------------------------------------------------------------
# SMP1 serialization
# ---------------------------------------------------------------------------

def serialize_map(m: FeatureMap | BinaryMap, path: str | os.PathLike) -> None:
    buf = io.BytesIO()
    buf.write(_SMP_MAGIC)
    buf.write(struct.pack("<III", m.height, m.width, m.channels))
    buf.write(np.ascontiguousarray(m.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def deserialize_map(path: str | os.PathLike) -> FeatureMap | BinaryMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _SMP_MAGIC:
        raise FormatError(f"bad SMP1 magic in {os.fspath(path)}")
    if len(blob) < 16:
        raise FormatError(f"truncated SMP1 header in {os.fspath(path)}")
    h, w, c = struct.unpack("<III", blob[4:16])
    if c not in (1, DESCRIPTOR_SIZE):
        raise FormatError(f"SMP1 channel count must be 1 or {DESCRIPTOR_SIZE}, got {c}")
    need = 16 + h * w * c * 4
    if len(blob) != need:
        raise FormatError(
            f"SMP1 size mismatch in {os.fspath(path)}: expected {need} bytes, got {len(blob)}")
    data = np.frombuffer(blob, dtype="<f4", offset=16).copy()
    if c == 1:
        return BinaryMap(data.reshape(h, w))
    return FeatureMap(data.reshape(h, w, c))
