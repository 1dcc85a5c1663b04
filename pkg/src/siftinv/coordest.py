"""Coordinate estimation for bare descriptors.

Two routes: nearest-neighbor projection onto a reference corpus (at the
descriptor level or against the single best-matching reference image),
and a landmark route that classifies each descriptor into a facial
region and places it near a prior landmark of that region.

Landmark region indices follow the standard 68-point scheme: jaw
[0,16], right brow [17,21], left brow [22,26], nose [27,35], right eye
[36,41], left eye [42,47], mouth [48,67]; label 7 means non-facial.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import (DegenerateInputError, FormatError, InvalidInputError,
                     InvalidParameterError)
from .sift import SiftFeatures, pairwise_distances
from . import autodiff as ad
from .autodiff import Adam, Tape, Tensor, backward, no_grad

N_LANDMARKS = 68
N_REGIONS = 8
OTHER_LABEL = 7
REGION_RANGES = ((0, 16), (17, 21), (22, 26), (27, 35), (36, 41), (42, 47), (48, 67))
REGION_NAMES = ("jaw", "right_brow", "left_brow", "nose", "right_eye",
                "left_eye", "mouth", "other")
LANDMARK_DISTANCE_LIMIT = 10.0


@dataclass(frozen=True)
class LandmarkSet:
    """68 (x, y) points in image coordinates."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 2):
            raise InvalidInputError(f"expected {N_LANDMARKS} landmarks, got {pts.shape}")
        if pts.min() < 0:
            raise InvalidInputError("landmarks must have non-negative coordinates")
        pts = np.ascontiguousarray(pts)
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)


def load_landmarks(path: str | os.PathLike) -> LandmarkSet:
    """Plain text, 68 lines of 'x y'."""
    pts = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise FormatError(f"{os.fspath(path)}:{lineno}: expected 'x y'")
            try:
                pts.append((float(parts[0]), float(parts[1])))
            except ValueError as exc:
                raise FormatError(f"{os.fspath(path)}:{lineno}: non-numeric landmark") from exc
    if len(pts) != N_LANDMARKS:
        raise FormatError(f"{os.fspath(path)}: expected {N_LANDMARKS} landmarks, got {len(pts)}")
    return LandmarkSet(np.asarray(pts))


def landmark_region(index: int) -> int:
    for label, (lo, hi) in enumerate(REGION_RANGES):
        if lo <= index <= hi:
            return label
    raise InvalidParameterError(f"landmark index {index} outside [0,{N_LANDMARKS})")


# ---------------------------------------------------------------------------
# Reference-based estimation
# ---------------------------------------------------------------------------

@dataclass
class ReferenceSet:
    """Concatenated descriptors of the reference images, coordinate-tagged.

    Entries are sorted by image id; within the flat arrays, ties in NN
    distance resolve to the lowest (image id, descriptor index).
    """

    image_ids: list[str]
    descriptors: np.ndarray    # (M, 128)
    coords: np.ndarray         # (M, 2) x,y
    sigmas_thetas: np.ndarray  # (M, 2)
    image_index: np.ndarray    # (M,) index into image_ids
    descriptor_index: np.ndarray  # (M,) index within the source image
    height: int
    width: int

    @classmethod
    def from_entries(cls, entries: list[tuple[str, SiftFeatures]]) -> "ReferenceSet":
        if not entries:
            raise InvalidInputError("reference set must not be empty")
        entries = sorted(entries, key=lambda e: e[0])
        dims = (entries[0][1].height, entries[0][1].width)
        descs, coords, st, img_idx, desc_idx = [], [], [], [], []
        for i, (img_id, feats) in enumerate(entries):
            if len(feats) == 0:
                raise InvalidInputError(f"reference entry {img_id!r} has no descriptors")
            if (feats.height, feats.width) != dims:
                raise InvalidInputError("reference images must share dimensions")
            descs.append(feats.descriptors)
            coords.append(feats.keypoints[:, :2])
            st.append(feats.keypoints[:, 2:])
            img_idx.append(np.full(len(feats), i, dtype=np.int64))
            desc_idx.append(np.arange(len(feats), dtype=np.int64))
        return cls(
            image_ids=[e[0] for e in entries],
            descriptors=np.concatenate(descs).astype(np.float32),
            coords=np.concatenate(coords).astype(np.float32),
            sigmas_thetas=np.concatenate(st).astype(np.float32),
            image_index=np.concatenate(img_idx),
            descriptor_index=np.concatenate(desc_idx),
            height=entries[0][1].height,
            width=entries[0][1].width,
        )

    def entry_mask(self, image_pos: int) -> np.ndarray:
        return self.image_index == image_pos


def pick_reference_images(category_map: dict[str, str], seed: int) -> list[str]:
    """One path per category, chosen with a seeded RNG; categories sorted."""
    if not category_map:
        raise InvalidInputError("category map is empty")
    by_cat: dict[str, list[str]] = {}
    for path, cat in category_map.items():
        by_cat.setdefault(cat, []).append(path)
    rng = np.random.Generator(np.random.PCG64(seed))
    picks = []
    for cat in sorted(by_cat):
        paths = sorted(by_cat[cat])
        picks.append(paths[int(rng.integers(len(paths)))])
    return picks


def load_category_map(path: str | os.PathLike) -> dict[str, str]:
    """Lines of 'path<TAB>category'."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise FormatError(f"{os.fspath(path)}:{lineno}: expected 'path<TAB>category'")
            p, cat = line.split("\t", 1)
            out[p.strip()] = cat.strip()
    if not out:
        raise FormatError(f"{os.fspath(path)}: no entries")
    return out


def _drop_coordinate_collisions(order: np.ndarray, coords: np.ndarray,
                                rng: np.random.Generator) -> np.ndarray:
    """When several query descriptors land on one coordinate, randomly keep
    one (seeded).  Returns the kept query indices in their original order."""
    groups: dict[tuple[float, float], list[int]] = {}
    for qi in order:
        key = (float(coords[qi, 0]), float(coords[qi, 1]))
        groups.setdefault(key, []).append(int(qi))
    keep = []
    for key in sorted(groups):
        members = groups[key]
        keep.append(members[int(rng.integers(len(members)))] if len(members) > 1
                    else members[0])
    return np.asarray(sorted(keep), dtype=np.int64)


def _project(feats: SiftFeatures, refs: ReferenceSet, nn_idx: np.ndarray,
             seed: int) -> SiftFeatures:
    coords = refs.coords[nn_idx]
    rng = np.random.Generator(np.random.PCG64(seed))
    keep = _drop_coordinate_collisions(np.arange(len(feats)), coords, rng)
    kps = np.concatenate([coords[keep], refs.sigmas_thetas[nn_idx][keep]], axis=1)
    return SiftFeatures(keypoints=kps, descriptors=feats.descriptors[keep],
                        height=refs.height, width=refs.width)


def estimate_coords_descriptor_level(feats: SiftFeatures, refs: ReferenceSet,
                                     seed: int = 0) -> SiftFeatures:
    """Give each descriptor the coordinate of its globally nearest reference
    descriptor (exact exhaustive search)."""
    if len(feats) == 0:
        return SiftFeatures(np.zeros((0, 4)), np.zeros((0, 128)),
                            refs.height, refs.width)
    dist = pairwise_distances(feats.descriptors, refs.descriptors)
    nn_idx = np.argmin(dist, axis=1)  # first minimum = lowest (image id, desc index)
    return _project(feats, refs, nn_idx, seed)


def estimate_coords_image_level(feats: SiftFeatures, refs: ReferenceSet,
                                seed: int = 0) -> SiftFeatures:
    """Select the single reference with minimum average NN distance, then
    project every descriptor onto its nearest descriptor inside it."""
    if len(feats) == 0:
        return SiftFeatures(np.zeros((0, 4)), np.zeros((0, 128)),
                            refs.height, refs.width)
    dist = pairwise_distances(feats.descriptors, refs.descriptors)
    best_pos, best_d = None, None
    for pos in range(len(refs.image_ids)):  # ids sorted; ties keep lowest id
        sub = dist[:, refs.entry_mask(pos)]
        d = float(sub.min(axis=1).mean())
        if best_d is None or d < best_d:
            best_pos, best_d = pos, d
    mask = refs.entry_mask(best_pos)
    flat_idx = np.nonzero(mask)[0]
    nn_idx = flat_idx[np.argmin(dist[:, mask], axis=1)]
    return _project(feats, refs, nn_idx, seed)


# ---------------------------------------------------------------------------
# Landmark-based estimation
# ---------------------------------------------------------------------------

def label_descriptors(feats: SiftFeatures, lm: LandmarkSet) -> np.ndarray:
    """Region of the nearest landmark per keypoint, or 7 beyond 10 px."""
    if len(feats) == 0:
        return np.zeros(0, dtype=np.int64)
    d = pairwise_distances(feats.keypoints[:, :2], lm.points)
    nearest = np.argmin(d, axis=1)
    labels = np.asarray([landmark_region(int(i)) for i in nearest], dtype=np.int64)
    labels[d[np.arange(len(feats)), nearest] > LANDMARK_DISTANCE_LIMIT] = OTHER_LABEL
    return labels


@dataclass(frozen=True)
class ClassifierConfig:
    steps: int = 500
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0


class RegionClassifier:
    """Six fully connected layers (linear + Batch Norm + ReLU between them)
    ending in an 8-way output."""

    HIDDEN = (256, 256, 128, 64, 32)
    _BN_MOMENTUM = 0.1
    _BN_EPS = 1e-5

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.step = 0
        rng = np.random.Generator(np.random.PCG64(seed))
        self._params: dict[str, Tensor] = {}
        dims = (128,) + self.HIDDEN + (N_REGIONS,)
        for i in range(len(dims) - 1):
            self._params[f"fc{i}.w"] = Tensor(
                ad.he_normal(rng, (dims[i], dims[i + 1]), dims[i]), requires_grad=True)
            self._params[f"fc{i}.b"] = Tensor(
                np.zeros(dims[i + 1], dtype=np.float32), requires_grad=True)
        self._bn_mean = [np.zeros(d, dtype=np.float32) for d in self.HIDDEN]
        self._bn_var = [np.ones(d, dtype=np.float32) for d in self.HIDDEN]

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        if x.data.ndim != 2 or x.data.shape[1] != 128:
            raise InvalidInputError(f"classifier expects (N,128), got {x.data.shape}")
        cur = x
        for i in range(len(self.HIDDEN)):
            cur = ad.linear(cur, self._params[f"fc{i}.w"], self._params[f"fc{i}.b"])
            if train:
                mu = cur.data.mean(axis=0)
                var = cur.data.var(axis=0)
                m = self._BN_MOMENTUM
                self._bn_mean[i] = (1 - m) * self._bn_mean[i] + m * mu.astype(np.float32)
                self._bn_var[i] = (1 - m) * self._bn_var[i] + m * var.astype(np.float32)
                cur = ad.batch_norm(cur)
            else:
                scale = 1.0 / np.sqrt(self._bn_var[i] + self._BN_EPS)
                cur = ad.affine(cur, scale, -self._bn_mean[i] * scale)
            cur = ad.relu(cur)
        return ad.linear(cur, self._params[f"fc{len(self.HIDDEN)}.w"],
                         self._params[f"fc{len(self.HIDDEN)}.b"])

    def predict_proba(self, descriptors: np.ndarray) -> np.ndarray:
        with no_grad():
            logits = self.forward(Tensor(np.asarray(descriptors, dtype=np.float32))).data
        z = logits - logits.max(axis=1, keepdims=True)
        ez = np.exp(z)
        return ez / ez.sum(axis=1, keepdims=True)

    def predict(self, descriptors: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(descriptors), axis=1)

    # CKP1 persistence: parameters plus the running batch-norm statistics
    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"_meta.seed": np.asarray([float(self.seed)], dtype=np.float32),
               "_meta.step": np.asarray([float(self.step)], dtype=np.float32)}
        for name, t in self._params.items():
            out[name] = t.data
        for i in range(len(self.HIDDEN)):
            out[f"bn{i}.mean"] = self._bn_mean[i]
            out[f"bn{i}.var"] = self._bn_var[i]
        return out

    def save(self, path: str | os.PathLike) -> None:
        ad.save_tensors(path, self.state_tensors())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RegionClassifier":
        named = ad.load_tensors(path)
        clf = cls(seed=int(named["_meta.seed"][0]))
        clf.step = int(named["_meta.step"][0])
        for name, t in clf._params.items():
            if name not in named:
                raise FormatError(f"classifier checkpoint missing {name!r}")
            t.data = named[name].astype(np.float32).reshape(t.data.shape)
        for i in range(len(cls.HIDDEN)):
            clf._bn_mean[i] = named[f"bn{i}.mean"].astype(np.float32)
            clf._bn_var[i] = named[f"bn{i}.var"].astype(np.float32)
        return clf


def train_region_classifier(descriptors: np.ndarray, labels: np.ndarray,
                            cfg: ClassifierConfig = ClassifierConfig()) -> RegionClassifier:
    """Minimize cross entropy with Adam; deterministic per seed."""
    descriptors = np.asarray(descriptors, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if descriptors.ndim != 2 or descriptors.shape[1] != 128:
        raise InvalidInputError(f"descriptors must be (N,128), got {descriptors.shape}")
    if labels.shape != (len(descriptors),):
        raise InvalidInputError("labels must parallel descriptors")
    if len(np.unique(labels)) < 2:
        raise DegenerateInputError("classifier training needs at least 2 classes")

    clf = RegionClassifier(seed=cfg.seed)
    opt = Adam(clf.parameters(), lr=cfg.lr)
    rng = np.random.Generator(np.random.PCG64(cfg.seed + 1))
    n = len(descriptors)
    for _ in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        clf.zero_grad()
        with Tape():
            logits = clf.forward(Tensor(descriptors[idx]), train=True)
            loss = ad.softmax_cross_entropy(logits, labels[idx])
            backward(loss)
        opt.step()
        clf.step += 1
    return clf


def estimate_coords_landmark(feats: SiftFeatures, clf: RegionClassifier,
                             prior_lm: LandmarkSet, seed: int = 0) -> SiftFeatures:
    """Classify each descriptor into a region and scatter it near a random
    landmark of that region with integer jitter in [-3, 3] per component.
    Descriptors predicted as non-facial are discarded."""
    if len(feats) == 0:
        return SiftFeatures(np.zeros((0, 4)), np.zeros((0, 128)),
                            feats.height, feats.width)
    labels = clf.predict(feats.descriptors)
    rng = np.random.Generator(np.random.PCG64(seed))
    kps, descs = [], []
    for i, label in enumerate(labels):
        if label == OTHER_LABEL:
            continue
        lo, hi = REGION_RANGES[label]
        lm_idx = lo + int(rng.integers(hi - lo + 1))
        eps_x = float(rng.integers(-3, 4))
        eps_y = float(rng.integers(-3, 4))
        x = min(max(prior_lm.points[lm_idx, 0] + eps_x, 0.0), feats.width - 1.0)
        y = min(max(prior_lm.points[lm_idx, 1] + eps_y, 0.0), feats.height - 1.0)
        kps.append((x, y, feats.keypoints[i, 2], feats.keypoints[i, 3]))
        descs.append(feats.descriptors[i])
    n = len(kps)
    return SiftFeatures(
        keypoints=np.asarray(kps, dtype=np.float32).reshape(n, 4),
        descriptors=np.asarray(descs, dtype=np.float32).reshape(n, 128),
        height=feats.height, width=feats.width)
