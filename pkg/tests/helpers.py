"""Shared test utilities: independent oracles and synthetic data generators.

Everything here is deliberately naive (nested loops, direct summation) so
it stays independent of the vectorized implementations it checks.
"""

from __future__ import annotations

import numpy as np

from siftinv.autodiff import Tape, Tensor, backward
from siftinv.image import RgbImage


def gradcheck(fn, tensors, h=1e-4, tol=1e-5):
    """Compare analytic gradients against central finite differences.

    Tensors must be float64.  Returns the worst relative error across all
    requires_grad tensors; callers assert it is below tol.
    """
    for t in tensors:
        assert t.data.dtype == np.float64, "gradcheck requires float64 tensors"
        t.grad = None
    with Tape():
        loss = fn(*tensors)
        backward(loss)
    worst = 0.0
    for t in tensors:
        if not t.requires_grad:
            continue
        analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with Tape():
                up = fn(*tensors).item()
            flat[i] = orig - h
            with Tape():
                down = fn(*tensors).item()
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * h)
        denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
        worst = max(worst, float(np.abs(analytic - numeric).max() / denom))
    assert worst < tol, f"gradient mismatch: relative error {worst:.3e} >= {tol}"
    return worst


def naive_convolve(data: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Direct-summation 2-D convolution with replicate padding."""
    r = weights.shape[0] // 2
    h, w = data.shape
    out = np.zeros_like(data, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    acc += float(data[yy, xx]) * float(weights[dy + r, dx + r])
            out[y, x] = acc
    return out


def brute_force_extrema(dog_levels, contrast_thresh, edge_ratio):
    """Exhaustive 26-neighbor scan of a DoG pyramid, with the contrast and
    edge filters evaluated per candidate.  Returns (x, y, octave, level)."""
    found = []
    bound = (edge_ratio + 1.0) ** 2 / edge_ratio
    for o, levels in enumerate(dog_levels):
        for li in range(1, len(levels) - 1):
            center = levels[li]
            h, w = center.shape
            for y in range(1, h - 1):
                for x in range(1, w - 1):
                    v = center[y, x]
                    if abs(v) < contrast_thresh:
                        continue
                    greater = True
                    smaller = True
                    for lvl in (levels[li - 1], center, levels[li + 1]):
                        for dy in (-1, 0, 1):
                            for dx in (-1, 0, 1):
                                if lvl is center and dy == 0 and dx == 0:
                                    continue
                                nb = lvl[y + dy, x + dx]
                                if v <= nb:
                                    greater = False
                                if v >= nb:
                                    smaller = False
                    if not (greater or smaller):
                        continue
                    dxx = center[y, x + 1] - 2 * v + center[y, x - 1]
                    dyy = center[y + 1, x] - 2 * v + center[y - 1, x]
                    dxy = 0.25 * (center[y + 1, x + 1] - center[y + 1, x - 1]
                                  - center[y - 1, x + 1] + center[y - 1, x - 1])
                    tr = dxx + dyy
                    det = dxx * dyy - dxy * dxy
                    if det > 0 and tr * tr < bound * det:
                        found.append((x, y, o, li))
    return found


def naive_ssim(a: np.ndarray, b: np.ndarray, weights: np.ndarray,
               k1=0.01, k2=0.03) -> float:
    """Per-window SSIM with explicit loops over valid positions."""
    win = weights.shape[0]
    h, w = a.shape
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for y in range(h - win + 1):
        for x in range(w - win + 1):
            pa = a[y:y + win, x:x + win].astype(np.float64)
            pb = b[y:y + win, x:x + win].astype(np.float64)
            mx = float((weights * pa).sum())
            my = float((weights * pb).sum())
            sxx = float((weights * pa * pa).sum()) - mx * mx
            syy = float((weights * pb * pb).sum()) - my * my
            sxy = float((weights * pa * pb).sum()) - mx * my
            vals.append(((2 * mx * my + c1) * (2 * sxy + c2))
                        / ((mx * mx + my * my + c1) * (sxx + syy + c2)))
    return float(np.mean(vals))


def make_toy_image(seed: int, size: int = 64) -> RgbImage:
    """Synthetic textured 64x64 image: smooth gradient plus twelve
    well-separated blobs whose scales sit inside the detector's range, so
    extraction finds around ten keypoints."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.zeros((size, size, 3))
    base = (0.25 + 0.2 * (xx / size) * rng.uniform(0.5, 1.0)
            + 0.15 * (yy / size) * rng.uniform(0.2, 1.0))
    for c in range(3):
        img[:, :, c] = base * rng.uniform(0.7, 1.0)
    cells = [(r, c) for r in range(4) for c in range(4)]
    rng.shuffle(cells)
    for (r, c) in cells[:12]:
        cy = 14 + 12 * r + rng.integers(-2, 3)
        cx = 14 + 12 * c + rng.integers(-2, 3)
        s = rng.uniform(1.8, 2.6)
        amp = rng.uniform(0.3, 0.5) * rng.choice([-1.0, 1.0])
        g = amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * s * s))
        color = rng.uniform(0.6, 1.0, 3)
        for ch in range(3):
            img[:, :, ch] += g * color[ch]
    return RgbImage(np.clip(img, 0.0, 1.0).astype(np.float32))


def random_gray(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    return rng.uniform(0.0, 1.0, size=(h, w)).astype(np.float32)
