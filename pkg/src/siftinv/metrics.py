"""Leakage evaluation: PSNR, SSIM, and descriptor re-matching rate.

The re-matching rate (PRM) measures how many descriptors extracted from
a reconstruction still pass the ratio test against the ground-truth
descriptor set; it is the fraction of the latent image's SIFT identity
that survives reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidParameterError, ShapeError
from .image import GrayImage, RgbImage, gaussian_kernel, to_grayscale
from .sift import SiftFeatures, SiftParams, extract_sift, pairwise_distances

_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03

CSV_HEADER = ("image_id", "variant", "psnr_db", "ssim", "prm")


def psnr(a: RgbImage, b: RgbImage) -> float:
    """10*log10(1/MSE) with MSE pooled over all pixels and channels."""
    if a.data.shape != b.data.shape:
        raise ShapeError("psnr image shape mismatch", a.data.shape, b.data.shape)
    mse = float(np.mean((a.data.astype(np.float64) - b.data.astype(np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a: GrayImage, b: GrayImage) -> float:
    """Mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5, L=1)."""
    if a.data.shape != b.data.shape:
        raise ShapeError("ssim image shape mismatch", a.data.shape, b.data.shape)
    if min(a.height, a.width) < _SSIM_WINDOW:
        raise InvalidParameterError(
            f"ssim needs at least {_SSIM_WINDOW}x{_SSIM_WINDOW} images")
    w = gaussian_kernel(_SSIM_SIGMA, radius=_SSIM_WINDOW // 2).weights.astype(np.float64)
    x = a.data.astype(np.float64)
    y = b.data.astype(np.float64)

    def filt(img):
        win = np.lib.stride_tricks.sliding_window_view(img, (_SSIM_WINDOW, _SSIM_WINDOW))
        return np.einsum("ijkl,kl->ij", win, w)

    mu_x = filt(x)
    mu_y = filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    c1 = _SSIM_K1 ** 2
    c2 = _SSIM_K2 ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


@dataclass
class PrmReport:
    prm: float
    matches: list[tuple[int, int, float]]  # (recon index, gt index, d1/d2)
    n_recon: int
    n_gt: int


def prm(f_gt: SiftFeatures, f_recon: SiftFeatures, t: float = 0.8) -> PrmReport:
    """Fraction of reconstructed descriptors whose nearest/second-nearest
    distance ratio against the ground-truth set is below t.

    Zero reconstructed descriptors yield PRM = 0 (no leakage evidenced).
    A zero-distance tie (duplicate ground-truth descriptors) counts as a
    match: a zero-distance neighbor exists.
    """
    if not 0.0 < t < 1.0:
        raise InvalidParameterError(f"ratio threshold must be in (0,1), got {t}")
    if len(f_gt) < 2:
        raise DegenerateInputError(
            f"PRM needs at least 2 ground-truth descriptors, got {len(f_gt)}")
    n = len(f_recon)
    if n == 0:
        return PrmReport(prm=0.0, matches=[], n_recon=0, n_gt=len(f_gt))
    dist = pairwise_distances(f_recon.descriptors, f_gt.descriptors)
    part = np.partition(dist, 1, axis=1)
    d1 = part[:, 0]
    d2 = part[:, 1]
    nearest = np.argmin(dist, axis=1)
    matches = []
    for i in range(n):
        if d2[i] == 0.0:
            matched, ratio = True, 0.0
        else:
            ratio = float(d1[i] / d2[i])
            matched = ratio < t
        if matched:
            matches.append((i, int(nearest[i]), ratio))
    return PrmReport(prm=len(matches) / n, matches=matches, n_recon=n, n_gt=len(f_gt))


@dataclass
class EvalRecord:
    psnr_db: float
    ssim: float
    prm: float


def evaluate_reconstruction(gt_img: RgbImage, recon_img: RgbImage,
                            sift_params: SiftParams = SiftParams(),
                            t: float = 0.8) -> EvalRecord:
    """Extract SIFT from both images with identical params, then score."""
    if gt_img.data.shape != recon_img.data.shape:
        raise ShapeError("evaluation image shape mismatch",
                         gt_img.data.shape, recon_img.data.shape)
    f_gt = extract_sift(to_grayscale(gt_img), sift_params)
    f_recon = extract_sift(to_grayscale(recon_img), sift_params)
    report = prm(f_gt, f_recon, t)
    return EvalRecord(
        psnr_db=psnr(gt_img, recon_img),
        ssim=ssim(to_grayscale(gt_img), to_grayscale(recon_img)),
        prm=report.prm,
    )


def format_csv_row(image_id: str, variant: str, rec: EvalRecord) -> str:
    """image_id, variant, then the three metrics; five fields total."""
    def fmt(v: float) -> str:
        return "inf" if np.isinf(v) else f"{v:.6f}"

    return f"{image_id},{variant},{fmt(rec.psnr_db)},{fmt(rec.ssim)},{fmt(rec.prm)}"


def format_match_report(report: PrmReport) -> str:
    """One 'recon_idx gt_idx ratio' line per match."""
    return "\n".join(f"{i} {j} {r:.6f}" for i, j, r in report.matches)
