"""Image-quality metrics for spatiotemporal reconstructions.

RRMSE is the Frobenius-relative error over the whole stack (or over masked
pixel rows).  SSIM follows the standard single-scale formulation: Gaussian
11x11 window with sigma 1.5, stabilizing constants ``(0.01 D)^2`` and
``(0.03 D)^2`` where ``D`` is the dynamic range of the reference stack,
local statistics over valid window positions only, averaged across frames.
The lesion activity curve is the per-frame mean over a region of interest;
comparing two curves with RRMSE gives the LAC error.  RRMSE and LAC are
invariant to pixel enumeration (given matching masks); SSIM, being a local
spatial statistic, is not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from proxnf.grid import ImageStack, RoiMask

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def rrmse(est: ImageStack, truth: ImageStack, mask: RoiMask | None = None) -> float:
    """Relative root-mean-square error ``||est - truth||_F / ||truth||_F``."""
    a, b = _matched_coeffs(est, truth, mask)
    denom = np.linalg.norm(b)
    if denom == 0.0:
        raise ValueError("reference stack has zero norm on the requested region")
    return float(np.linalg.norm(a - b) / denom)


def per_frame_rrmse(est: ImageStack, truth: ImageStack, mask: RoiMask | None = None) -> np.ndarray:
    """RRMSE of each frame against the matching reference frame."""
    a, b = _matched_coeffs(est, truth, mask)
    denom = np.linalg.norm(b, axis=0)
    if np.any(denom == 0.0):
        raise ValueError("reference frame has zero norm")
    return np.linalg.norm(a - b, axis=0) / denom


def _matched_coeffs(est, truth, mask):
    if est.coeffs.shape != truth.coeffs.shape:
        raise ValueError("stacks have different shapes")
    if mask is None:
        return est.coeffs, truth.coeffs
    if mask.member_pixels.max() >= est.coeffs.shape[0]:
        raise ValueError("mask indexes pixels outside the stack")
    return est.coeffs[mask.member_pixels], truth.coeffs[mask.member_pixels]


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(est: ImageStack, truth: ImageStack, mask: RoiMask | None = None) -> float:
    """Mean local structural similarity across frames.

    Local means/variances/covariance are Gaussian-weighted over valid
    (fully interior) window positions.  With a mask, only windows centered
    on mask pixels contribute to the average.
    """
    if est.coeffs.shape != truth.coeffs.shape:
        raise ValueError("stacks have different shapes")
    side = est.grid.side_pixels
    if side < SSIM_WINDOW:
        raise ValueError(f"frame side {side} smaller than SSIM window {SSIM_WINDOW}")
    d_range = float(truth.coeffs.max() - truth.coeffs.min())
    if d_range == 0.0:
        d_range = 1.0
    c1 = (0.01 * d_range) ** 2
    c2 = (0.03 * d_range) ** 2
    w = _gaussian_window()
    half = (SSIM_WINDOW - 1) // 2

    center_sel = None
    if mask is not None:
        picked = np.zeros((side, side), dtype=bool)
        flat = np.zeros(side * side, dtype=bool)
        flat[mask.member_pixels] = True
        picked = flat.reshape(side, side)
        center_sel = picked[half:side - half, half:side - half]
        if not np.any(center_sel):
            raise ValueError("mask has no pixels that can center a full window")

    total = 0.0
    for k in range(est.grid.frames):
        x = est.frame_image(k)
        y = truth.frame_image(k)
        mu_x = convolve2d(x, w, mode="valid")
        mu_y = convolve2d(y, w, mode="valid")
        var_x = convolve2d(x * x, w, mode="valid") - mu_x**2
        var_y = convolve2d(y * y, w, mode="valid") - mu_y**2
        cov = convolve2d(x * y, w, mode="valid") - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
        smap = num / den
        total += float(smap[center_sel].mean() if center_sel is not None else smap.mean())
    return total / est.grid.frames


def lesion_activity_curve(stack: ImageStack, roi: RoiMask) -> np.ndarray:
    """Per-frame mean over the region of interest (length-K vector)."""
    if roi.member_pixels.max() >= stack.coeffs.shape[0]:
        raise ValueError("roi indexes pixels outside the stack")
    return stack.coeffs[roi.member_pixels].mean(axis=0)


def lac_rrmse(est: ImageStack, truth: ImageStack, roi: RoiMask) -> float:
    """RRMSE between the two lesion activity curves."""
    a = lesion_activity_curve(est, roi)
    b = lesion_activity_curve(truth, roi)
    denom = np.linalg.norm(b)
    if denom == 0.0:
        raise ValueError("reference activity curve has zero norm")
    return float(np.linalg.norm(a - b) / denom)


@dataclass(frozen=True)
class MetricsReport:
    """Whole-image and region-of-interest quality summary."""

    rrmse: float
    ssim: float
    roi_rrmse: float | None
    roi_ssim: float | None
    lac_rrmse: float | None
    frame_rrmse: tuple[float, ...] = field(default_factory=tuple)

    def as_dict(self) -> dict:
        return {
            "rrmse": self.rrmse,
            "ssim": self.ssim,
            "roi_rrmse": self.roi_rrmse,
            "roi_ssim": self.roi_ssim,
            "lac_rrmse": self.lac_rrmse,
            "frame_rrmse": list(self.frame_rrmse),
        }


def evaluate_stacks(est: ImageStack, truth: ImageStack, roi: RoiMask | None = None) -> MetricsReport:
    """Compute the full metrics report for an estimate against a reference."""
    report = MetricsReport(
        rrmse=rrmse(est, truth),
        ssim=ssim(est, truth),
        roi_rrmse=rrmse(est, truth, roi) if roi is not None else None,
        roi_ssim=ssim(est, truth, roi) if roi is not None else None,
        lac_rrmse=lac_rrmse(est, truth, roi) if roi is not None else None,
        frame_rrmse=tuple(float(v) for v in per_frame_rrmse(est, truth)),
    )
    return report
