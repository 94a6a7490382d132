"""Overlap-restricted image quality metrics (mPSNR via mRMSE, and mSSIM).

SSIM uses a uniform 7x7 window with sample (N-1) covariance, constants
C1 = 0.01^2 and C2 = 0.03^2 for [0, 1] data, and only counts pixels whose
entire window lies inside the overlap. Colour images are reduced to their
channel mean before SSIM; mRMSE averages squared error over channels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractViolation, UndefinedMetricError
from .imaging import binarize

WINDOW = 7
C1 = 0.01 ** 2
C2 = 0.03 ** 2


@dataclass
class MetricReport:
    mpsnr: float
    mssim: float | None
    mrmse: float
    overlap_pixels: int

    def as_lines(self) -> str:
        return "\n".join(f"{k}={getattr(self, k)}" for k in ("mpsnr", "mssim", "mrmse", "overlap_pixels"))

    def csv_row(self) -> str:
        return f"{self.mpsnr},{self.mssim},{self.mrmse},{self.overlap_pixels}"


CSV_HEADER = "mpsnr,mssim,mrmse,overlap_pixels"


def _prep(o_ref, o_tgt, m_olp):
    a = np.asarray(o_ref, dtype=np.float64)
    b = np.asarray(o_tgt, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if b.ndim == 2:
        b = b[:, :, None]
    m = binarize(m_olp)
    if a.shape != b.shape or a.shape[:2] != m.shape:
        raise ContractViolation(f"shape mismatch: {a.shape}, {b.shape}, mask {m.shape}")
    return a, b, m


def mpsnr(o_ref, o_tgt, m_olp):
    """Returns ``(mpsnr_db, mrmse)``; identical overlaps give ``(inf, 0.0)``."""
    a, b, m = _prep(o_ref, o_tgt, m_olp)
    area = m.sum()
    if area == 0:
        raise UndefinedMetricError("empty overlap")
    sq = np.mean((a - b) ** 2, axis=2)
    mrmse = math.sqrt(float((m * sq).sum() / area))
    if mrmse == 0.0:
        return math.inf, 0.0
    return 20.0 * math.log10(1.0 / mrmse), mrmse


def _box_sum(x: np.ndarray, k: int) -> np.ndarray:
    """Sum over every full k x k window; output shape (H-k+1, W-k+1)."""
    rows = sliding_window_view(x, k, axis=0).sum(axis=-1)
    return sliding_window_view(rows, k, axis=1).sum(axis=-1)


def ssim_map(a: np.ndarray, b: np.ndarray, win: int = WINDOW) -> np.ndarray:
    """SSIM at every pixel whose window fits in the image; shape (H-win+1, W-win+1)."""
    n = win * win
    mu_a = _box_sum(a, win) / n
    mu_b = _box_sum(b, win) / n
    cov_norm = n / (n - 1)
    var_a = cov_norm * (_box_sum(a * a, win) / n - mu_a * mu_a)
    var_b = cov_norm * (_box_sum(b * b, win) / n - mu_b * mu_b)
    cov = cov_norm * (_box_sum(a * b, win) / n - mu_a * mu_b)
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return num / den


def mssim(o_ref, o_tgt, m_olp) -> float:
    a, b, m = _prep(o_ref, o_tgt, m_olp)
    ga = a.mean(axis=2)
    gb = b.mean(axis=2)
    if min(m.shape) < WINDOW:
        raise UndefinedMetricError("image smaller than the SSIM window")
    # window fully inside the overlap <=> box sum of the mask equals win^2
    valid = _box_sum(m, WINDOW) >= WINDOW * WINDOW - 0.5
    if not valid.any():
        raise UndefinedMetricError("overlap too thin for a 7x7 window")
    smap = ssim_map(ga, gb)
    return float(smap[valid].sum() / valid.sum())


def metric_report(o_ref, o_tgt, m_olp) -> MetricReport:
    p, r = mpsnr(o_ref, o_tgt, m_olp)
    try:
        s = mssim(o_ref, o_tgt, m_olp)
    except UndefinedMetricError:
        s = None
    return MetricReport(p, s, r, int(binarize(m_olp).sum()))
