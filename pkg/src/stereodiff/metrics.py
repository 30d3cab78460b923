"""Reference metrics: PSNR, windowed SSIM, SAD block-matching disparity, and
the mean absolute disparity error between a super-resolved pair and ground
truth.

Conventions (documented local choices): PSNR is computed on the RGB mean
squared error with identical images capped at 100 dB; SSIM and disparity use
the BT.601 luminance; SSIM averages 8x8 sliding windows with population
statistics; disparity is the per-pixel argmin of the block SAD over
candidates 0..max_disp with ties broken toward the smaller disparity, and the
valid mask keeps only pixels whose full candidate range fits inside both
frames.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .images import StereoImagePair, luminance


class MetricError(ValueError):
    """Shape or parameter violations."""


@dataclass
class DisparityMap:
    """Horizontal disparity in pixels with a validity mask."""

    values: np.ndarray
    valid: np.ndarray
    max_disp: int

    def __post_init__(self) -> None:
        if self.values.shape != self.valid.shape:
            raise MetricError("disparity/valid shape mismatch")


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise MetricError(f"image shape mismatch: {a.shape} vs {b.shape}")


def psnr(a: np.ndarray, b: np.ndarray, cap: float = 100.0) -> float:
    """10*log10(1/MSE) for [0,1] images; identical images return the cap."""
    _check_pair(a, b)
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0.0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)


def _window_sums(x: np.ndarray, w: int) -> np.ndarray:
    """Exact sums of all w x w sliding windows via an integral image."""
    c = np.zeros((x.shape[0] + 1, x.shape[1] + 1), dtype=np.float64)
    c[1:, 1:] = np.cumsum(np.cumsum(x, axis=0), axis=1)
    return c[w:, w:] - c[:-w, w:] - c[w:, :-w] + c[:-w, :-w]


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    window: int = 8,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean local SSIM over sliding windows of the luminance channel.

    For windows with means mu_a, mu_b, population variances s_a, s_b and
    covariance s_ab the local value is
    ((2 mu_a mu_b + C1)(2 s_ab + C2)) / ((mu_a^2 + mu_b^2 + C1)(s_a + s_b + C2))
    with C1 = k1^2 and C2 = k2^2 on the unit data range.  Two constant
    windows therefore score (2 mu_a mu_b + C1) / (mu_a^2 + mu_b^2 + C1).
    """
    _check_pair(a, b)
    la, lb = luminance(a), luminance(b)
    h, w = la.shape
    if h < window or w < window:
        raise MetricError(f"images smaller than the {window}x{window} SSIM window")
    n = float(window * window)
    c1, c2 = k1 * k1, k2 * k2
    mu_a = _window_sums(la, window) / n
    mu_b = _window_sums(lb, window) / n
    var_a = _window_sums(la * la, window) / n - mu_a**2
    var_b = _window_sums(lb * lb, window) / n - mu_b**2
    cov = _window_sums(la * lb, window) / n - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def estimate_disparity(
    left: np.ndarray, right: np.ndarray, max_disp: int = 32, block: int = 9
) -> DisparityMap:
    """Left-to-right SAD block matching over integer disparities 0..max_disp.

    Ties break toward the smaller disparity.  Valid pixels are those whose
    full block fits in the left frame and whose entire candidate range fits in
    the right frame; everywhere else the value is 0 and the mask is False.
    """
    _check_pair(left, right)
    if max_disp < 1:
        raise MetricError(f"max_disp must be >= 1, got {max_disp}")
    if block % 2 == 0 or block < 1:
        raise MetricError(f"block size must be odd, got {block}")
    lum_l, lum_r = luminance(left), luminance(right)
    h, w = lum_l.shape
    if max_disp + block > w:
        raise MetricError(
            f"image width {w} too small for max_disp {max_disp} + block {block}"
        )
    half = block // 2
    costs = np.full((max_disp + 1, h, w), np.inf, dtype=np.float64)
    for d in range(max_disp + 1):
        diff = np.abs(lum_l[:, d:] - lum_r[:, : w - d])
        sums = _window_sums(diff, block)
        costs[d, half : h - half, d + half : w - half] = sums
    values = np.argmin(costs, axis=0).astype(np.float32)
    valid = np.zeros((h, w), dtype=bool)
    valid[half : h - half, max_disp + half : w - half] = True
    values[~valid] = 0.0
    return DisparityMap(values=values, valid=valid, max_disp=max_disp)


def made(
    sr: StereoImagePair,
    gt: StereoImagePair,
    max_disp: int = 32,
    block: int = 9,
) -> float:
    """Mean |d_SR - d_GT| over the intersection of the two validity masks."""
    if sr.shape != gt.shape:
        raise MetricError(f"pair shape mismatch: {sr.shape} vs {gt.shape}")
    d_sr = estimate_disparity(sr.left, sr.right, max_disp, block)
    d_gt = estimate_disparity(gt.left, gt.right, max_disp, block)
    mask = d_sr.valid & d_gt.valid
    if not mask.any():
        raise MetricError("no jointly valid disparity pixels")
    return float(np.mean(np.abs(d_sr.values[mask] - d_gt.values[mask])))


# -- reports -----------------------------------------------------------------

REPORT_FIELDS = ["pair_id", "psnr_l", "psnr_r", "ssim_l", "ssim_r", "made"]


def write_metric_report(
    rows: Sequence[dict[str, Any]], csv_path: str | Path, json_path: str | Path
) -> dict[str, float]:
    """Write the per-pair CSV and aggregate JSON; returns the aggregate."""
    if not rows:
        raise MetricError("empty metric report")
    with Path(csv_path).open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in REPORT_FIELDS})
    aggregate = {
        f"mean_{k}": float(np.mean([float(r[k]) for r in rows]))
        for k in REPORT_FIELDS
        if k != "pair_id"
    }
    aggregate["pairs"] = len(rows)
    Path(json_path).write_text(json.dumps(aggregate, indent=1, sort_keys=True))
    return aggregate
