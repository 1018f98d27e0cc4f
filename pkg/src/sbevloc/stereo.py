"""Dense depth from rectified stereo pairs.

A deliberately simple stand-in for production stereo: winner-take-all SAD
block matching with a left-right consistency check, followed by guided
edge-aware smoothing and hole filling. Disparity maps use -1 for invalid
pixels; depth maps use 0. The rest of the pipeline can also ingest
precomputed depth files and skip this module entirely.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError
from .geometry import Intrinsics

DISPARITY_INVALID = -1.0
DEPTH_INVALID = 0.0

DEFAULT_BLOCK_SIZE = 9
DEFAULT_MAX_DISPARITY = 128
DEFAULT_MIN_DISPARITY = 0.5   # px; at or below this, depth is meaningless
DEFAULT_DEPTH_RANGE = (0.5, 80.0)


def _box_sum_valid(a: np.ndarray, radius: int) -> np.ndarray:
    """Full-window box sums; positions whose window spills out get +inf."""
    k = 2 * radius + 1
    h, w = a.shape
    out = np.full((h, w), np.inf)
    if h < k or w < k:
        return out
    c = np.pad(a, ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    out[radius:h - radius, radius:w - radius] = (
        c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k])
    return out


def _box_sum_clamped(a: np.ndarray, radius: int) -> np.ndarray:
    """Box sums over whatever part of the window lies inside the image."""
    c = np.pad(a, ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    h, w = a.shape
    i0 = np.clip(np.arange(h) - radius, 0, h)
    i1 = np.clip(np.arange(h) + radius + 1, 0, h)
    j0 = np.clip(np.arange(w) - radius, 0, w)
    j1 = np.clip(np.arange(w) + radius + 1, 0, w)
    return (c[np.ix_(i1, j1)] - c[np.ix_(i0, j1)]
            - c[np.ix_(i1, j0)] + c[np.ix_(i0, j0)])


def disparity_block_match(left: np.ndarray, right: np.ndarray,
                          block_size: int = DEFAULT_BLOCK_SIZE,
                          max_disparity: int = DEFAULT_MAX_DISPARITY) -> np.ndarray:
    """Whole-pixel WTA SAD matching along epipolar rows.

    Pixels failing the left-right consistency check (>1 px disagreement) or
    without a fully interior window are invalid (-1).
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape:
        raise InputError(f"image shapes differ: {left.shape} vs {right.shape}")
    if block_size < 3 or block_size % 2 == 0:
        raise InputError("block size must be odd and >= 3")
    if max_disparity < 1:
        raise InputError("max disparity must be >= 1")
    radius = block_size // 2
    h, w = left.shape

    best_l = np.full((h, w), np.inf)
    disp_l = np.full((h, w), -1, dtype=np.int64)
    best_r = np.full((h, w), np.inf)
    disp_r = np.full((h, w), -1, dtype=np.int64)
    for d in range(min(max_disparity, w)):
        ov = w - d
        sad = _box_sum_valid(np.abs(left[:, d:] - right[:, :ov]), radius)
        # left pixel u (u >= d) matches right pixel u-d
        better = sad < best_l[:, d:]
        best_l[:, d:][better] = sad[better]
        disp_l[:, d:][better] = d
        # the same costs, indexed from the right image
        better = sad < best_r[:, :ov]
        best_r[:, :ov][better] = sad[better]
        disp_r[:, :ov][better] = d

    valid = disp_l >= 0
    us = np.arange(w)[None, :].repeat(h, axis=0)
    ur = us - np.where(valid, disp_l, 0)
    partner = disp_r[np.arange(h)[:, None], ur]
    valid &= (partner >= 0) & (np.abs(disp_l - partner) <= 1)

    out = disp_l.astype(np.float64)
    out[~valid] = DISPARITY_INVALID
    return out


def smooth_disparity(disparity: np.ndarray, guide: np.ndarray,
                     radius: int = 8, eps: float = 1e-2) -> np.ndarray:
    """Fill small holes, then guided-filter the field with edge awareness.

    Invalid pixels are filled from valid neighbors when at least 25% of the
    (2r+1)^2 window is valid; the remaining invalid pixels stay -1.
    """
    disparity = np.asarray(disparity, dtype=np.float64)
    guide = np.asarray(guide, dtype=np.float64)
    if disparity.shape != guide.shape:
        raise InputError(f"shapes differ: {disparity.shape} vs {guide.shape}")

    valid = disparity >= 0
    window = float((2 * radius + 1) ** 2)
    count = _box_sum_clamped(valid.astype(np.float64), radius)
    fill_sum = _box_sum_clamped(np.where(valid, disparity, 0.0), radius)
    fillable = ~valid & (count >= 0.25 * window)
    p = np.where(valid, disparity, 0.0)
    p[fillable] = fill_sum[fillable] / count[fillable]
    valid = valid | fillable

    # guided filter with mask-weighted window statistics
    m = valid.astype(np.float64)
    n = _box_sum_clamped(m, radius)
    safe_n = np.maximum(n, 1.0)
    mean_i = _box_sum_clamped(guide * m, radius) / safe_n
    mean_p = _box_sum_clamped(p * m, radius) / safe_n
    corr_ip = _box_sum_clamped(guide * p * m, radius) / safe_n
    corr_ii = _box_sum_clamped(guide * guide * m, radius) / safe_n
    var_i = corr_ii - mean_i * mean_i
    cov_ip = corr_ip - mean_i * mean_p
    a = cov_ip / (var_i + eps)
    b = mean_p - a * mean_i
    mean_a = _box_sum_clamped(a * m, radius) / safe_n
    mean_b = _box_sum_clamped(b * m, radius) / safe_n
    q = mean_a * guide + mean_b

    out = np.where(valid, q, DISPARITY_INVALID)
    return out


def disparity_to_depth(disparity: np.ndarray, k: Intrinsics,
                       min_disparity: float = DEFAULT_MIN_DISPARITY,
                       depth_range: tuple = DEFAULT_DEPTH_RANGE) -> np.ndarray:
    """depth = fx * baseline / disparity; out-of-range pixels become 0."""
    disparity = np.asarray(disparity, dtype=np.float64)
    ok = disparity > min_disparity
    depth = np.zeros_like(disparity)
    np.divide(k.fx * k.baseline, disparity, out=depth, where=ok)
    lo, hi = depth_range
    depth[(depth < lo) | (depth > hi)] = DEPTH_INVALID
    return depth
