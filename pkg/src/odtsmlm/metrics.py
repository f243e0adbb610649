"""Volume SSIM and assignment-based 3-D localization error."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from .domain import FluorophoreSet, ScatteringVolume

SSIM_TRUNCATE = 3.5


def _as_array(v):
    return v.values if isinstance(v, ScatteringVolume) else np.asarray(v, float)


def ssim_volume(a, b, window_sigma: float = 1.5, dynamic_range: float | None = None) -> float:
    """Mean local SSIM with a Gaussian window (sigma in voxels, reflective borders).

    ``dynamic_range`` defaults to the range of ``a``; the stabilizers are
    ``(0.01 R)^2`` and ``(0.03 R)^2``.
    """
    if isinstance(a, ScatteringVolume) and isinstance(b, ScatteringVolume) and a.grid != b.grid:
        raise ValueError("SSIM needs volumes on identical grids")
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValueError(f"SSIM needs identical shapes, got {x.shape} and {y.shape}")
    if dynamic_range is None:
        dynamic_range = float(x.max() - x.min())
    if dynamic_range <= 0:
        dynamic_range = 1.0
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2

    def blur(v):
        return ndimage.gaussian_filter(v, window_sigma, mode="reflect", truncate=SSIM_TRUNCATE)

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple  # (estimate index, truth index, distance um)
    unmatched_estimates: int
    unmatched_truth: int
    rmse_3d: float | None

    @property
    def n_matched(self) -> int:
        return len(self.pairs)


def match_and_rmse(estimates, truth, radius: float = 0.5) -> MatchResult:
    """One-to-one matching within ``radius`` that maximizes the number of pairs,
    then minimizes their summed distance; RMSE over the matched pairs."""
    if not radius > 0:
        raise ValueError("radius must be > 0")
    pe = np.asarray(estimates.positions if isinstance(estimates, FluorophoreSet) else estimates,
                    float).reshape(-1, 3)
    pt = np.asarray(truth.positions if isinstance(truth, FluorophoreSet) else truth,
                    float).reshape(-1, 3)
    if len(pe) == 0 or len(pt) == 0:
        return MatchResult((), len(pe), len(pt), None)
    d = np.linalg.norm(pe[:, None, :] - pt[None, :, :], axis=-1)
    big = 10.0 * radius * (min(len(pe), len(pt)) + 1)
    cost = np.where(d <= radius, d, big)
    rows, cols = linear_sum_assignment(cost)
    pairs = tuple((int(r), int(c), float(d[r, c])) for r, c in zip(rows, cols) if d[r, c] <= radius)
    rmse = float(np.sqrt(np.mean([p[2] ** 2 for p in pairs]))) if pairs else None
    return MatchResult(pairs, len(pe) - len(pairs), len(pt) - len(pairs), rmse)
