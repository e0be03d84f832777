"""Variance components of the bootstrap theta matrix and interval construction.

The theta matrix is treated as a one-way random-effects layout: rows are
bootstrap replicates, columns are random splits within a replicate. The
between-row component is the bootstrap variance of the CV estimate; the
within-row component is split-to-split Monte-Carlo noise.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from statistics import NormalDist
from typing import Literal

import numpy as np

from .errors import CalibrationDegenerate, InsufficientReplication, ZeroBetweenVariance
from .types import ThetaMatrix, VarianceComponents

# a row losing more than this fraction of its cells is dropped entirely
MAX_MISSING_FRACTION = 0.2
MAX_CALIBRATION_ATTEMPTS = 100
# resampled row indices drawn per block (bounds memory for large theta)
CALIBRATION_CHUNK = 2_000_000


class NonpositiveVarianceWarning(UserWarning):
    """The moment estimate of the between-bootstrap variance was clamped at zero."""


def drop_incomplete_rows(theta: ThetaMatrix) -> tuple[np.ndarray, int]:
    """Remove rows missing more than 20% of their cells (or left with < 2)."""
    v = theta.values
    present = ~np.isnan(v)
    k = present.sum(axis=1)
    keep = (k >= 2) & (v.shape[1] - k <= MAX_MISSING_FRACTION * v.shape[1])
    return v[keep], int((~keep).sum())


def _row_stats(values: np.ndarray):
    present = ~np.isnan(values)
    k = present.sum(axis=1)
    filled = np.where(present, values, 0.0)
    means = filled.sum(axis=1) / k
    ss = np.where(present, (values - means[:, None]) ** 2, 0.0).sum(axis=1)
    return means, ss, k


def _components(means, ss, k):
    tau0_sq = ss.sum() / (k - 1).sum()
    between = np.var(means, ddof=1)
    raw = between - tau0_sq * np.mean(1.0 / k)
    return float(raw), float(tau0_sq)


def estimate_components(theta: ThetaMatrix, adj_factor: float = 1.0) -> VarianceComponents:
    """Closed-form moment estimates of the between- and within-bootstrap variances.

    With complete rows this is

        sigma_bt^2 = var(row means) - SS_within / (B_CV (B_CV - 1) B_BOOT)
        tau0^2     = SS_within / (B_BOOT (B_CV - 1))

    Rows with a few missing cells use their own cell counts; rows missing
    more than 20% of cells are dropped first. A negative estimate is clamped
    to zero (``sigma_bt_sq_raw`` keeps the unclamped value).
    """
    if not 0 < adj_factor <= 1:
        raise ValueError(f"adj_factor must lie in (0, 1], got {adj_factor}")
    values, _ = drop_incomplete_rows(theta)
    if values.shape[0] < 2 or theta.b_cv < 2:
        raise InsufficientReplication(
            f"need at least 2 usable bootstrap rows and 2 splits per row, "
            f"got {values.shape[0]} x {theta.b_cv}"
        )
    raw, tau0_sq = _components(*_row_stats(values))
    if raw <= 0 and not np.isclose(raw, 0.0, atol=1e-15):
        warnings.warn(
            f"between-bootstrap variance estimate {raw:.3g} clamped to 0",
            NonpositiveVarianceWarning,
            stacklevel=2,
        )
    return VarianceComponents(
        sigma_bt_sq=max(raw, 0.0),
        tau0_sq=max(tau0_sq, 0.0),
        sigma_bt_sq_raw=raw,
        adj_factor=float(adj_factor),
    )


def variance_of_variance(vc: VarianceComponents, b_boot: int, b_cv: int) -> float:
    """Approximate sampling variance of the between-bootstrap estimate (normal errors)."""
    if b_boot < 2 or b_cv < 2:
        raise ValueError("b_boot and b_cv must both be >= 2")
    within = vc.tau0_sq / b_cv
    return 2 * (vc.sigma_bt_sq + within) ** 2 / (b_boot - 1) + 2 * within**2 / (
        b_boot * (b_cv - 1)
    )


def optimal_allocation(
    vc: VarianceComponents,
    total_fits: int,
    rule: Literal["exact", "ratio"] = "exact",
) -> tuple[int, int]:
    """Split a fit budget into (b_boot, b_cv).

    ``rule="ratio"`` is the closed-form approximation b_cv = round(tau0^2 /
    sigma_bt^2). ``rule="exact"`` scans every b_cv in [2, total_fits // 2]
    with b_boot = total_fits // b_cv and returns the pair with the smallest
    ``variance_of_variance`` (smallest b_cv on ties). The two agree to within
    one or two splits; the exact scan is what the variance formula actually
    minimizes.
    """
    if total_fits < 4:
        raise ValueError("total_fits must be >= 4")
    if vc.sigma_bt_sq <= 0:
        raise ZeroBetweenVariance(
            "between-bootstrap variance is zero; the allocation is undefined. "
            "Increase the pilot budget (more bootstraps or more splits per bootstrap)."
        )
    hi = total_fits // 2
    if rule == "ratio":
        b_cv = int(min(max(round(vc.tau0_sq / vc.sigma_bt_sq), 2), hi))
        return max(total_fits // b_cv, 2), b_cv
    if rule != "exact":
        raise ValueError(f"unknown allocation rule {rule!r}")
    k = np.arange(2, hi + 1)
    b = np.maximum(total_fits // k, 2)
    within = vc.tau0_sq / k
    v = 2 * (vc.sigma_bt_sq + within) ** 2 / (b - 1) + 2 * within**2 / (b * (k - 1))
    i = int(np.argmin(v))
    return int(b[i]), int(k[i])


def z_critical(alpha: float) -> float:
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return NormalDist().inv_cdf(1 - alpha / 2)


def normal_ci(point: float, se: float, alpha: float = 0.05) -> tuple[float, float]:
    if se < 0:
        raise ValueError("se must be nonnegative")
    half = z_critical(alpha) * se
    return point - half, point + half


def critical_ci(point: float, se: float, c: float) -> tuple[float, float]:
    return point - c * se, point + c * se


@dataclass(frozen=True)
class CalibrationResult:
    c_crit: float
    z_star_sample: np.ndarray
    l_count: int
    rejected: int = 0


def empirical_quantile(sample: np.ndarray, level: float) -> float:
    """Order statistic ceil(level * L) (1-based) of the sample."""
    s = np.sort(np.asarray(sample))
    j = max(math.ceil(level * s.size - 1e-9), 1)
    return float(s[j - 1])


def calibrate(
    theta: ThetaMatrix,
    alpha: float,
    l_reps: int,
    rng: np.random.Generator,
) -> CalibrationResult:
    """Critical value for the standardized CV estimate under small budgets.

    Whole rows of theta are resampled with replacement, the between-bootstrap
    variance is re-estimated on each resample, and Z_l * sigma / sigma*_l is
    simulated with Z_l standard normal. Resamples with a nonpositive estimate
    are redrawn (up to 100 times each); if more than half of the first-round
    resamples are nonpositive the matrix is too small to calibrate.
    """
    if l_reps < 1:
        raise ValueError("l_reps must be >= 1")
    values, _ = drop_incomplete_rows(theta)
    b = values.shape[0]
    if b < 2 or theta.b_cv < 2:
        raise InsufficientReplication("calibration needs at least a 2 x 2 theta matrix")
    means, ss, k = _row_stats(values)
    raw, _ = _components(means, ss, k)
    if raw <= 0:
        raise CalibrationDegenerate(
            "between-bootstrap variance estimate is not positive; nothing to calibrate"
        )
    sigma = math.sqrt(raw)

    chunk = max(1, CALIBRATION_CHUNK // b)

    def resampled(count: int) -> np.ndarray:
        out = np.empty(count)
        for lo in range(0, count, chunk):
            idx = rng.integers(0, b, size=(min(chunk, count - lo), b))
            m, s, kk = means[idx], ss[idx], k[idx]
            tau = s.sum(axis=1) / (kk - 1).sum(axis=1)
            out[lo:lo + idx.shape[0]] = np.var(m, axis=1, ddof=1) - tau * np.mean(1.0 / kk, axis=1)
        return out

    sig_star = resampled(l_reps)
    bad = sig_star <= 0
    rejected = int(bad.sum())
    if rejected > 0.5 * l_reps:
        raise CalibrationDegenerate(
            f"{rejected} of {l_reps} calibration resamples gave a nonpositive variance"
        )
    for _ in range(MAX_CALIBRATION_ATTEMPTS):
        if not bad.any():
            break
        sig_star[bad] = resampled(int(bad.sum()))
        bad = sig_star <= 0
    if bad.any():
        raise CalibrationDegenerate("calibration resamples kept producing nonpositive variances")
    z = rng.standard_normal(l_reps)
    z_star = z * sigma / np.sqrt(sig_star)
    c = empirical_quantile(np.abs(z_star), 1 - alpha)
    return CalibrationResult(c_crit=c, z_star_sample=z_star, l_count=l_reps, rejected=rejected)
