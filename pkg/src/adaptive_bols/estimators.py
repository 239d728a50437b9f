"""Batched OLS test statistics, the pooled robust OLS baseline, and weight algebra.

The statistics share array kernels (``*_kernel`` functions) that take batch
columns with the batch axis last, so the Monte Carlo engine can evaluate
thousands of replications at once with exactly the arithmetic used for a
single :class:`EstimatorReport`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .core import (
    DEFAULT_MIN_UNITS,
    TREATED,
    BatchSummary,
    ExperimentTrace,
    InvalidBatchError,
    Validity,
    VarianceMode,
    default_min_units,
    validate_batch,
)
from .stats import normal_cdf, normal_quantile, normal_sf

HET_BOLS = "het-bols"
HOM_BOLS = "hom-bols"
ROBUST_OLS = "robust-ols"
STATISTICS = (HET_BOLS, HOM_BOLS, ROBUST_OLS)

HC_KINDS = ("HC0", "HC2", "HC3")
ALTERNATIVES = ("two-sided", "greater", "less")


class DegenerateWeightError(ValueError):
    """A batch variance is not strictly positive, so its weight is undefined."""


class MissingUnitDataError(ValueError):
    """Pooled OLS needs per-unit outcomes, not just batch summaries."""


@dataclass(frozen=True)
class BatchContribution:
    t: int
    diff: float
    variance: float
    weight: float
    z: float


@dataclass(frozen=True)
class EstimatorReport:
    statistic: str
    valid: bool
    alpha: float
    null_value: float
    T: int
    variance_label: str
    delta_hat: Optional[float] = None
    se: Optional[float] = None
    z: Optional[float] = None
    p_value: Optional[float] = None
    ci_low: Optional[float] = None
    ci_high: Optional[float] = None
    per_batch: tuple = ()
    alternative: str = "two-sided"
    reason: str = "ok"

    @property
    def rejects(self) -> bool:
        return self.valid and self.p_value <= self.alpha


# --------------------------------------------------------------------------
# per-batch pieces


def batch_diff(b: BatchSummary) -> float:
    if b.mean1 is None or b.mean0 is None:
        raise InvalidBatchError(b.t, Validity.EMPTY_ARM)
    return b.mean1 - b.mean0


def batch_variance(b: BatchSummary) -> float:
    """Variance of the batch difference, ``var1/n1 + var0/n0``.

    The balance form ``(var1/pi + var0/(1-pi))/n`` is evaluated too and the
    two must agree.
    """
    if b.n1 == 0 or b.n0 == 0:
        raise InvalidBatchError(b.t, Validity.EMPTY_ARM)
    if b.var1 is None or b.var0 is None:
        raise InvalidBatchError(b.t, Validity.INSUFFICIENT_UNITS)
    v = b.var1 / b.n1 + b.var0 / b.n0
    pi = b.share
    v_share = (b.var1 / pi + b.var0 / (1.0 - pi)) / b.n
    if not math.isclose(v, v_share, rel_tol=1e-12, abs_tol=1e-300):
        raise ArithmeticError(f"batch {b.t}: variance forms disagree ({v!r} vs {v_share!r})")
    return v


# --------------------------------------------------------------------------
# weights and combination


def precision_weights(v: Sequence[float]):
    """Return ``(w, S, w/S)`` with ``w_t = v_t**-0.5``."""
    v = np.asarray(v, dtype=float)
    if v.size == 0 or np.any(~(v > 0)):
        raise DegenerateWeightError("all batch variances must be positive")
    w = 1.0 / np.sqrt(v)
    S = float(w.sum())
    return w, S, w / S


def weighted_delta(diffs: Sequence[float], normalized: Sequence[float]) -> float:
    diffs = np.asarray(diffs, dtype=float)
    normalized = np.asarray(normalized, dtype=float)
    if diffs.shape != normalized.shape or diffs.size == 0:
        raise ValueError("need equal-length, non-empty difference and weight lists")
    return float(np.dot(normalized, diffs))


def weighted_se(T: int, S: float, v: Optional[Sequence[float]] = None) -> float:
    """``sqrt(T)/S``.

    With the realized ``v`` the direct variance ``sum((w/S)^2 v)`` is also
    computed and must equal ``T/S^2``.
    """
    if T < 1 or not S > 0:
        raise ValueError("need T >= 1 and S > 0")
    if v is not None:
        v = np.asarray(v, dtype=float)
        w = 1.0 / np.sqrt(v)
        direct = float(np.sum((w / S) ** 2 * v))
        if not math.isclose(direct, T / S**2, rel_tol=1e-12):
            raise ArithmeticError("weighted variance identity failed")
    return math.sqrt(T) / S


def critical_value(alpha: float, alternative: str = "two-sided") -> float:
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if alternative == "two-sided":
        return normal_quantile(1.0 - alpha / 2.0) if alpha < 1.0 else 0.0
    return normal_quantile(1.0 - alpha)


def p_value(z, alternative: str = "two-sided"):
    if alternative == "two-sided":
        return 2.0 * normal_sf(np.abs(z))
    if alternative == "greater":
        return normal_sf(z)
    if alternative == "less":
        return normal_cdf(z)
    raise ValueError(f"unknown alternative {alternative!r}")


def confidence_interval(delta_hat: float, se: float, alpha: float = 0.05):
    q = critical_value(alpha)
    return delta_hat - q * se, delta_hat + q * se


def bols_kernel(diff, v, c: float = 0.0):
    """Combine batches along the last axis: ``(delta_hat, se, z)``.

    ``z`` is the scaled sum of per-batch z-scores; rows with a non-positive
    or NaN variance come back as NaN.
    """
    diff = np.asarray(diff, dtype=float)
    v = np.asarray(v, dtype=float)
    T = v.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        sd = np.sqrt(np.where(v > 0, v, np.nan))
        w = 1.0 / sd
        S = w.sum(axis=-1)
        delta = (w * diff).sum(axis=-1) / S
        se = math.sqrt(T) / S
        z = ((diff - c) / sd).sum(axis=-1) / math.sqrt(T)
    return delta, se, z


def hom_variance_kernel(n1, n0, ss1, ss0, pooling: str = "batch"):
    """Batch difference variance under a common arm variance.

    ``batch`` pools residuals within each batch (divisor ``n_t - 2``);
    ``global`` pools over all batches along the last axis (divisor
    ``sum(n_t) - 2T``).
    """
    n1 = np.asarray(n1, dtype=float)
    n0 = np.asarray(n0, dtype=float)
    ss = np.asarray(ss1, dtype=float) + np.asarray(ss0, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if pooling == "batch":
            s2 = ss / (n1 + n0 - 2.0)
        elif pooling == "global":
            T = n1.shape[-1]
            s2 = ss.sum(axis=-1, keepdims=True) / ((n1 + n0).sum(axis=-1, keepdims=True) - 2.0 * T)
        else:
            raise ValueError(f"unknown pooling {pooling!r}")
        return s2 * (1.0 / n1 + 1.0 / n0)


def pooled_arm_moments(n, mean, ss):
    """Merge per-batch ``(n, mean, ss)`` along the last axis into totals."""
    n = np.asarray(n, dtype=float)
    mean = np.asarray(mean, dtype=float)
    ss = np.asarray(ss, dtype=float)
    has = n > 0
    N = n.sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        grand = np.where(has, n * mean, 0.0).sum(axis=-1) / N
        between = np.where(has, n * (mean - grand[..., None]) ** 2, 0.0).sum(axis=-1)
    within = np.where(n >= 2, ss, 0.0).sum(axis=-1)
    return N, grand, within + between


def robust_ols_kernel(N1, N0, mean1, mean0, rss1, rss0, c: float = 0.0, hc: str = "HC0"):
    """Difference in means with its sandwich SE for a binary regressor.

    With an intercept and a treatment dummy the residuals are deviations
    from arm means and every unit in arm ``a`` has leverage ``1/N_a``.
    """
    N1 = np.asarray(N1, dtype=float)
    N0 = np.asarray(N0, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if hc == "HC0":
            var = rss1 / N1**2 + rss0 / N0**2
        elif hc == "HC2":
            var = rss1 / (N1 * (N1 - 1.0)) + rss0 / (N0 * (N0 - 1.0))
        elif hc == "HC3":
            var = rss1 / (N1 - 1.0) ** 2 + rss0 / (N0 - 1.0) ** 2
        else:
            raise ValueError(f"unknown HC flavour {hc!r}")
        min_n = 1.0 if hc == "HC0" else 2.0
        ok = (N1 >= min_n) & (N0 >= min_n) & (var > 0)
        coef = np.asarray(mean1, dtype=float) - np.asarray(mean0, dtype=float)
        se = np.where(ok, np.sqrt(np.where(ok, var, 1.0)), np.nan)
        z = np.where(ok, (coef - c) / se, np.nan)
    return coef, se, z


def bols_valid_mask(n1, n0, var1, var0, min_units: int = DEFAULT_MIN_UNITS):
    """Per-batch validity matching :func:`core.validate_batch`."""
    n1 = np.asarray(n1)
    n0 = np.asarray(n0)
    var1 = np.asarray(var1, dtype=float)
    var0 = np.asarray(var0, dtype=float)
    enough = (n1 >= max(min_units, 1)) & (n0 >= max(min_units, 1))
    known = ~np.isnan(var1) & ~np.isnan(var0)
    return enough & known & ((var1 > 0) | (var0 > 0))


# --------------------------------------------------------------------------
# reports


def _check_common(alpha: float, alternative: str):
    if not 0.0 < alpha <= 1.0:
        raise ValueError("alpha must lie in (0, 1]")
    if alternative not in ALTERNATIVES:
        raise ValueError(f"unknown alternative {alternative!r}")


def _first_invalid(trace: ExperimentTrace, min_units: int):
    for b in trace.batches:
        check = validate_batch(b, min_units)
        if not check.valid:
            return b.t, check.reason
    return None


def _report(statistic, trace, c, alpha, alternative, label, diffs, v, z_form=None):
    w, S, normalized = precision_weights(v)
    T = len(v)
    delta = weighted_delta(diffs, normalized)
    se = weighted_se(T, S, v)
    z_t = (np.asarray(diffs) - c) / np.sqrt(v)
    z = float(z_t.sum() / math.sqrt(T))
    z_ratio = (delta - c) / se
    if not math.isclose(z, z_ratio, rel_tol=1e-10, abs_tol=1e-10):
        raise ArithmeticError(f"z-statistic forms disagree: {z!r} vs {z_ratio!r}")
    lo, hi = confidence_interval(delta, se, alpha)
    per_batch = tuple(
        BatchContribution(b.t, float(d), float(vt), float(wt), float(zt))
        for b, d, vt, wt, zt in zip(trace.batches, diffs, v, normalized, z_t)
    )
    return EstimatorReport(
        statistic, True, alpha, c, T, label, delta, se, z, float(p_value(z, alternative)),
        lo, hi, per_batch, alternative,
    )


def _invalid(statistic, trace, c, alpha, alternative, label, reason):
    return EstimatorReport(statistic, False, alpha, c, trace.T, label,
                           alternative=alternative, reason=reason)


def het_bols(trace: ExperimentTrace, c: float = 0.0, alpha: float = 0.05,
             mode: Union[None, str, VarianceMode] = None, alternative: str = "two-sided",
             min_units: Optional[int] = None) -> EstimatorReport:
    """Heteroskedasticity-robust batched OLS statistic.

    Each batch contributes its difference in arm means standardized by its
    own unequal-variance SE; the test statistic is the sum of those
    z-scores over ``sqrt(T)``.  ``mode`` re-estimates the arm variances
    first; by default the trace's own variances are used.
    """
    _check_common(alpha, alternative)
    if mode is not None:
        trace = trace.with_variance_mode(mode)
    label = trace.variance_mode.label
    if min_units is None:
        min_units = default_min_units(trace.variance_mode)
    bad = _first_invalid(trace, min_units)
    if bad is not None:
        return _invalid(HET_BOLS, trace, c, alpha, alternative, label, f"batch {bad[0]}: {bad[1].value}")
    diffs = [batch_diff(b) for b in trace.batches]
    v = [batch_variance(b) for b in trace.batches]
    return _report(HET_BOLS, trace, c, alpha, alternative, label, diffs, v)


def hom_bols(trace: ExperimentTrace, c: float = 0.0, alpha: float = 0.05, pooling: str = "global",
             alternative: str = "two-sided", min_units: Optional[int] = None) -> EstimatorReport:
    """Batched OLS statistic assuming equal arm variances.

    ``pooling="global"`` estimates one residual variance from all batches
    (degrees of freedom ``sum(n_t) - 2T``); ``"batch"`` uses each batch's own
    two-sample residual variance.
    """
    _check_common(alpha, alternative)
    label = f"pooled-residual({pooling})"
    if min_units is None:
        min_units = default_min_units(trace.variance_mode)
    bad = _first_invalid(trace, min_units)
    if bad is not None:
        return _invalid(HOM_BOLS, trace, c, alpha, alternative, label, f"batch {bad[0]}: {bad[1].value}")
    cols = trace.arrays()
    v = hom_variance_kernel(cols["n1"], cols["n0"], cols["ss1"], cols["ss0"], pooling)
    if not np.all(np.isfinite(v) & (v > 0)):
        t = int(np.argmin(np.isfinite(v) & (v > 0))) + 1
        return _invalid(HOM_BOLS, trace, c, alpha, alternative, label,
                        f"batch {t}: {Validity.ZERO_VARIANCE_ESTIMATE.value}")
    diffs = [batch_diff(b) for b in trace.batches]
    return _report(HOM_BOLS, trace, c, alpha, alternative, label, diffs, list(v))


def robust_ols(trace: ExperimentTrace, c: float = 0.0, alpha: float = 0.05, hc: str = "HC0",
               alternative: str = "two-sided") -> EstimatorReport:
    """Pooled regression of the outcome on a treatment dummy with sandwich SE."""
    _check_common(alpha, alternative)
    if hc not in HC_KINDS:
        raise ValueError(f"unknown HC flavour {hc!r}")
    raw = trace.raw_outcomes
    if raw is None:
        raise MissingUnitDataError("robust OLS needs per-unit outcomes (raw_outcomes)")
    y = np.asarray(raw.outcome, dtype=float)
    treated = np.asarray(raw.arm) == TREATED
    N1 = int(treated.sum())
    N0 = len(y) - N1
    if N1 == 0 or N0 == 0:
        return _invalid(ROBUST_OLS, trace, c, alpha, alternative, hc, Validity.EMPTY_ARM.value)
    m1 = math.fsum(y[treated]) / N1
    m0 = math.fsum(y[~treated]) / N0
    rss1 = math.fsum((y[treated] - m1) ** 2)
    rss0 = math.fsum((y[~treated] - m0) ** 2)
    coef, se, z = (float(x) for x in robust_ols_kernel(N1, N0, m1, m0, rss1, rss0, c, hc))
    if math.isnan(se):
        return _invalid(ROBUST_OLS, trace, c, alpha, alternative, hc,
                        Validity.ZERO_VARIANCE_ESTIMATE.value)
    lo, hi = confidence_interval(coef, se, alpha)
    return EstimatorReport(ROBUST_OLS, True, alpha, c, trace.T, hc, coef, se, z,
                           float(p_value(z, alternative)), lo, hi, (), alternative)


def compute(statistic: str, trace: ExperimentTrace, c: float = 0.0, alpha: float = 0.05,
            mode=None, hc: str = "HC0", pooling: str = "global",
            alternative: str = "two-sided", min_units: Optional[int] = None) -> EstimatorReport:
    if statistic == HET_BOLS:
        return het_bols(trace, c, alpha, mode, alternative, min_units)
    if statistic == HOM_BOLS:
        if mode is not None:
            trace = trace.with_variance_mode(mode)
        return hom_bols(trace, c, alpha, pooling, alternative, min_units)
    if statistic == ROBUST_OLS:
        return robust_ols(trace, c, alpha, hc, alternative)
    raise ValueError(f"unknown statistic {statistic!r}")


# --------------------------------------------------------------------------
# closed-form weights under the four design/variance regimes


def weight_table(homoskedastic: bool, adaptive: bool, n: Sequence[float], pi,
                 var1=None, var0=None) -> np.ndarray:
    """Normalized batch weights ``w_t/S`` from their closed forms.

    ``pi`` is a scalar for non-adaptive designs and a per-batch sequence for
    adaptive ones.  The common variance cancels in the homoskedastic rows,
    so ``var1``/``var0`` are only read in the heteroskedastic ones (scalars
    or per-batch sequences).
    """
    n = np.asarray(n, dtype=float)
    if adaptive:
        pi = np.asarray(pi, dtype=float)
        if pi.shape != n.shape:
            raise ValueError("adaptive designs need one share per batch")
    else:
        if np.ndim(pi) != 0:
            raise ValueError("non-adaptive designs use a single fixed share")
        pi = np.full_like(n, float(pi))
    if np.any((pi <= 0) | (pi >= 1)):
        raise ValueError("treatment shares must lie strictly between 0 and 1")
    if homoskedastic:
        raw = np.sqrt(n) if not adaptive else np.sqrt(n * pi * (1.0 - pi))
    else:
        if var1 is None or var0 is None:
            raise ValueError("heteroskedastic weights need both arm variances")
        var1 = np.broadcast_to(np.asarray(var1, dtype=float), n.shape)
        var0 = np.broadcast_to(np.asarray(var0, dtype=float), n.shape)
        raw = np.sqrt(n) * (var1 / pi + var0 / (1.0 - pi)) ** -0.5
    return raw / raw.sum()


def weight_table_cell(homoskedastic: bool, adaptive: bool, t: int, n, pi, var1=None, var0=None) -> float:
    """Single entry ``w_t/S`` (``t`` is 1-based)."""
    return float(weight_table(homoskedastic, adaptive, n, pi, var1, var0)[t - 1])
