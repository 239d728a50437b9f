"""Shared domain types and per-batch sufficient statistics."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence, Union

import numpy as np

CONTROL = 0
TREATED = 1
ARMS = (CONTROL, TREATED)

DEFAULT_MIN_UNITS = 2


def default_min_units(mode) -> int:
    """Units per arm and batch a variance mode needs.

    Per-batch estimates need two units; pooled or known variances only need
    the arm to be present so that its batch mean exists.
    """
    kind = mode.kind if isinstance(mode, VarianceMode) else str(mode)
    return 1 if kind in ("pooled", "known") else DEFAULT_MIN_UNITS


class Validity(enum.Enum):
    OK = "ok"
    EMPTY_ARM = "empty_arm"
    ZERO_VARIANCE_ESTIMATE = "zero_variance_estimate"
    INSUFFICIENT_UNITS = "insufficient_units"


@dataclass(frozen=True)
class BatchValidity:
    valid: bool
    reason: Validity

    def __post_init__(self):
        if self.valid != (self.reason is Validity.OK):
            raise ValueError("reason must be OK exactly when valid")


class InvalidBatchError(ValueError):
    """A batch lacks the units or variance needed for a statistic."""

    def __init__(self, t, reason: Validity):
        super().__init__(f"batch {t} is invalid: {reason.value}")
        self.t = t
        self.reason = reason


@dataclass(frozen=True)
class VarianceMode:
    """How per-arm, per-batch outcome variances are estimated.

    ``kind`` is one of ``sample``, ``hc2``, ``hc3``, ``pooled`` or
    ``known``.  ``known`` carries the true ``(var0, var1)`` and only makes
    sense in simulation.
    """

    kind: str = "sample"
    known: Optional[tuple] = None

    KINDS = ("sample", "hc2", "hc3", "pooled", "known")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown variance mode {self.kind!r}")
        if (self.kind == "known") != (self.known is not None):
            raise ValueError("known variances go with kind='known' only")
        if self.known is not None:
            if len(self.known) != 2 or min(self.known) < 0:
                raise ValueError("known must be a (var0, var1) pair of non-negative values")

    @classmethod
    def parse(cls, value: Union[str, "VarianceMode"]) -> "VarianceMode":
        if isinstance(value, VarianceMode):
            return value
        return cls(value.lower())

    @classmethod
    def true_known(cls, var0: float, var1: float) -> "VarianceMode":
        return cls("known", (float(var0), float(var1)))

    @property
    def label(self) -> str:
        return self.kind


SAMPLE = VarianceMode("sample")


def arm_variance_from_ss(ss, n, kind: str):
    """Variance estimate from a within-arm sum of squared deviations.

    Works elementwise on arrays; entries with fewer than two units are NaN.
    The leverage of every unit in a two-group design is ``1/n``, so the HC2
    correction reproduces the unbiased sample variance and HC3 inflates it by
    ``n/(n-1)``.
    """
    ss = np.asarray(ss, dtype=float)
    n = np.asarray(n, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        if kind in ("sample", "hc2"):
            out = ss / (n - 1.0)
        elif kind == "hc3":
            out = ss * n / (n - 1.0) ** 2
        else:
            raise ValueError(f"no per-batch rule for variance mode {kind!r}")
    return np.where(n >= 2, out, np.nan)


@dataclass(frozen=True)
class BatchSummary:
    """Sufficient statistics of one batch.

    ``mean*``/``var*`` are ``None`` when the arm has too few units.  ``ss*``
    holds the within-arm sum of squared deviations so that every variance
    mode, and the pooled homoskedastic residual variance, can be re-derived
    without the raw outcomes.
    """

    t: int
    n1: int
    n0: int
    mean1: Optional[float]
    mean0: Optional[float]
    var1: Optional[float]
    var0: Optional[float]
    ss1: Optional[float] = None
    ss0: Optional[float] = None

    def __post_init__(self):
        if self.n1 < 0 or self.n0 < 0 or self.n1 + self.n0 == 0:
            raise ValueError("batch needs non-negative counts and at least one unit")
        for v in (self.var1, self.var0, self.ss1, self.ss0):
            if v is not None and v < 0:
                raise ValueError("variances must be non-negative")

    @property
    def n(self) -> int:
        return self.n1 + self.n0

    @property
    def share(self) -> float:
        return self.n1 / self.n

    def count(self, arm: int) -> int:
        return self.n1 if arm == TREATED else self.n0


def _arm_stats(values: Sequence[float]):
    # fsum keeps the result independent of input order
    n = len(values)
    if n == 0:
        return 0, None, None
    mean = math.fsum(values) / n
    ss = math.fsum((v - mean) ** 2 for v in values) if n >= 2 else 0.0
    return n, mean, ss


def estimate_arm_variance(values: Sequence[float], mode: Union[str, VarianceMode] = SAMPLE) -> float:
    """Variance of one arm's outcomes in one batch under ``mode``.

    ``pooled`` needs every batch and lives in :func:`pooled_arm_variance`.
    """
    mode = VarianceMode.parse(mode)
    if mode.kind == "pooled":
        raise ValueError("pooled variances need all batches; use pooled_arm_variance")
    n, mean, ss = _arm_stats(list(values))
    if n < 2:
        raise InvalidBatchError(None, Validity.INSUFFICIENT_UNITS)
    if mode.kind == "known":
        raise ValueError("known variances are not estimated")
    return float(arm_variance_from_ss(ss, n, mode.kind))


def pooled_arm_variance(batches: Iterable[Sequence[float]]) -> float:
    """Unbiased arm variance pooled over batches after within-batch centering.

    The divisor is total units minus the number of contributing batches.
    """
    total_ss = []
    units = 0
    groups = 0
    for values in batches:
        n, _, ss = _arm_stats(list(values))
        if n == 0:
            continue
        units += n
        groups += 1
        if ss is not None:
            total_ss.append(ss)
    if units - groups < 1:
        raise InvalidBatchError(None, Validity.INSUFFICIENT_UNITS)
    return math.fsum(total_ss) / (units - groups)


def summarize_batch(outcomes: Iterable, t: int, variance_mode: Union[str, VarianceMode] = SAMPLE) -> BatchSummary:
    """Build a :class:`BatchSummary` from ``(arm, value)`` pairs.

    ``pooled`` mode stores the per-batch sample variance; the pooled value
    is applied across the whole trace by :meth:`ExperimentTrace.with_variance_mode`.
    """
    mode = VarianceMode.parse(variance_mode)
    by_arm = {CONTROL: [], TREATED: []}
    for arm, value in outcomes:
        arm = int(arm)
        if arm not in by_arm:
            raise ValueError(f"arm must be 0 or 1, got {arm}")
        by_arm[arm].append(float(value))
    if not by_arm[CONTROL] and not by_arm[TREATED]:
        raise ValueError("summarize_batch needs at least one outcome")
    n1, mean1, ss1 = _arm_stats(by_arm[TREATED])
    n0, mean0, ss0 = _arm_stats(by_arm[CONTROL])
    var1 = _mode_variance(ss1, n1, mode, TREATED)
    var0 = _mode_variance(ss0, n0, mode, CONTROL)
    return BatchSummary(t, n1, n0, mean1, mean0, var1, var0, ss1, ss0)


def _mode_variance(ss, n, mode: VarianceMode, arm: int):
    if n == 0:
        return None
    if mode.kind == "known":
        return mode.known[arm]
    if ss is None or n < 2:
        return None
    kind = "sample" if mode.kind == "pooled" else mode.kind
    return float(arm_variance_from_ss(ss, n, kind))


def validate_batch(b: BatchSummary, min_units_per_arm: int = DEFAULT_MIN_UNITS) -> BatchValidity:
    if b.n1 == 0 or b.n0 == 0:
        return BatchValidity(False, Validity.EMPTY_ARM)
    if b.n1 < min_units_per_arm or b.n0 < min_units_per_arm:
        return BatchValidity(False, Validity.INSUFFICIENT_UNITS)
    if b.var1 is None or b.var0 is None:
        return BatchValidity(False, Validity.INSUFFICIENT_UNITS)
    if b.var1 == 0 and b.var0 == 0:
        return BatchValidity(False, Validity.ZERO_VARIANCE_ESTIMATE)
    return BatchValidity(True, Validity.OK)


@dataclass(frozen=True)
class UnitRecords:
    """Per-unit records as three aligned arrays (1-based batch, arm, outcome)."""

    batch: np.ndarray
    arm: np.ndarray
    outcome: np.ndarray

    def __post_init__(self):
        if not (len(self.batch) == len(self.arm) == len(self.outcome)):
            raise ValueError("unit record arrays must have equal length")

    def __len__(self):
        return len(self.batch)

    def rows(self):
        for b, a, y in zip(self.batch.tolist(), self.arm.tolist(), self.outcome.tolist()):
            yield b, a, y

    def for_batch(self, t: int):
        sel = self.batch == t
        return list(zip(self.arm[sel].tolist(), self.outcome[sel].tolist()))


@dataclass(frozen=True)
class ExperimentTrace:
    batches: tuple
    policy_name: str = "unknown"
    raw_outcomes: Optional[UnitRecords] = None
    variance_mode: VarianceMode = field(default=SAMPLE)

    def __post_init__(self):
        object.__setattr__(self, "batches", tuple(self.batches))
        for i, b in enumerate(self.batches, start=1):
            if b.t != i:
                raise ValueError(f"batch indices must run 1..T, found {b.t} at position {i}")
        if self.raw_outcomes is not None:
            raw = self.raw_outcomes
            for b in self.batches:
                sel = raw.batch == b.t
                n1 = int(np.count_nonzero(raw.arm[sel] == TREATED))
                n0 = int(np.count_nonzero(raw.arm[sel] == CONTROL))
                if (n1, n0) != (b.n1, b.n0):
                    raise ValueError(f"raw outcome counts disagree with summary of batch {b.t}")

    @property
    def T(self) -> int:
        return len(self.batches)

    @classmethod
    def from_units(cls, units: UnitRecords, policy_name: str = "unknown",
                   variance_mode: Union[str, VarianceMode] = SAMPLE, keep_raw: bool = True) -> "ExperimentTrace":
        mode = VarianceMode.parse(variance_mode)
        order = np.argsort(units.batch, kind="stable")
        batch = units.batch[order]
        arm = units.arm[order]
        y = units.outcome[order]
        ts, starts = np.unique(batch, return_index=True)
        if len(ts) and not np.array_equal(ts, np.arange(1, len(ts) + 1)):
            raise ValueError("batch indices must be consecutive from 1")
        bounds = list(starts) + [len(batch)]
        summaries = [
            summarize_batch(zip(arm[lo:hi].tolist(), y[lo:hi].tolist()), int(t), mode)
            for t, lo, hi in zip(ts, bounds[:-1], bounds[1:])
        ]
        trace = cls(tuple(summaries), policy_name, units if keep_raw else None, mode)
        return trace.with_variance_mode(mode) if mode.kind == "pooled" else trace

    def arrays(self) -> dict:
        """Column arrays over batches, with NaN for absent values."""

        def col(name):
            return np.array([np.nan if getattr(b, name) is None else getattr(b, name)
                             for b in self.batches], dtype=float)

        return {
            "n1": np.array([b.n1 for b in self.batches], dtype=float),
            "n0": np.array([b.n0 for b in self.batches], dtype=float),
            "mean1": col("mean1"), "mean0": col("mean0"),
            "var1": col("var1"), "var0": col("var0"),
            "ss1": col("ss1"), "ss0": col("ss0"),
        }

    def with_variance_mode(self, mode: Union[str, VarianceMode]) -> "ExperimentTrace":
        """Re-estimate every batch's arm variances under ``mode``."""
        mode = VarianceMode.parse(mode)
        if mode.kind == "pooled":
            pooled = {}
            for arm, ss_name, n_name in ((TREATED, "ss1", "n1"), (CONTROL, "ss0", "n0")):
                ss = [getattr(b, ss_name) for b in self.batches if getattr(b, n_name) > 0]
                units = sum(getattr(b, n_name) for b in self.batches)
                groups = len(ss)
                pooled[arm] = math.fsum(ss) / (units - groups) if units - groups >= 1 else None
            new = [replace(b, var1=pooled[TREATED] if b.n1 > 0 else None,
                           var0=pooled[CONTROL] if b.n0 > 0 else None) for b in self.batches]
        else:
            new = [replace(b, var1=_mode_variance(b.ss1, b.n1, mode, TREATED),
                           var0=_mode_variance(b.ss0, b.n0, mode, CONTROL)) for b in self.batches]
        return ExperimentTrace(tuple(new), self.policy_name, self.raw_outcomes, mode)
