"""Reproducible Monte Carlo sweeps over batched adaptive experiments.

Replication ``r`` of cell ``(batch_size, batch_count)`` draws from two Philox
streams keyed by ``(master_seed, batch_size, batch_count, r, role)``: one for
assignment and one for outcome noise.  Results therefore do not depend on
grid order, chunking or the number of worker processes.

Epsilon-greedy, fixed-share and clipped Thompson batches consume exactly one
uniform per unit regardless of the state, so their replications are
simulated side by side in one vectorized pass.  Unclipped Thompson sampling
draws Beta variates whose parameters depend on the state and runs one
replication at a time.  Both
routes produce the same unit-level draws as :func:`run_experiment`.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import core, outcomes
from .core import SAMPLE, default_min_units, ExperimentTrace, UnitRecords, VarianceMode, arm_variance_from_ss
from .estimators import (
    HET_BOLS,
    HOM_BOLS,
    ROBUST_OLS,
    STATISTICS,
    bols_kernel,
    bols_valid_mask,
    hom_variance_kernel,
    p_value,
    pooled_arm_moments,
    robust_ols_kernel,
)
from .outcomes import ArmDistribution
from .policies import (
    TIE,
    PolicyConfig,
    PolicyState,
    assign_batch,
    assign_from_uniform,
    thompson_probability,
    update_state_arrays,
)
from .stats import RandomStream, ks_distance

ROLE_ASSIGN = 0
ROLE_OUTCOME = 1

# fixed so that chunk boundaries never depend on the worker count
CHUNK_UNITS = 2_000_000

__all__ = [
    "MCGridSpec",
    "RejectionRow",
    "CellResult",
    "GridResult",
    "replication_streams",
    "simulate_units",
    "run_experiment",
    "simulate_cell_moments",
    "cell_statistics",
    "run_cell",
    "run_grid",
    "ks_distance",
    "REJECTION_COLUMNS",
]

REJECTION_COLUMNS = ("batch_size", "batch_count", "statistic", "rejection_rate", "mc_se",
                     "invalid_fraction", "reps_used")


@dataclass(frozen=True)
class MCGridSpec:
    policy: PolicyConfig
    treated: ArmDistribution
    control: ArmDistribution
    batch_sizes: tuple
    batch_counts: tuple
    replications: int
    master_seed: int = 0
    alpha: float = 0.05
    null_value: float = 0.0
    statistics: tuple = STATISTICS
    variance_mode: VarianceMode = SAMPLE
    hc: str = "HC0"
    hom_pooling: str = "global"
    alternative: str = "two-sided"
    min_units: Optional[int] = None
    cells: Optional[tuple] = None
    keep_samples: bool = False

    def __post_init__(self):
        object.__setattr__(self, "batch_sizes", tuple(int(b) for b in self.batch_sizes))
        object.__setattr__(self, "batch_counts", tuple(int(b) for b in self.batch_counts))
        object.__setattr__(self, "statistics", tuple(self.statistics))
        if self.cells is not None:
            object.__setattr__(self, "cells", tuple((int(b), int(t)) for b, t in self.cells))
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        if any(b < 1 for b in self.batch_sizes + self.batch_counts):
            raise ValueError("batch sizes and counts must be at least 1")
        if self.cells is not None and any(b < 1 or t < 1 for b, t in self.cells):
            raise ValueError("batch sizes and counts must be at least 1")
        unknown = set(self.statistics) - set(STATISTICS)
        if unknown or not self.statistics:
            raise ValueError(f"unknown statistics {sorted(unknown)}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.policy.kind == "thompson" and not (self.treated.is_binary and self.control.is_binary):
            raise ValueError("Thompson sampling needs Bernoulli arms")
        if self.min_units is None:
            object.__setattr__(self, "min_units", default_min_units(self.variance_mode))
        if not 0 <= self.master_seed < 2**63:
            raise ValueError("master_seed must be a non-negative 63-bit integer")

    @property
    def arm_pair(self) -> tuple:
        return (self.control, self.treated)

    def grid_cells(self) -> list:
        if self.cells is not None:
            return list(self.cells)
        return [(b, t) for b in self.batch_sizes for t in self.batch_counts]


@dataclass(frozen=True)
class RejectionRow:
    batch_size: int
    batch_count: int
    statistic: str
    rejection_rate: float
    mc_se: float
    invalid_fraction: float
    reps_used: int
    replications: int

    def csv_fields(self) -> list:
        return [str(self.batch_size), str(self.batch_count), self.statistic,
                f"{self.rejection_rate:.6f}", f"{self.mc_se:.6f}",
                f"{self.invalid_fraction:.6f}", str(self.reps_used)]


@dataclass
class CellResult:
    batch_size: int
    batch_count: int
    rows: dict
    samples: dict = field(default_factory=dict)
    error: Optional[str] = None

    def rate(self, statistic: str) -> float:
        return self.rows[statistic].rejection_rate


@dataclass
class GridResult:
    cells: list

    @property
    def rows(self) -> list:
        return [row for cell in self.cells for row in cell.rows.values()]

    def cell(self, batch_size: int, batch_count: int) -> CellResult:
        for c in self.cells:
            if (c.batch_size, c.batch_count) == (batch_size, batch_count):
                return c
        raise KeyError((batch_size, batch_count))


# --------------------------------------------------------------------------
# single experiments


def replication_streams(master_seed: int, batch_size: int, batch_count: int, rep: int):
    """``(assignment, outcome)`` generators for one replication."""
    return tuple(
        RandomStream.from_parts(master_seed, batch_size, batch_count, rep, role).generator()
        for role in (ROLE_ASSIGN, ROLE_OUTCOME)
    )


def simulate_units(policy: PolicyConfig, arm_pair: tuple, batch_size: int, batch_count: int,
                   rng: np.random.Generator, outcome_rng: Optional[np.random.Generator] = None) -> UnitRecords:
    """Run one experiment unit by unit; ``arm_pair`` is ``(control, treated)``."""
    if batch_size < 1 or batch_count < 1:
        raise ValueError("batch size and count must be at least 1")
    outcome_rng = rng if outcome_rng is None else outcome_rng
    state = PolicyState.initial(policy)
    arms = np.empty((batch_count, batch_size), dtype=np.int8)
    ys = np.empty((batch_count, batch_size))
    for t in range(batch_count):
        a = assign_batch(policy, state, batch_size, rng)
        y = outcomes.draw_units(arm_pair, a, outcome_rng)
        state = update_state_arrays(policy, state, a, y)
        arms[t] = a
        ys[t] = y
    batch = np.repeat(np.arange(1, batch_count + 1, dtype=np.int64), batch_size)
    return UnitRecords(batch, arms.ravel(), ys.ravel())


def run_experiment(policy: PolicyConfig, arm_pair: tuple, batch_size: int, batch_count: int,
                   rng: np.random.Generator, outcome_rng: Optional[np.random.Generator] = None,
                   variance_mode=SAMPLE) -> ExperimentTrace:
    units = simulate_units(policy, arm_pair, batch_size, batch_count, rng, outcome_rng)
    return ExperimentTrace.from_units(units, policy.name, variance_mode)


# --------------------------------------------------------------------------
# vectorized cell simulation


def _moments(arms: np.ndarray, y: np.ndarray):
    """Per-row arm counts, sums, means and within-arm sums of squares."""
    treated = arms == 1
    n1 = treated.sum(axis=-1)
    n0 = arms.shape[-1] - n1
    s1 = np.where(treated, y, 0.0).sum(axis=-1)
    s0 = np.where(treated, 0.0, y).sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        m1 = s1 / n1
        m0 = s0 / n0
        ss1 = np.where(treated, (y - m1[..., None]) ** 2, 0.0).sum(axis=-1)
        ss0 = np.where(treated, 0.0, (y - m0[..., None]) ** 2).sum(axis=-1)
    m1 = np.where(n1 > 0, m1, np.nan)
    m0 = np.where(n0 > 0, m0, np.nan)
    return n1, n0, s1, s0, m1, m0, ss1, ss0


def _lockstep(spec: MCGridSpec, batch_size: int, batch_count: int, reps: range) -> dict:
    pair = spec.arm_pair
    R = len(reps)
    U = np.empty((R, batch_count, batch_size))
    noise = np.empty((R, batch_count, batch_size))
    for i, r in enumerate(reps):
        g_assign, g_out = replication_streams(spec.master_seed, batch_size, batch_count, r)
        U[i] = g_assign.random((batch_count, batch_size))
        noise[i] = outcomes.unit_noise(pair, g_out, (batch_count, batch_size))
    policy = spec.policy
    counts = np.zeros((R, 2), dtype=np.int64)
    sums = np.zeros((R, 2))
    prior = np.array([[policy.prior_alpha, policy.prior_beta]])
    cols = {k: np.empty((R, batch_count)) for k in ("n1", "n0", "mean1", "mean0", "ss1", "ss0")}
    for t in range(batch_count):
        if policy.kind == "thompson":
            # binary outcomes: sums are success counts
            alpha = prior[:, :1] + sums
            beta = prior[:, 1:] + (counts - sums)
            p = thompson_probability(policy, alpha, beta)
            arms = (U[:, t, :] < p[:, None]).astype(np.int8)
        else:
            if policy.kind == "eps-greedy":
                with np.errstate(divide="ignore", invalid="ignore"):
                    means = sums / counts
                seen = (counts > 0).all(axis=1)
                greedy = np.where(~seen | (means[:, 1] == means[:, 0]), TIE,
                                  (means[:, 1] > means[:, 0]).astype(np.int64))
            else:
                greedy = np.full(R, TIE)
            arms = assign_from_uniform(policy, greedy[:, None], U[:, t, :])
        y = outcomes.outcomes_from_noise(pair, arms, noise[:, t, :])
        n1, n0, s1, s0, m1, m0, ss1, ss0 = _moments(arms, y)
        counts[:, 0] += n0
        counts[:, 1] += n1
        sums[:, 0] += s0
        sums[:, 1] += s1
        for k, v in (("n1", n1), ("n0", n0), ("mean1", m1), ("mean0", m0), ("ss1", ss1), ("ss0", ss0)):
            cols[k][:, t] = v
    return cols


def _sequential(spec: MCGridSpec, batch_size: int, batch_count: int, reps: range) -> dict:
    R = len(reps)
    cols = {k: np.empty((R, batch_count)) for k in ("n1", "n0", "mean1", "mean0", "ss1", "ss0")}
    for i, r in enumerate(reps):
        g_assign, g_out = replication_streams(spec.master_seed, batch_size, batch_count, r)
        units = simulate_units(spec.policy, spec.arm_pair, batch_size, batch_count, g_assign, g_out)
        n1, n0, _, _, m1, m0, ss1, ss0 = _moments(units.arm.reshape(batch_count, batch_size),
                                                  units.outcome.reshape(batch_count, batch_size))
        for k, v in (("n1", n1), ("n0", n0), ("mean1", m1), ("mean0", m0), ("ss1", ss1), ("ss0", ss0)):
            cols[k][i] = v
    return cols


def simulate_cell_moments(spec: MCGridSpec, batch_size: int, batch_count: int, reps: range) -> dict:
    """Batch moment columns, shape ``(len(reps), batch_count)``, for the given replications."""
    if spec.policy.state_free_draws:
        return _lockstep(spec, batch_size, batch_count, reps)
    return _sequential(spec, batch_size, batch_count, reps)


def _arm_variances(cols: dict, mode: VarianceMode):
    n1, n0, ss1, ss0 = cols["n1"], cols["n0"], cols["ss1"], cols["ss0"]
    if mode.kind == "known":
        return np.full(n1.shape, mode.known[1]), np.full(n0.shape, mode.known[0])
    if mode.kind == "pooled":
        out = []
        for n, ss in ((n1, ss1), (n0, ss0)):
            has = n > 0
            dof = n.sum(axis=-1) - has.sum(axis=-1)
            with np.errstate(divide="ignore", invalid="ignore"):
                pooled = np.where(n >= 2, ss, 0.0).sum(axis=-1) / dof
            pooled = np.where(dof >= 1, pooled, np.nan)
            out.append(np.where(has, pooled[:, None], np.nan))
        return out[0], out[1]
    return arm_variance_from_ss(ss1, n1, mode.kind), arm_variance_from_ss(ss0, n0, mode.kind)


def cell_statistics(spec: MCGridSpec, cols: dict) -> dict:
    """Test statistic per replication (NaN where not computable)."""
    c = spec.null_value
    out = {}
    n1, n0 = cols["n1"], cols["n0"]
    diff = cols["mean1"] - cols["mean0"]
    var1, var0 = _arm_variances(cols, spec.variance_mode)
    valid = bols_valid_mask(n1, n0, var1, var0, spec.min_units).all(axis=-1)
    if HET_BOLS in spec.statistics:
        with np.errstate(divide="ignore", invalid="ignore"):
            v = var1 / n1 + var0 / n0
        _, _, z = bols_kernel(diff, v, c)
        out[HET_BOLS] = np.where(valid, z, np.nan)
    if HOM_BOLS in spec.statistics:
        v = hom_variance_kernel(n1, n0, cols["ss1"], cols["ss0"], spec.hom_pooling)
        with np.errstate(invalid="ignore"):
            hom_ok = valid & (np.isfinite(v) & (v > 0)).all(axis=-1)
        _, _, z = bols_kernel(diff, v, c)
        out[HOM_BOLS] = np.where(hom_ok, z, np.nan)
    if ROBUST_OLS in spec.statistics:
        N1, M1, RSS1 = pooled_arm_moments(n1, cols["mean1"], cols["ss1"])
        N0, M0, RSS0 = pooled_arm_moments(n0, cols["mean0"], cols["ss0"])
        _, _, z = robust_ols_kernel(N1, N0, M1, M0, RSS1, RSS0, c, spec.hc)
        out[ROBUST_OLS] = z
    return out


def _chunk_task(args):
    spec, batch_size, batch_count, start, stop = args
    cols = simulate_cell_moments(spec, batch_size, batch_count, range(start, stop))
    return cell_statistics(spec, cols)


def _chunks(spec: MCGridSpec, batch_size: int, batch_count: int) -> list:
    per_rep = batch_size * batch_count
    size = max(1, CHUNK_UNITS // per_rep)
    R = spec.replications
    return [(spec, batch_size, batch_count, s, min(s + size, R)) for s in range(0, R, size)]


def _summarize(spec: MCGridSpec, batch_size: int, batch_count: int, z_by_stat: dict) -> CellResult:
    rows = {}
    samples = {}
    R = spec.replications
    for stat in spec.statistics:
        z = z_by_stat[stat]
        ok = ~np.isnan(z)
        used = int(ok.sum())
        p = p_value(z[ok], spec.alternative)
        rejections = int(np.count_nonzero(p <= spec.alpha))
        rate = rejections / used if used else math.nan
        se = math.sqrt(rate * (1.0 - rate) / used) if used else math.nan
        rows[stat] = RejectionRow(batch_size, batch_count, stat, rate, se, (R - used) / R, used, R)
        if spec.keep_samples:
            samples[stat] = z[ok]
    return CellResult(batch_size, batch_count, rows, samples)


def run_cell(spec: MCGridSpec, batch_size: int, batch_count: int, workers: int = 1,
             executor: Optional[ProcessPoolExecutor] = None) -> CellResult:
    tasks = _chunks(spec, batch_size, batch_count)
    if executor is not None:
        parts = list(executor.map(_chunk_task, tasks))
    elif workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_chunk_task, tasks))
    else:
        parts = [_chunk_task(t) for t in tasks]
    merged = {stat: np.concatenate([p[stat] for p in parts]) for stat in spec.statistics}
    return _summarize(spec, batch_size, batch_count, merged)


def run_grid(spec: MCGridSpec, workers: int = 1, progress=None) -> GridResult:
    """Every grid cell via :func:`run_cell`, in grid order."""
    cells = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for batch_size, batch_count in spec.grid_cells():
            try:
                cells.append(run_cell(spec, batch_size, batch_count, executor=pool))
            except (ValueError, ArithmeticError, MemoryError) as exc:
                cells.append(CellResult(batch_size, batch_count, {}, error=f"{type(exc).__name__}: {exc}"))
            if progress is not None:
                progress(cells[-1])
    finally:
        if pool is not None:
            pool.shutdown()
    return GridResult(cells)


def rejection_csv_lines(result: GridResult) -> list:
    lines = [",".join(REJECTION_COLUMNS)]
    lines += [",".join(row.csv_fields()) for row in result.rows]
    return lines
