"""Acceptance criteria 1-10, each at its stated tolerance.

Every test prints one PASS/FAIL line (visible even under output capture)
before asserting.  Monte Carlo runs use the configs shipped in ``configs/``.
"""

import csv
import io as stdio
import json
import math
from contextlib import redirect_stdout
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from adaptive_bols.cli import main
from adaptive_bols.core import ExperimentTrace, UnitRecords, VarianceMode
from adaptive_bols.estimators import (
    HET_BOLS,
    HOM_BOLS,
    ROBUST_OLS,
    batch_variance,
    het_bols,
    precision_weights,
    weight_table,
    weighted_se,
)
from adaptive_bols.io import read_grid_config
from adaptive_bols.montecarlo import MCGridSpec, run_grid
from adaptive_bols.outcomes import ArmDistribution
from adaptive_bols.policies import PolicyConfig
from adaptive_bols.stats import ks_distance

ROOT = Path(__file__).parent.parent
CONFIGS = ROOT / "configs"
DATA = Path(__file__).parent / "data"

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}")
        assert ok, detail
    return emit


def grid(name, samples=False):
    spec = read_grid_config(CONFIGS / name).spec
    return run_grid(replace(spec, keep_samples=samples))


def ks(cell, stat):
    z = cell.samples[stat]
    return ks_distance(z) if len(z) else math.nan


def inside(x, lo, hi):
    return lo <= x <= hi


def test_criterion_01_fig1a(verdict):
    cell = grid("fig1a.ini", samples=True).cells[0]
    het, hom = cell.rate(HET_BOLS), cell.rate(HOM_BOLS)
    k = ks(cell, HET_BOLS)
    ok = inside(het, 0.039, 0.061) and inside(hom, 0.039, 0.061) and k < 0.02
    verdict(1, ok, f"het {het:.4f}, hom {hom:.4f} in [0.039, 0.061]; het KS {k:.4f} < 0.02")


def test_criterion_02_fig1c(verdict):
    cell = grid("fig1c.ini", samples=True).cells[0]
    het, hom = cell.rate(HET_BOLS), cell.rate(HOM_BOLS)
    k_het, k_hom = ks(cell, HET_BOLS), ks(cell, HOM_BOLS)
    ok = inside(hom, 0.13, 0.21) and inside(het, 0.039, 0.061) and k_het < 0.02 and k_hom > 0.05
    verdict(2, ok, f"hom {hom:.4f} in [0.13, 0.21]; het {het:.4f} in [0.039, 0.061]; "
                   f"KS het {k_het:.4f} < 0.02, hom {k_hom:.4f} > 0.05")


def test_criterion_03_fig1b_fig1d(verdict):
    b = grid("fig1b.ini", samples=True).cells[0]
    d = grid("fig1d.ini").cells[0]
    het_b, hom_b = b.rate(HET_BOLS), b.rate(HOM_BOLS)
    k_rob, k_het = ks(b, ROBUST_OLS), ks(b, HET_BOLS)
    het_d, hom_d = d.rate(HET_BOLS), d.rate(HOM_BOLS)
    ok = (inside(het_b, 0.039, 0.061) and inside(hom_b, 0.039, 0.061) and k_rob > k_het
          and inside(hom_d, 0.05, 0.08) and inside(het_d, 0.039, 0.061))
    verdict(3, ok, f"p=(.5,.5): het {het_b:.4f}, hom {hom_b:.4f}, KS robust {k_rob:.4f} > het {k_het:.4f}; "
                   f"p=(.7,.4): hom {hom_d:.4f} in [0.05, 0.08], het {het_d:.4f} in [0.039, 0.061]")


def test_criterion_04_fig2(verdict):
    zero = grid("fig2_delta0.ini")
    two = grid("fig2_delta2.ini")
    checks, notes = [], []
    for b, t in ((50, 50), (100, 100)):
        c0, c2 = zero.cell(b, t), two.cell(b, t)
        hom0, het0, het2 = c0.rate(HOM_BOLS), c0.rate(HET_BOLS), c2.rate(HET_BOLS)
        checks += [hom0 > 0.10, inside(het0, 0.035, 0.065), inside(het2, 0.035, 0.065)]
        notes.append(f"({b},{t}): d=0 hom {hom0:.4f} > 0.10, het {het0:.4f}; d=2 het {het2:.4f}")
    verdict(4, all(checks), "; ".join(notes) + " (het in [0.035, 0.065])")


def test_criterion_05_fig3(verdict):
    null = grid("fig3_p05.ini")
    alt = grid("fig3_p07.ini")
    per_cell, notes = [], []
    for cell in null.cells:
        het, hom = cell.rate(HET_BOLS), cell.rate(HOM_BOLS)
        per_cell.append(inside(het, 0.035, 0.065) and inside(hom, 0.035, 0.065))
        notes.append(f"({cell.batch_size},{cell.batch_count}) het {het:.4f} hom {hom:.4f}")
    wins = sum(c.rate(HOM_BOLS) > c.rate(HET_BOLS) for c in alt.cells)
    ok = all(per_cell) and wins > len(alt.cells) / 2
    verdict(5, ok, f"p=(.5,.5) per cell in [0.035, 0.065]: {', '.join(notes)}; "
                   f"p=(.7,.5) hom > het in {wins}/{len(alt.cells)} cells")


def test_criterion_06_exact_size(verdict):
    arm = ArmDistribution.gaussian(1.0, 2.0)
    notes, checks = [], []
    for T in (1, 5, 25):
        spec = MCGridSpec(PolicyConfig.fixed(0.5), arm, arm, (50,), (T,), 100_000, 2024,
                          statistics=(HET_BOLS,), variance_mode=VarianceMode.true_known(4.0, 4.0),
                          keep_samples=True)
        cell = run_grid(spec).cells[0]
        rate, k = cell.rate(HET_BOLS), ks(cell, HET_BOLS)
        checks.append(inside(rate, 0.0466, 0.0534) and k < 0.006)
        notes.append(f"T={T}: rate {rate:.4f}, KS {k:.4f}")
    verdict(6, all(checks), "; ".join(notes) + " (rate in [0.0466, 0.0534], KS < 0.006)")


def _fuzzed_trace(g):
    T = int(g.integers(1, 9))
    b, a, y = [], [], []
    for t in range(1, T + 1):
        n1, n0 = int(g.integers(2, 30)), int(g.integers(2, 30))
        b += [t] * (n1 + n0)
        a += [1] * n1 + [0] * n0
        y += list(g.normal(g.normal(), g.uniform(0.1, 5), n1 + n0))
    return UnitRecords(np.array(b), np.array(a, dtype=np.int8), np.array(y))


def test_criterion_07_identities(verdict):
    g = np.random.default_rng(77)
    worst = dict(w2v=0.0, wsum=0.0, zforms=0.0, vforms=0.0, hom=0.0, equi=0.0)
    for _ in range(1000):
        units = _fuzzed_trace(g)
        trace = ExperimentTrace.from_units(units)
        r = het_bols(trace, c=0.25)
        v = np.array([batch_variance(bt) for bt in trace.batches])
        w, S, wn = precision_weights(v)
        worst["w2v"] = max(worst["w2v"], float(np.max(np.abs(w**2 * v - 1))))
        worst["wsum"] = max(worst["wsum"], abs(float(wn.sum()) - 1))
        z_sum = sum(pb.z for pb in r.per_batch) / math.sqrt(r.T)
        worst["zforms"] = max(worst["zforms"], abs(z_sum - (r.delta_hat - 0.25) / r.se))
        direct = float(np.sum(wn**2 * v))
        worst["vforms"] = max(worst["vforms"], abs(weighted_se(r.T, S, v) ** 2 - direct) / direct)
        # homoskedastic fixture built from the same shares
        pis = np.array([bt.share for bt in trace.batches])
        n = np.array([bt.n for bt in trace.batches], dtype=float)
        _, _, w_h = precision_weights(1.0 / (n * pis * (1 - pis)))
        w_closed = weight_table(True, True, n, pis)
        worst["hom"] = max(worst["hom"], float(np.max(np.abs(w_h - w_closed))))
        # location/scale equivariance
        s, m = g.uniform(0.1, 10), g.normal(0, 10)
        moved = ExperimentTrace.from_units(UnitRecords(units.batch, units.arm, s * units.outcome + m))
        r2 = het_bols(moved, c=0.25 * s)
        worst["equi"] = max(worst["equi"], abs(r2.z - r.z) / max(1, abs(r.z)),
                            abs(r2.se - s * r.se) / (s * r.se))
    ok = (worst["w2v"] <= 1e-12 and worst["wsum"] <= 1e-12 and worst["zforms"] <= 1e-10
          and worst["vforms"] <= 1e-12 and worst["hom"] <= 1e-12 and worst["equi"] <= 1e-9)
    verdict(7, ok, "max errors over 1000 traces: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_criterion_08_golden_cli(verdict, tmp_path):
    golden = json.loads((DATA / "golden_3batch.json").read_text())
    out = tmp_path / "r.csv"
    with redirect_stdout(stdio.StringIO()):
        code = main(["analyze", str(DATA / "golden_3batch.csv"), "--stat", "het-bols", "--quiet",
                     "--out", str(out)])
    row = next(csv.DictReader(out.open()))
    errs = {k: abs(float(row[c]) - float(golden[k]))
            for k, c in (("z", "z"), ("se", "se"), ("ci_low", "ci_low"), ("ci_high", "ci_high"))}
    ok = code == 0 and max(errs.values()) <= 1e-10
    verdict(8, ok, "abs errors " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + " (<= 1e-10)")


def test_criterion_09_determinism(verdict, tmp_path):
    outputs = []
    for workers in (1, 4, 16):
        d = tmp_path / f"w{workers}"
        with redirect_stdout(stdio.StringIO()):
            code = main(["mc-grid", "--config", str(CONFIGS / "fig2_delta0.ini"), "--reps", "300",
                         "--seed", "12345", "--workers", str(workers), "--out-dir", str(d), "--quiet"])
        assert code == 0
        outputs.append((d / "rejection.csv").read_bytes())
    ok = outputs[0] == outputs[1] == outputs[2]
    verdict(9, ok, "rejection CSV byte-identical at 1, 4 and 16 workers")


def test_criterion_10_invalid_fraction(verdict):
    spec = read_grid_config(CONFIGS / "fig2_delta0.ini").spec
    cell = run_grid(replace(spec, cells=((10, 10),))).cells[0]
    frac = cell.rows[HET_BOLS].invalid_fraction
    ok = 0 < frac < 0.05
    verdict(10, ok, f"eps-greedy (10,10) invalid fraction {frac:.4f}, required in (0, 0.05)")
