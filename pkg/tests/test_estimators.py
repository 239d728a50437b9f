import json
import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy import stats as sps

from adaptive_bols.core import BatchSummary, ExperimentTrace, UnitRecords, VarianceMode, summarize_batch
from adaptive_bols.estimators import (
    DegenerateWeightError,
    MissingUnitDataError,
    batch_variance,
    bols_kernel,
    compute,
    confidence_interval,
    critical_value,
    het_bols,
    hom_bols,
    p_value,
    precision_weights,
    robust_ols,
    weight_table,
    weight_table_cell,
    weighted_se,
)
from adaptive_bols.io import read_units_csv

DATA = Path(__file__).parent / "data"


def trace_from(batches, mode="sample"):
    """``batches``: list of (treated values, control values)."""
    b, a, y = [], [], []
    for t, (treated, control) in enumerate(batches, start=1):
        for arm, vals in ((1, treated), (0, control)):
            b += [t] * len(vals)
            a += [arm] * len(vals)
            y += list(vals)
    units = UnitRecords(np.array(b), np.array(a, dtype=np.int8), np.array(y, dtype=float))
    return ExperimentTrace.from_units(units, variance_mode=mode)


def exact_moments(vals):
    vals = [Fraction(v) for v in vals]
    m = sum(vals) / len(vals)
    return m, sum((v - m) ** 2 for v in vals) / (len(vals) - 1)


# --- golden fixture --------------------------------------------------------

GOLDEN = json.loads((DATA / "golden_3batch.json").read_text())


def test_golden_fixture_exact_pieces():
    trace = read_units_csv(DATA / "golden_3batch.csv")
    diffs = [Fraction(s) for s in GOLDEN["diffs"]]
    variances = [Fraction(s) for s in GOLDEN["batch_variances"]]
    for b, d, v in zip(trace.batches, diffs, variances):
        assert b.mean1 - b.mean0 == float(d)
        assert batch_variance(b) == pytest.approx(float(v), rel=1e-15)


def test_golden_fixture_statistic():
    r = het_bols(read_units_csv(DATA / "golden_3batch.csv"))
    for key, attr in (("delta_hat", "delta_hat"), ("se", "se"), ("z", "z"), ("p_value", "p_value"),
                      ("ci_low", "ci_low"), ("ci_high", "ci_high")):
        assert abs(getattr(r, attr) - float(GOLDEN[key])) <= 1e-10, key
    assert [pb.weight for pb in r.per_batch] == pytest.approx([float(w) for w in GOLDEN["weights"]], abs=1e-14)


# --- reductions to classical tests ----------------------------------------

def test_single_balanced_batch_is_two_sample_z():
    g = np.random.default_rng(5)
    treated, control = g.normal(1, 1, 40), g.normal(0, 1, 40)
    r = het_bols(trace_from([(treated, control)]))
    t_pooled = sps.ttest_ind(treated, control, equal_var=True).statistic
    assert r.z == pytest.approx(t_pooled, rel=1e-12)
    h = hom_bols(trace_from([(treated, control)]))
    assert h.z == pytest.approx(t_pooled, rel=1e-12)


def test_single_unbalanced_batch_is_welch_statistic():
    g = np.random.default_rng(6)
    treated, control = g.normal(1, 3, 25), g.normal(0, 1, 60)
    r = het_bols(trace_from([(treated, control)]))
    assert r.z == pytest.approx(sps.ttest_ind(treated, control, equal_var=False).statistic, rel=1e-12)


def test_hom_bols_pooled_variances_by_hand():
    batches = [([1.0, 2.0, 4.0], [0.0, 1.0]), ([3.0, 3.5], [1.0, 2.0, 2.5, 0.5])]
    ss = []
    for tr, co in batches:
        for vals in (tr, co):
            m = sum(vals) / len(vals)
            ss.append(sum((v - m) ** 2 for v in vals))
    s2_global = sum(ss) / (5 + 6 - 4)
    v_global = [s2_global * (1 / 3 + 1 / 2), s2_global * (1 / 2 + 1 / 4)]
    s2_batch = [(ss[0] + ss[1]) / 3, (ss[2] + ss[3]) / 4]
    v_batch = [s2_batch[0] * (1 / 3 + 1 / 2), s2_batch[1] * (1 / 2 + 1 / 4)]
    diffs = [7 / 3 - 0.5, 3.25 - 1.5]
    trace = trace_from(batches)
    for pooling, v in (("global", v_global), ("batch", v_batch)):
        z = sum(d / math.sqrt(x) for d, x in zip(diffs, v)) / math.sqrt(2)
        assert hom_bols(trace, pooling=pooling).z == pytest.approx(z, rel=1e-13)


# --- robust OLS against an explicit sandwich ------------------------------

def sandwich_oracle(y, d, hc):
    X = np.column_stack([np.ones_like(y), d])
    XtX_inv = np.linalg.inv(X.T @ X)
    beta = XtX_inv @ X.T @ y
    e = y - X @ beta
    h = np.einsum("ij,jk,ik->i", X, XtX_inv, X)
    scale = {"HC0": np.ones_like(h), "HC2": 1 / (1 - h), "HC3": 1 / (1 - h) ** 2}[hc]
    meat = (X * (e**2 * scale)[:, None]).T @ X
    V = XtX_inv @ meat @ XtX_inv
    return beta[1], math.sqrt(V[1, 1])


@pytest.mark.parametrize("hc", ["HC0", "HC2", "HC3"])
def test_robust_ols_matches_matrix_sandwich(hc):
    g = np.random.default_rng(7)
    batches = [(g.normal(1, 3, k), g.normal(0, 1, 12 - k)) for k in (3, 6, 9, 4)]
    trace = trace_from(batches)
    raw = trace.raw_outcomes
    coef, se = sandwich_oracle(raw.outcome, raw.arm.astype(float), hc)
    r = robust_ols(trace, c=0.2, hc=hc)
    assert r.delta_hat == pytest.approx(coef, rel=1e-12)
    assert r.se == pytest.approx(se, rel=1e-10)
    assert r.z == pytest.approx((coef - 0.2) / se, rel=1e-10)


def test_robust_ols_identical_outcomes_invalid():
    trace = trace_from([([2.0, 2.0], [2.0, 2.0, 2.0])])
    r = robust_ols(trace)
    assert not r.valid and r.z is None


def test_robust_ols_needs_raw_outcomes():
    trace = trace_from([([1.0, 2.0], [0.0, 1.0])])
    stripped = ExperimentTrace(trace.batches, trace.policy_name)
    with pytest.raises(MissingUnitDataError):
        robust_ols(stripped)


# --- validity and errors ---------------------------------------------------

def test_invalid_batch_gives_invalid_report():
    trace = trace_from([([1.0, 2.0], [0.0, 1.0]), ([1.0, 2.0, 3.0], [])])
    for stat in ("het-bols", "hom-bols"):
        r = compute(stat, trace)
        assert not r.valid and r.z is None and "empty_arm" in r.reason and not r.rejects


def test_single_unit_arm_needs_pooled_mode():
    batches = [([1.0, 2.0, 4.0], [0.0]), ([3.0, 3.5], [1.0, 2.0])]
    assert not het_bols(trace_from(batches)).valid
    r = het_bols(trace_from(batches, "pooled"))
    assert r.valid and r.variance_label == "pooled"


def test_zero_variance_batch_invalid():
    trace = trace_from([([1.0, 1.0], [0.0, 0.0]), ([1.0, 2.0], [0.0, 1.0])])
    assert het_bols(trace).reason.endswith("zero_variance_estimate")


def test_degenerate_weights_raise():
    with pytest.raises(DegenerateWeightError):
        precision_weights([1.0, 0.0])
    with pytest.raises(DegenerateWeightError):
        precision_weights([])


def test_parameter_validation():
    trace = trace_from([([1.0, 2.0], [0.0, 1.0])])
    with pytest.raises(ValueError):
        het_bols(trace, alpha=0.0)
    with pytest.raises(ValueError):
        het_bols(trace, alternative="sideways")
    with pytest.raises(ValueError):
        compute("t-test", trace)


# --- p-values and intervals ------------------------------------------------

def test_p_values_and_critical_values():
    assert critical_value(0.05) == pytest.approx(1.959963984540054, rel=1e-14)
    assert critical_value(0.05, "greater") == pytest.approx(1.6448536269514722, rel=1e-14)
    assert critical_value(1.0) == 0.0
    assert p_value(1.959963984540054) == pytest.approx(0.05, rel=1e-12)
    assert p_value(-1.0, "less") == pytest.approx(sps.norm.cdf(-1.0), rel=1e-14)
    assert p_value(1.0, "greater") == pytest.approx(sps.norm.sf(1.0), rel=1e-14)
    lo, hi = confidence_interval(1.0, 0.5, 0.1)
    assert hi - lo == pytest.approx(2 * 0.5 * sps.norm.ppf(0.95), rel=1e-14)


def test_one_sided_reports():
    trace = read_units_csv(DATA / "golden_3batch.csv")
    g = het_bols(trace, alternative="greater")
    assert g.p_value == pytest.approx(float(GOLDEN["p_value"]) / 2, rel=1e-12) and g.rejects


def test_known_variance_mode():
    trace = trace_from([([1.0, 2.0, 3.0], [0.0, 1.0]), ([2.0, 2.5], [0.5, 1.0, 1.5])])
    r = het_bols(trace, mode=VarianceMode.true_known(1.0, 4.0))
    v = [4 / 3 + 1 / 2, 4 / 2 + 1 / 3]
    d = [2.0 - 0.5, 2.25 - 1.0]
    assert r.z == pytest.approx(sum(x / math.sqrt(y) for x, y in zip(d, v)) / math.sqrt(2), rel=1e-14)


# --- identity suite (fuzzed traces) ----------------------------------------

arm_values = st.lists(st.floats(-50, 50, allow_nan=False, width=32), min_size=2, max_size=15)


@st.composite
def traces(draw, max_T=6):
    T = draw(st.integers(1, max_T))
    batches = [(draw(arm_values), draw(arm_values)) for _ in range(T)]
    for tr, co in batches:
        assume(np.ptp(tr) > 1e-3 or np.ptp(co) > 1e-3)
    return batches


@given(traces())
def test_weight_identities(batches):
    trace = trace_from(batches)
    r = het_bols(trace)
    assert r.valid
    w = np.array([pb.weight for pb in r.per_batch])
    v = np.array([pb.variance for pb in r.per_batch])
    raw, S, _ = precision_weights(v)
    assert np.allclose(raw**2 * v, 1.0, rtol=1e-12, atol=0)
    assert abs(w.sum() - 1.0) <= 1e-12
    # two forms of the combined statistic
    z_sum = sum(pb.z for pb in r.per_batch) / math.sqrt(r.T)
    assert abs(z_sum - (r.delta_hat - r.null_value) / r.se) <= 1e-10 * max(1.0, abs(z_sum))
    # SE from sqrt(T)/S and from sum of squared normalized weights times variances
    assert weighted_se(r.T, S, v) == pytest.approx(math.sqrt(float(np.sum(w**2 * v))), rel=1e-12)


@given(traces())
def test_batch_variance_two_forms(batches):
    for b in trace_from(batches).batches:
        direct = b.var1 / b.n1 + b.var0 / b.n0
        share = (b.var1 / b.share + b.var0 / (1 - b.share)) / b.n
        assert direct == pytest.approx(share, rel=1e-12)
        assert batch_variance(b) == direct


@given(traces(), st.floats(0.01, 100), st.floats(-100, 100), st.floats(-10, 10))
def test_equivariance(batches, scale, shift, effect):
    base = het_bols(trace_from(batches), c=0.3)
    # common location shift: nothing changes
    shifted = het_bols(trace_from([([x + shift for x in tr], [x + shift for x in co]) for tr, co in batches]),
                       c=0.3)
    assert shifted.z == pytest.approx(base.z, rel=1e-6, abs=1e-6)
    # scaling all outcomes and the null: Z invariant, estimate and SE scale
    scaled = het_bols(trace_from([([scale * x for x in tr], [scale * x for x in co]) for tr, co in batches]),
                      c=0.3 * scale)
    assert scaled.z == pytest.approx(base.z, rel=1e-6, abs=1e-6)
    assert scaled.delta_hat == pytest.approx(scale * base.delta_hat, rel=1e-6, abs=1e-6 * scale)
    assert scaled.se == pytest.approx(scale * base.se, rel=1e-9)
    # shifting the treated arm by b and the null by b
    moved = het_bols(trace_from([([x + effect for x in tr], list(co)) for tr, co in batches]), c=0.3 + effect)
    assert moved.z == pytest.approx(base.z, rel=1e-6, abs=1e-6)
    assert moved.delta_hat == pytest.approx(base.delta_hat + effect, abs=1e-6)


@given(st.lists(st.floats(0.05, 0.95), min_size=1, max_size=8), st.integers(4, 500), st.floats(0.1, 9.0))
def test_homoskedastic_weight_reduction(pis, n, sigma2):
    pis = np.array(pis)
    T = len(pis)
    v = sigma2 / (n * pis * (1 - pis))
    _, _, w = precision_weights(v)
    expected = np.sqrt(pis * (1 - pis)) / np.sqrt(pis * (1 - pis)).sum()
    assert np.allclose(w, expected, rtol=1e-12, atol=0)
    table = weight_table(True, True, np.full(T, n), pis)
    assert np.allclose(table, expected, rtol=1e-12, atol=0)
    het = weight_table(False, True, np.full(T, n), pis, sigma2, sigma2)
    assert np.allclose(het, expected, rtol=1e-12, atol=0)


def test_weight_table_rows():
    n = np.array([100.0, 200.0, 100.0])
    # non-adaptive, homoskedastic: proportional to sqrt(n_t)
    assert np.allclose(weight_table(True, False, n, 0.5), np.sqrt(n) / np.sqrt(n).sum(), rtol=1e-14)
    # equal batches, fixed share, time-invariant variances: 1/T
    assert np.allclose(weight_table(False, False, np.full(4, 50.0), 0.3, 4.0, 1.0), 0.25, rtol=1e-14)
    # heteroskedastic adaptive: inverse SD of each batch difference
    pis = [0.5, 0.2, 0.8]
    v = [(4 / p + 1 / (1 - p)) / m for p, m in zip(pis, n)]
    w = 1 / np.sqrt(v)
    assert np.allclose(weight_table(False, True, n, pis, 4.0, 1.0), w / w.sum(), rtol=1e-14)
    assert weight_table_cell(False, True, 2, n, pis, 4.0, 1.0) == pytest.approx(w[1] / w.sum(), rel=1e-14)
    with pytest.raises(ValueError):
        weight_table(True, True, n, 0.5)
    with pytest.raises(ValueError):
        weight_table(False, False, n, 0.5)


def test_bols_kernel_matches_report():
    trace = read_units_csv(DATA / "golden_3batch.csv")
    r = het_bols(trace, c=0.4)
    cols = trace.arrays()
    v = cols["var1"] / cols["n1"] + cols["var0"] / cols["n0"]
    delta, se, z = bols_kernel(cols["mean1"] - cols["mean0"], v, 0.4)
    assert (delta, se) == pytest.approx((r.delta_hat, r.se), rel=1e-14)
    assert z == pytest.approx(r.z, rel=1e-13)


def test_summary_shape_from_pairs():
    b = summarize_batch([(1, 1.0), (1, 3.0), (0, 0.0), (0, 2.0), (0, 4.0)], 1)
    assert isinstance(b, BatchSummary) and b.share == pytest.approx(0.4)
