"""CSV and config-file serialization."""

from __future__ import annotations

import configparser
import csv
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .core import SAMPLE, ExperimentTrace, UnitRecords, VarianceMode, summarize_batch
from .estimators import EstimatorReport, STATISTICS
from .montecarlo import MCGridSpec
from .outcomes import ArmDistribution
from .policies import EPS_GREEDY, FIXED, THOMPSON, PolicyConfig
from .stats import normal_cdf

UNITS_HEADER = ("batch", "arm", "outcome")
REPORT_COLUMNS = ("statistic", "valid", "variance", "T", "estimate", "se", "z", "p_value",
                  "ci_low", "ci_high", "null", "alpha", "alternative", "reason")
HISTOGRAM_COLUMNS = ("statistic", "bin_left", "bin_right", "density", "normal_density")
TAIL_COLUMNS = ("statistic", "n", "underflow", "overflow", "ks_distance")


class UnitsFormatError(ValueError):
    """Malformed per-unit CSV; ``row`` is the 1-based file line number."""

    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


def fmt_stat(x) -> str:
    """17 significant digits, empty for missing values."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{float(x):.17g}"


def fmt_rate(x) -> str:
    if x is None or math.isnan(x):
        return ""
    return f"{float(x):.6f}"


# --------------------------------------------------------------------------
# per-unit CSV


def write_units_csv(units, path) -> None:
    """Write per-unit records (``UnitRecords`` or a trace carrying them)."""
    if isinstance(units, ExperimentTrace):
        if units.raw_outcomes is None:
            raise ValueError("trace has no per-unit records to write")
        units = units.raw_outcomes
    with open(path, "w", newline="") as fh:
        fh.write(",".join(UNITS_HEADER) + "\n")
        for b, a, y in units.rows():
            # repr() is the shortest string that round-trips exactly
            fh.write(f"{int(b)},{int(a)},{float(y)!r}\n")


def iter_unit_rows(path) -> Iterator[tuple]:
    """Yield validated ``(line, batch, arm, outcome)`` tuples one row at a time."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != UNITS_HEADER:
            raise UnitsFormatError(1, f"expected header {','.join(UNITS_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise UnitsFormatError(line, f"expected 3 fields, got {len(row)}")
            try:
                batch = int(row[0])
            except ValueError:
                raise UnitsFormatError(line, f"batch {row[0]!r} is not an integer") from None
            if batch < 1:
                raise UnitsFormatError(line, f"batch {batch} is not positive")
            if row[1].strip() not in ("0", "1"):
                raise UnitsFormatError(line, f"arm {row[1]!r} is not 0 or 1")
            try:
                y = float(row[2])
            except ValueError:
                raise UnitsFormatError(line, f"outcome {row[2]!r} is not a number") from None
            if not math.isfinite(y):
                raise UnitsFormatError(line, f"outcome {row[2]!r} is not finite")
            yield line, batch, int(row[1]), y


def read_units_csv(path, variance_mode=SAMPLE, keep_raw: bool = True,
                   policy_name: str = "ingested") -> ExperimentTrace:
    """Stream a per-unit CSV into an :class:`ExperimentTrace`.

    Rows must be grouped by batch with batches numbered 1, 2, ... in order.
    Only the current batch is buffered unless ``keep_raw`` is set.
    """
    mode = VarianceMode.parse(variance_mode)
    summaries = []
    raw_b, raw_a, raw_y = [], [], []
    current: list = []
    t = None
    last_line = 1

    def flush():
        summaries.append(summarize_batch(current, t, SAMPLE))

    for line, batch, arm, y in iter_unit_rows(path):
        last_line = line
        if t is None:
            if batch != 1:
                raise UnitsFormatError(line, f"first batch must be 1, got {batch}")
            t = 1
        elif batch != t:
            if batch != t + 1:
                raise UnitsFormatError(line, f"batch {batch} follows batch {t}; batches must be contiguous")
            flush()
            current = []
            t = batch
        current.append((arm, y))
        if keep_raw:
            raw_b.append(batch)
            raw_a.append(arm)
            raw_y.append(y)
    if t is None:
        raise UnitsFormatError(last_line + 1, "no unit rows")
    flush()
    raw = None
    if keep_raw:
        raw = UnitRecords(np.asarray(raw_b, dtype=np.int64), np.asarray(raw_a, dtype=np.int8),
                          np.asarray(raw_y, dtype=float))
    trace = ExperimentTrace(tuple(summaries), policy_name, raw, SAMPLE)
    return trace if mode == SAMPLE else trace.with_variance_mode(mode)


# --------------------------------------------------------------------------
# reports


def report_row(r: EstimatorReport) -> list:
    return [r.statistic, "true" if r.valid else "false", r.variance_label, str(r.T),
            fmt_stat(r.delta_hat), fmt_stat(r.se), fmt_stat(r.z), fmt_stat(r.p_value),
            fmt_stat(r.ci_low), fmt_stat(r.ci_high), fmt_stat(r.null_value), fmt_stat(r.alpha),
            r.alternative, r.reason or ""]


def report_csv_lines(reports: Sequence[EstimatorReport]) -> list:
    return [",".join(REPORT_COLUMNS)] + [",".join(_csv_escape(f) for f in report_row(r)) for r in reports]


def _csv_escape(field: str) -> str:
    if any(ch in field for ch in ',"\n'):
        return '"' + field.replace('"', '""') + '"'
    return field


def report_summary(r: EstimatorReport) -> str:
    if not r.valid:
        return f"{r.statistic}: not computable ({r.reason})"
    level = 100.0 * (1.0 - r.alpha)
    verdict = "reject" if r.rejects else "do not reject"
    return (f"{r.statistic} [{r.variance_label}], T={r.T}: estimate {r.delta_hat:.6g}, SE {r.se:.6g}, "
            f"Z {r.z:.6g}, p {r.p_value:.4g}; {level:g}% CI [{r.ci_low:.6g}, {r.ci_high:.6g}]; "
            f"{verdict} H0: delta = {r.null_value:g}")


# --------------------------------------------------------------------------
# grid config


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _cells(text: str) -> tuple:
    out = []
    for tok in text.replace(",", " ").split():
        b, _, t = tok.partition("x")
        out.append((int(b), int(t)))
    return tuple(out)


def policy_from_options(kind: str, epsilon=None, prior_alpha=None, prior_beta=None,
                        clip=None, pi=None) -> PolicyConfig:
    if kind == EPS_GREEDY:
        return PolicyConfig.epsilon_greedy(0.2 if epsilon is None else epsilon)
    if kind == THOMPSON:
        return PolicyConfig.thompson(1.0 if prior_alpha is None else prior_alpha,
                                     1.0 if prior_beta is None else prior_beta, clip)
    if kind == FIXED:
        return PolicyConfig.fixed(0.5 if pi is None else pi)
    raise ValueError(f"unknown policy {kind!r}")


_KNOWN_KEYS = {
    "experiment": {"policy", "epsilon", "prior_alpha", "prior_beta", "clip", "pi", "arm1", "arm2"},
    "grid": {"batch_sizes", "batch_counts", "cells", "replications", "seed"},
    "inference": {"statistics", "variance", "alpha", "null", "hc", "hom_pooling", "alternative",
                  "min_units"},
}


@dataclass
class GridConfig:
    spec: MCGridSpec
    source: Optional[str] = None


def parse_grid_config(text: str, reps: Optional[int] = None, seed: Optional[int] = None,
                      source: Optional[str] = None) -> GridConfig:
    """Build an :class:`MCGridSpec` from INI text.

    ``arm1`` is the treated arm and ``arm2`` the control arm.  ``reps`` and
    ``seed`` override the file.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text, source=source or "<config>")
    for section in cp.sections():
        if section not in _KNOWN_KEYS:
            raise ValueError(f"unknown config section [{section}]")
        extra = set(cp[section]) - _KNOWN_KEYS[section]
        if extra:
            raise ValueError(f"unknown keys in [{section}]: {', '.join(sorted(extra))}")
    for section in ("experiment", "grid"):
        if section not in cp:
            raise ValueError(f"config needs an [{section}] section")
    ex, gr = cp["experiment"], cp["grid"]
    inf = cp["inference"] if "inference" in cp else {}

    def opt(sec, key, conv):
        return conv(sec[key]) if key in sec and sec[key].strip() != "" else None

    for key in ("policy", "arm1", "arm2"):
        if key not in ex:
            raise ValueError(f"[experiment] needs {key}")
    policy = policy_from_options(ex["policy"].strip(), opt(ex, "epsilon", float),
                                 opt(ex, "prior_alpha", float), opt(ex, "prior_beta", float),
                                 opt(ex, "clip", float), opt(ex, "pi", float))
    treated = ArmDistribution.parse(ex["arm1"])
    control = ArmDistribution.parse(ex["arm2"])
    cells = opt(gr, "cells", _cells)
    sizes = opt(gr, "batch_sizes", _ints) or ()
    counts = opt(gr, "batch_counts", _ints) or ()
    if cells is None and not (sizes and counts):
        raise ValueError("[grid] needs cells or both batch_sizes and batch_counts")
    R = reps if reps is not None else opt(gr, "replications", int)
    if R is None:
        raise ValueError("replication count missing: set [grid] replications or pass --reps")
    master = seed if seed is not None else (opt(gr, "seed", int) or 0)
    statistics = tuple(s.strip() for s in inf.get("statistics", ",".join(STATISTICS)).split(",") if s.strip())
    mode = VarianceMode.parse(inf.get("variance", "sample").strip())
    spec = MCGridSpec(
        policy=policy, treated=treated, control=control,
        batch_sizes=sizes, batch_counts=counts, replications=R, master_seed=master,
        alpha=float(inf.get("alpha", 0.05)), null_value=float(inf.get("null", 0.0)),
        statistics=statistics, variance_mode=mode, hc=inf.get("hc", "HC0").strip(),
        hom_pooling=inf.get("hom_pooling", "global").strip(),
        alternative=inf.get("alternative", "two-sided").strip(),
        min_units=opt(inf, "min_units", int) if inf else None,
        cells=cells,
    )
    return GridConfig(spec, source)


def read_grid_config(path, reps: Optional[int] = None, seed: Optional[int] = None) -> GridConfig:
    with open(path) as fh:
        return parse_grid_config(fh.read(), reps, seed, str(path))


# --------------------------------------------------------------------------
# histograms


@dataclass(frozen=True)
class Histogram:
    edges: np.ndarray
    density: np.ndarray
    underflow: int
    overflow: int
    n: int

    @property
    def normal_density(self) -> np.ndarray:
        """Average standard normal density over each bin."""
        cdf = normal_cdf(self.edges)
        return np.diff(cdf) / np.diff(self.edges)


def histogram(sample: Iterable[float], bins: int = 200, lo: float = -6.0, hi: float = 6.0) -> Histogram:
    """Equal-width density histogram normalized over the in-range values.

    Values outside ``[lo, hi]`` are counted as underflow/overflow instead of
    being folded into the edge bins, so the bins integrate to one.
    """
    if bins < 1 or not hi > lo:
        raise ValueError("need bins >= 1 and hi > lo")
    x = np.asarray(sample, dtype=float)
    edges = np.linspace(lo, hi, bins + 1)
    under = int(np.count_nonzero(x < lo))
    over = int(np.count_nonzero(x > hi))
    counts, _ = np.histogram(x, edges)
    inside = counts.sum()
    width = np.diff(edges)
    density = counts / (inside * width) if inside else np.zeros(bins)
    return Histogram(edges, density, under, over, int(x.size))


def histogram_csv_lines(hists: dict) -> list:
    lines = [",".join(HISTOGRAM_COLUMNS)]
    for stat, h in hists.items():
        ref = h.normal_density
        for i in range(len(h.density)):
            lines.append(",".join([stat, fmt_stat(h.edges[i]), fmt_stat(h.edges[i + 1]),
                                   fmt_stat(h.density[i]), fmt_stat(ref[i])]))
    return lines


_COLORS = ("#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e")


def density_svg(hists: dict, width: int = 640, height: int = 400, title: str = "") -> str:
    """Static SVG: one polyline per statistic and a dashed normal reference."""
    pad = 40
    first = next(iter(hists.values()))
    lo, hi = float(first.edges[0]), float(first.edges[-1])
    xs = np.linspace(lo, hi, 401)
    ref = np.exp(-0.5 * xs**2) / math.sqrt(2 * math.pi)
    top = max([float(ref.max())] + [float(h.density.max()) for h in hists.values()]) * 1.05

    def px(x):
        return pad + (x - lo) / (hi - lo) * (width - 2 * pad)

    def py(y):
        return height - pad - y / top * (height - 2 * pad)

    def points(x, y):
        return " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for tick in range(math.ceil(lo), math.floor(hi) + 1, 2):
        parts.append(f'<text x="{px(tick):.2f}" y="{height - pad + 15}" font-size="11" '
                     f'text-anchor="middle">{tick}</text>')
    if title:
        parts.append(f'<text x="{width / 2}" y="20" font-size="14" text-anchor="middle">{title}</text>')
    for i, (stat, h) in enumerate(hists.items()):
        mids = 0.5 * (h.edges[:-1] + h.edges[1:])
        color = _COLORS[i % len(_COLORS)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                     f'points="{points(mids, h.density)}"/>')
        parts.append(f'<text x="{width - pad - 120}" y="{pad + 15 * i}" font-size="12" '
                     f'fill="{color}">{stat}</text>')
    parts.append(f'<polyline fill="none" stroke="red" stroke-dasharray="4,3" stroke-width="1.5" '
                 f'points="{points(xs, ref)}"/>')
    parts.append(f'<text x="{width - pad - 120}" y="{pad + 15 * len(hists)}" font-size="12" '
                 f'fill="red">N(0,1)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
