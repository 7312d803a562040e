"""Wall-time scaling of the attention forward pass and analytic space counts."""

from __future__ import annotations

import ctypes
import ctypes.util
import csv
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_info, threadpool_limits

from .attention import AttentionConfig, FeatureMap, ProjectionWeights, agent_plan, multi_head_forward
from .numeric import subseed_rng

SLOPE_BANDS = {
    "self": (1.6, 2.4),
    "performer": (0.8, 1.3),
    "agent-capped": (0.8, 1.4),
}
UNCAPPED_AGENT_MIN_SLOPE = 1.5

CSV_FIELDS = ["mechanism", "N", "median_ms", "mad_ms", "slope", "r2", "space_floats"]


@dataclass
class BenchSpec:
    """One timing sweep over sequence lengths.

    ``label`` names the row in reports; it defaults to the mechanism, with
    ``-capped`` or ``-paper`` appended for agent attention.
    """

    mechanism: str = "self"
    n_grid: tuple = (512, 1024, 2048, 4096, 8192)
    d_attn: int = 64
    r: int = 64
    p: int = 4
    n_cap: int | None = None
    repetitions: int = 5
    warmup: int = 1
    seed: int = 0
    label: str | None = None

    def __post_init__(self):
        grid = list(self.n_grid)
        if len(grid) < 4 or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ValueError("N grid must be strictly increasing with at least 4 points")
        if self.repetitions < 5:
            raise ValueError("need at least 5 repetitions per point")
        if self.label is None:
            label = self.mechanism
            if self.mechanism == "agent":
                label += "-capped" if self.n_cap is not None else "-paper"
            self.label = label

    def config(self):
        # h = 1 and d_model = d_attn: the timed region is one head's kernel
        return AttentionConfig(mechanism=self.mechanism, d_model=self.d_attn, d_attn=self.d_attn,
                               heads=1, r=self.r, p=self.p, n_cap=self.n_cap)


@dataclass
class BenchResult:
    label: str
    n_grid: list
    timings: list                      # seconds, one list per N
    space: list = field(default_factory=list)
    slope: float = float("nan")
    intercept: float = float("nan")
    r2: float = float("nan")

    @property
    def medians(self):
        return [float(np.median(t)) for t in self.timings]

    @property
    def mads(self):
        return [float(np.median(np.abs(np.asarray(t) - np.median(t)))) for t in self.timings]

    def rows(self):
        return [
            {"mechanism": self.label, "N": n, "median_ms": med * 1e3, "mad_ms": mad * 1e3,
             "slope": self.slope, "r2": self.r2, "space_floats": sp}
            for n, med, mad, sp in zip(self.n_grid, self.medians, self.mads, self.space)
        ]


def assert_single_threaded():
    busy = [i for i in threadpool_info() if i.get("num_threads", 1) != 1]
    if busy:
        desc = ", ".join(f"{i['internal_api']}={i['num_threads']}" for i in busy)
        raise RuntimeError(f"numeric backend is multi-threaded during timing: {desc}")


# glibc mallopt parameters
_M_TRIM_THRESHOLD = -1
_M_MMAP_THRESHOLD = -3


def _glibc():
    name = ctypes.util.find_library("c")
    try:
        libc = ctypes.CDLL(name)
    except (OSError, TypeError):
        return None
    return libc if hasattr(libc, "mallopt") and hasattr(libc, "gnu_get_libc_version") else None


@contextmanager
def retained_heap():
    """Keep freed memory inside the process while timing (glibc only).

    By default glibc returns large freed blocks to the OS, so every forward
    call page-faults its N x d temporaries back in. On virtual machines that
    cost dominates the linear mechanisms beyond a few MB and bends their
    slope. Yields whether the setting could be applied.
    """
    libc = _glibc()
    if libc is None:
        yield False
        return
    libc.mallopt(_M_MMAP_THRESHOLD, 32 << 20)
    libc.mallopt(_M_TRIM_THRESHOLD, 1 << 30)
    try:
        yield True
    finally:
        libc.mallopt(_M_TRIM_THRESHOLD, 128 << 10)
        libc.mallopt(_M_MMAP_THRESHOLD, 128 << 10)


def bench_inputs(spec, n):
    rng = subseed_rng(spec.seed, f"bench-{n}")
    cfg = spec.config()
    x = rng.standard_normal((n, cfg.d_model))
    weights = ProjectionWeights.init(rng, cfg.d_model, cfg.d_attn)
    fm = FeatureMap.draw(rng, cfg.r, cfg.d_head) if cfg.mechanism == "performer" else None
    kernel = np.zeros((cfg.dwc_width, cfg.d_attn)) if cfg.mechanism == "agent" else None
    return x, weights, cfg, fm, kernel


def time_forward(spec):
    """Raw timings (seconds) per N, each around exactly one forward call."""
    out = []
    with threadpool_limits(limits=1), retained_heap():
        assert_single_threaded()
        for n in spec.n_grid:
            x, weights, cfg, fm, kernel = bench_inputs(spec, n)
            for _ in range(spec.warmup):
                multi_head_forward(x, weights, cfg, None, fm, kernel)
            ts = []
            for _ in range(spec.repetitions):
                t0 = time.perf_counter()
                multi_head_forward(x, weights, cfg, None, fm, kernel)
                ts.append(time.perf_counter() - t0)
            out.append(ts)
    return out


def fit_slope(points):
    """Least-squares fit of ``ln t = slope * ln N + intercept``.

    Returns ``(slope, intercept, r2)``.
    """
    pts = list(points)
    if len(pts) < 4:
        raise ValueError("need at least 4 points")
    n = np.array([p[0] for p in pts], dtype=np.float64)
    t = np.array([p[1] for p in pts], dtype=np.float64)
    if np.any(n <= 0) or np.any(t <= 0):
        raise ValueError("N and time must be positive")
    fit = stats.linregress(np.log(n), np.log(t))
    return float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2)


def space_estimate(mechanism, n, d, r=None, agents=None):
    """Dominant-term float counts of the attention working set.

    self: the N x N weights plus the N x d input and context (``N^2 + 2Nd``).
    performer: feature matrix, context and the r x d summary
    (``Nr + Nd + rd``). agent: agent weights and the agent matrix
    (``Nn + nd``).
    """
    if n <= 0 or d <= 0:
        raise ValueError("N and d must be positive")
    if mechanism == "self":
        return n * n + 2 * n * d
    if mechanism == "performer":
        if not r or r <= 0:
            raise ValueError("performer needs r > 0")
        return n * r + n * d + r * d
    if mechanism == "agent":
        if not agents or agents <= 0:
            raise ValueError("agent needs n > 0")
        return n * agents + agents * d
    raise ValueError(f"unknown mechanism {mechanism!r}")


def run_bench(spec):
    timings = time_forward(spec)
    result = BenchResult(spec.label, list(spec.n_grid), timings)
    result.slope, result.intercept, result.r2 = fit_slope(zip(result.n_grid, result.medians))
    for n in spec.n_grid:
        agents = agent_plan(n, spec.p, spec.n_cap)[1] if spec.mechanism == "agent" else None
        result.space.append(space_estimate(spec.mechanism, n, spec.d_attn, spec.r, agents))
    return result


def slope_verdict(result):
    """``(passed, band)`` for ``result.slope``; band is None when unbanded."""
    if result.label in SLOPE_BANDS:
        lo, hi = SLOPE_BANDS[result.label]
        return lo <= result.slope <= hi, (lo, hi)
    if result.label == "agent-paper":
        return result.slope > UNCAPPED_AGENT_MIN_SLOPE, (UNCAPPED_AGENT_MIN_SLOPE, None)
    return True, None


def emit_report(results, out_dir, stem="bench", gnuplot=True):
    """Write ``<stem>.csv``, ``<stem>.json`` and optionally ``<stem>.dat``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out_dir / f"{stem}.csv", "json": out_dir / f"{stem}.json"}
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for res in results:
            for row in res.rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    summary = []
    for res in results:
        ok, band = slope_verdict(res)
        summary.append({
            "mechanism": res.label, "slope": res.slope, "intercept": res.intercept, "r2": res.r2,
            "band": band, "pass": ok, "N": res.n_grid, "median_ms": [m * 1e3 for m in res.medians],
        })
    paths["json"].write_text(json.dumps(summary, indent=1) + "\n")
    if gnuplot:
        paths["dat"] = out_dir / f"{stem}.dat"
        with open(paths["dat"], "w") as fh:
            for res in results:
                fh.write(f"# {res.label} slope={res.slope:.4f}\n# N median_ms mad_ms\n")
                for n, med, mad in zip(res.n_grid, res.medians, res.mads):
                    fh.write(f"{n} {med * 1e3:.6f} {mad * 1e3:.6f}\n")
                fh.write("\n\n")
    return paths


def read_report_csv(path):
    """Parse a report CSV back into row dicts with numeric fields converted."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["N"] = int(row["N"])
        row["space_floats"] = int(row["space_floats"])
        for k in ("median_ms", "mad_ms", "slope", "r2"):
            row[k] = float(row[k])
    return rows
