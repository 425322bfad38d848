"""Held-out evaluation of frozen hedging policies: cost distributions, MSHE, sweeps."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .analytic import bartlett_policy, call_premium
from .ledger import ContractSpec, CostSpec, run_batch
from .market import ConfigError, MarketConfig, eval_seeds, simulate_arrays

PERCENTILES = (1, 5, 25, 50, 75, 95, 99)
FALLBACK_BINS = 50
MAX_FD_BINS = 1000
SWEEP_AXES = ("maturity_days", "sigma", "alpha")


class MissingCheckpointError(LookupError):
    def __init__(self, cells):
        self.cells = list(cells)
        listing = "; ".join(self.cells)
        super().__init__(f"missing checkpoint for: {listing}")


@dataclass
class EvalReport:
    """Summary of hedging costs (positive = loss) over a held-out path set."""

    policy_name: str
    n_paths: int
    mean_cost: float
    std_cost: float
    mshe: float
    percentiles: dict
    histogram: dict
    fingerprint: str
    seed: int
    costs: np.ndarray | None = field(default=None, repr=False, compare=False)
    path_seeds: list | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
             if f.name not in ("costs", "path_seeds")}
        return json.loads(json.dumps(d))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)

    @property
    def std_error_mshe(self) -> float:
        if self.costs is None:
            raise ValueError("per-path costs not retained")
        return float(np.std(self.costs**2) / math.sqrt(len(self.costs)))


def histogram(costs, bins: int | None = None) -> dict:
    """Freedman-Diaconis bins, 50 uniform bins when that rule breaks down.

    A constant sample gets a single unit-width bin centred on its value.
    """
    x = np.asarray(costs, dtype=float)
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 1e-12 * max(1.0, abs(lo)):
        edges = np.array([lo - 0.5, lo + 0.5])
        return {"edges": edges.tolist(), "counts": [int(len(x))]}
    if bins is None:
        q75, q25 = np.percentile(x, [75, 25])
        width = 2.0 * (q75 - q25) * len(x) ** (-1.0 / 3.0)
        n = math.ceil((hi - lo) / width) if width > 0 else 0
        bins = n if 1 <= n <= MAX_FD_BINS else FALLBACK_BINS
    if bins < 1:
        raise ConfigError("bins", "must be >= 1")
    counts, edges = np.histogram(x, bins=int(bins), range=(lo, hi))
    return {"edges": edges.tolist(), "counts": [int(c) for c in counts]}


def summarize(costs, policy_name: str, seed: int, fingerprint: str = "", bins=None,
              path_seeds=None) -> EvalReport:
    c = np.asarray(costs, dtype=float)
    pct = np.percentile(c, PERCENTILES)
    return EvalReport(
        policy_name=policy_name,
        n_paths=int(len(c)),
        mean_cost=float(c.mean()),
        std_cost=float(c.std()),
        mshe=float(np.mean(c * c)),
        percentiles={str(p): float(v) for p, v in zip(PERCENTILES, pct)},
        histogram=histogram(c, bins),
        fingerprint=fingerprint,
        seed=int(seed),
        costs=c,
        path_seeds=list(path_seeds) if path_seeds is not None else None,
    )


def eval_paths(market: MarketConfig, n_paths: int, seed: int):
    seeds = eval_seeds(seed, n_paths)
    spot, vol = simulate_arrays(market, seeds)
    return seeds, spot, vol


def evaluate_many(policies: dict, market: MarketConfig, contract: ContractSpec, cost: CostSpec,
                  n_paths: int = 10_000, seed: int = 0, premium: bool = True, bins=None,
                  fingerprint: str = "", paths=None) -> dict:
    """Evaluate several policies on one shared held-out path set.

    Costs include the option premium as initial cash when ``premium`` is set,
    so a perfect replication scores zero.
    """
    if n_paths < 1:
        raise ConfigError("n_paths", "must be >= 1")
    seeds, spot, vol = paths if paths is not None else eval_paths(market, n_paths, seed)
    y0 = call_premium(market, contract) if premium else 0.0
    out = {}
    for name, policy in policies.items():
        res = run_batch(market.times, spot, vol, contract, cost, policy, y0=y0, ir=market.ir)
        out[name] = summarize(res.hedging_cost, name, seed, fingerprint, bins, seeds)
    return out


def evaluate(policy, market: MarketConfig, contract: ContractSpec, cost: CostSpec,
             n_paths: int = 10_000, seed: int = 0, policy_name: str = "policy", **kw) -> EvalReport:
    return evaluate_many({policy_name: policy}, market, contract, cost, n_paths, seed, **kw)[policy_name]


def write_costs_csv(reports, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["path_seed", "policy", "cost"])
    for r in reports:
        if r.costs is None or r.path_seeds is None:
            raise ValueError(f"report {r.policy_name!r} has no per-path costs")
        for s, c in zip(r.path_seeds, r.costs):
            w.writerow([s, r.policy_name, repr(float(c))])


# -- experiment matrix ---------------------------------------------------------

@dataclass
class SweepCell:
    axis: str
    value: float
    market: MarketConfig
    cost: CostSpec
    report: EvalReport

    @property
    def label(self) -> str:
        return f"{self.axis}={self.value:g}/{self.report.policy_name}"


def apply_axis(market: MarketConfig, cost: CostSpec, axis: str, value):
    """Market and cost for one sweep value.

    A maturity change keeps an explicit ``n_steps`` (same number of
    rebalancings); the default daily grid grows with the maturity.
    """
    if axis == "maturity_days":
        return dataclasses.replace(market, maturity_days=value), cost
    if axis == "sigma":
        return dataclasses.replace(market, sigma0=float(value)), cost
    if axis == "alpha":
        return market, dataclasses.replace(cost, alpha=float(value))
    raise ConfigError("axis", f"must be one of {SWEEP_AXES}")


def _evaluate_cell(job):
    pols, m, contract, c, n_paths, seed, bins = job
    return evaluate_many(pols, m, contract, c, n_paths, seed, bins=bins)


def sweep(market: MarketConfig, contract: ContractSpec, cost: CostSpec, axis: str, values,
          policy_names, resolve, n_paths: int = 10_000, seed: int = 0, bins=None,
          workers: int = 1) -> list[SweepCell]:
    """Evaluate every (axis value, policy) cell.

    ``resolve(name, market, cost)`` returns a policy for the cell or ``None``
    if its checkpoint is missing; all missing cells are reported together
    before any evaluation runs. With ``workers > 1`` the axis values are
    evaluated in separate processes; results do not depend on the split.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError("axis", f"must be one of {SWEEP_AXES}")
    plan = []
    missing = []
    for v in values:
        m, c = apply_axis(market, cost, axis, v)
        pols = {}
        for name in policy_names:
            pol = resolve(name, m, c)
            if pol is None:
                missing.append(f"{axis}={v:g}/{name}")
            pols[name] = pol
        plan.append((v, m, c, pols))
    if missing:
        raise MissingCheckpointError(missing)
    jobs = [(pols, m, contract, c, n_paths, seed, bins) for _, m, c, pols in plan]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_evaluate_cell, jobs))
    else:
        results = [_evaluate_cell(j) for j in jobs]
    cells = []
    for (v, m, c, _), reports in zip(plan, results):
        cells.extend(SweepCell(axis, float(v), m, c, reports[n]) for n in policy_names)
    return cells


def write_comparison_csv(cells, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["axis", "value", "policy", "n_paths", "mean_cost", "std_cost", "mshe"])
    for cell in cells:
        r = cell.report
        w.writerow([cell.axis, repr(cell.value), r.policy_name, r.n_paths,
                    repr(r.mean_cost), repr(r.std_cost), repr(r.mshe)])


def check_robustness_configs(bs_market: MarketConfig, sabr_market: MarketConfig) -> None:
    if bs_market.model_kind != "BS" or sabr_market.model_kind != "SABR":
        raise ConfigError("model_kind", "robustness needs a BS training market and a SABR test market")
    if bs_market.sigma0 != sabr_market.sigma0:
        raise ConfigError("sigma0", f"BS sigma {bs_market.sigma0} != SABR sigma0 {sabr_market.sigma0}")
    if (bs_market.steps, bs_market.maturity) != (sabr_market.steps, sabr_market.maturity):
        raise ConfigError("n_steps", "BS and SABR grids differ")


def robustness_eval(agents: dict, bs_market: MarketConfig, sabr_market: MarketConfig,
                    contract: ContractSpec, cost: CostSpec, n_paths: int = 10_000, seed: int = 0,
                    bins=None) -> dict:
    """BS-trained policies and Bartlett's delta on one SABR path set."""
    check_robustness_configs(bs_market, sabr_market)
    pols = dict(agents)
    pols["bartlett"] = bartlett_policy(contract, sabr_market)
    return evaluate_many(pols, sabr_market, contract, cost, n_paths, seed, bins=bins)


def write_robustness_csv(reports: dict, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["policy", "mean_cost", "std_cost", "mshe"])
    for name, r in reports.items():
        w.writerow([name, repr(r.mean_cost), repr(r.std_cost), repr(r.mshe)])


# -- rendering -----------------------------------------------------------------

_COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


def render_histogram(reports, width: int = 640, height: int = 400) -> str:
    """Overlaid step histograms (densities) as a standalone SVG string."""
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    left, right, top, bottom = 60, 20, 20, 50
    pw, ph = width - left - right, height - top - bottom
    lo = min(r.histogram["edges"][0] for r in reports)
    hi = max(r.histogram["edges"][-1] for r in reports)
    span = hi - lo if hi > lo else 1.0
    dens = []
    for r in reports:
        e = np.asarray(r.histogram["edges"])
        c = np.asarray(r.histogram["counts"], dtype=float)
        dens.append(c / (max(c.sum(), 1.0) * np.diff(e)))
    ymax = max(float(d.max()) for d in dens) or 1.0

    def px(x):
        return left + (x - lo) / span * pw

    def py(y):
        return top + ph - y / ymax * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
    ]
    for k in range(5):
        x = lo + span * k / 4
        out.append(f'<text x="{px(x):.2f}" y="{top + ph + 16}" font-size="11" '
                   f'text-anchor="middle">{x:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 10}" font-size="13" '
               f'text-anchor="middle">total hedging cost</text>')
    out.append(f'<text x="15" y="{top + ph / 2:.2f}" font-size="13" text-anchor="middle" '
               f'transform="rotate(-90 15 {top + ph / 2:.2f})">density</text>')
    for k, (r, d) in enumerate(zip(reports, dens)):
        e = r.histogram["edges"]
        pts = [f"{px(e[0]):.2f},{py(0):.2f}"]
        for j, v in enumerate(d):
            pts.append(f"{px(e[j]):.2f},{py(v):.2f}")
            pts.append(f"{px(e[j + 1]):.2f},{py(v):.2f}")
        pts.append(f"{px(e[-1]):.2f},{py(0):.2f}")
        colour = _COLOURS[k % len(_COLOURS)]
        out.append(f'<polyline class="hist" fill="none" stroke="{colour}" stroke-width="1.5" '
                   f'points="{" ".join(pts)}"/>')
        ly = top + 14 + 16 * k
        out.append(f'<g class="legend"><line x1="{left + pw - 150}" y1="{ly - 4}" '
                   f'x2="{left + pw - 130}" y2="{ly - 4}" stroke="{colour}" stroke-width="2"/>'
                   f'<text x="{left + pw - 125}" y="{ly}" font-size="12">{_escape(r.policy_name)}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
