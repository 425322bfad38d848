import io
import json
import math

import numpy as np
import pytest

from quadhedge.analytic import bartlett_policy, delta_policy
from quadhedge.evaluation import (
    EvalReport,
    MissingCheckpointError,
    SweepCell,
    apply_axis,
    evaluate,
    evaluate_many,
    histogram,
    render_histogram,
    robustness_eval,
    summarize,
    sweep,
    write_comparison_csv,
    write_costs_csv,
    write_robustness_csv,
)
from quadhedge.ledger import ContractSpec, CostSpec
from quadhedge.market import ConfigError, MarketConfig

CON = ContractSpec()
BS = MarketConfig()
SABR = MarketConfig(model_kind="SABR")


def delta_resolver(name, market, cost):
    return delta_policy(CON, market.sigma0, market)


def test_degenerate_report():
    m = MarketConfig(sigma0=1e-300, mu=0.0)
    r = evaluate(lambda s: 0.0, m, ContractSpec(strike=120), CostSpec(0.0), n_paths=50, premium=False)
    assert r.mean_cost == 0.0 and r.std_cost == 0.0 and r.mshe == 0.0
    assert r.histogram["counts"] == [50]
    assert len(r.histogram["edges"]) == 2


def test_delta_report_and_decomposition():
    r = evaluate(delta_policy(CON, 0.2, BS), BS, CON, CostSpec(0.0), n_paths=10_000)
    assert abs(r.mean_cost) < 0.05
    assert r.mshe == pytest.approx(r.mean_cost**2 + r.std_cost**2, rel=1e-9)
    assert sum(r.histogram["counts"]) == r.n_paths
    assert list(r.percentiles) == ["1", "5", "25", "50", "75", "95", "99"]
    assert r.percentiles["1"] <= r.percentiles["50"] <= r.percentiles["99"]


def test_disjoint_path_sets_agree():
    pol = delta_policy(CON, 0.2, BS)
    a = evaluate(pol, BS, CON, CostSpec(0.0), n_paths=10_000, seed=0)
    b = evaluate(pol, BS, CON, CostSpec(0.0), n_paths=10_000, seed=20_000)
    assert not set(a.path_seeds) & set(b.path_seeds)
    assert abs(a.mshe - b.mshe) < 3 * math.hypot(a.std_error_mshe, b.std_error_mshe)


def test_report_is_deterministic_and_round_trips():
    pol = delta_policy(CON, 0.2, BS)
    a = evaluate(pol, BS, CON, CostSpec(0.001), n_paths=500, fingerprint="abc")
    b = evaluate(pol, BS, CON, CostSpec(0.001), n_paths=500, fingerprint="abc")
    assert a.to_json() == b.to_json()
    back = EvalReport.from_dict(json.loads(a.to_json()))
    assert back == a
    assert back.to_json() == a.to_json()


def test_histogram_rules():
    x = np.random.default_rng(0).standard_normal(10_000)
    h = histogram(x)
    width = h["edges"][1] - h["edges"][0]
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    assert width == pytest.approx((x.max() - x.min()) / math.ceil((x.max() - x.min()) / (2 * iqr * 10_000 ** (-1 / 3))))
    assert len(histogram(x, bins=7)["counts"]) == 7
    # zero IQR with a spread-out tail falls back to uniform bins
    y = np.concatenate((np.zeros(100), [1.0, 2.0]))
    assert len(histogram(y)["counts"]) == 50
    with pytest.raises(ConfigError):
        histogram(x, bins=0)


def test_costs_csv():
    reports = evaluate_many({"a": lambda s: 0.0, "b": lambda s: 1.0}, BS, CON, CostSpec(), n_paths=3)
    buf = io.StringIO()
    write_costs_csv(reports.values(), buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "path_seed,policy,cost" and len(lines) == 7
    with pytest.raises(ValueError):
        write_costs_csv([summarize([1.0], "x", 0)], io.StringIO())


def test_apply_axis():
    m, c = apply_axis(BS, CostSpec(), "maturity_days", 60)
    assert m.steps == 60
    m, _ = apply_axis(MarketConfig(n_steps=15), CostSpec(), "maturity_days", 60)
    assert m.steps == 15
    m, c = apply_axis(BS, CostSpec(), "alpha", 0.003)
    assert c.alpha == 0.003 and m == BS
    with pytest.raises(ConfigError):
        apply_axis(BS, CostSpec(), "rho", 0.1)


def _stds(cells):
    return [c.report.std_cost for c in cells]


def test_maturity_and_vol_sweeps_increase_spread():
    fixed = MarketConfig(n_steps=30)
    cells = sweep(fixed, CON, CostSpec(0.0), "maturity_days", [10, 30, 60, 90], ["delta"], delta_resolver,
                  n_paths=2000)
    assert all(isinstance(c, SweepCell) for c in cells)
    assert np.all(np.diff(_stds(cells)) > 0)
    # with daily rebalancing the residual is nearly maturity-free: vega grows like
    # sqrt(T) while the per-step error shrinks like 1/sqrt(N) with N proportional to T
    daily = _stds(sweep(BS, CON, CostSpec(0.0), "maturity_days", [10, 90], ["delta"], delta_resolver,
                        n_paths=2000))
    assert abs(daily[1] / daily[0] - 1) < 0.1
    cells = sweep(BS, CON, CostSpec(0.0), "sigma", [0.1, 0.2, 0.4], ["delta"], delta_resolver, n_paths=2000)
    assert np.all(np.diff(_stds(cells)) > 0)


def test_alpha_sweep_increases_mean_and_csv():
    cells = sweep(BS, CON, CostSpec(), "alpha", [0.0, 0.001, 0.003], ["delta", "bartlett"],
                  lambda n, m, c: delta_resolver(n, m, c) if n == "delta" else bartlett_policy(CON, m),
                  n_paths=1000)
    means = [c.report.mean_cost for c in cells if c.report.policy_name == "delta"]
    assert np.all(np.diff(means) > 0)
    buf = io.StringIO()
    write_comparison_csv(cells, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == "axis,value,policy,n_paths,mean_cost,std_cost,mshe" and len(lines) == 7
    assert cells[0].label == "alpha=0/delta"


def test_missing_cells_are_listed_together():
    def resolve(name, market, cost):
        return None if name == "dtsoc" and market.maturity_days > 20 else delta_resolver(name, market, cost)

    with pytest.raises(MissingCheckpointError) as exc:
        sweep(BS, CON, CostSpec(), "maturity_days", [10, 30, 60], ["delta", "dtsoc"], resolve, n_paths=10)
    assert exc.value.cells == ["maturity_days=30/dtsoc", "maturity_days=60/dtsoc"]
    assert "maturity_days=60/dtsoc" in str(exc.value)


def test_robustness_eval():
    agents = {"delta_bs": delta_policy(CON, 0.2, BS)}
    reports = robustness_eval(agents, BS, SABR, CON, CostSpec(0.0), n_paths=2000)
    assert set(reports) == {"delta_bs", "bartlett"}
    direct = evaluate(bartlett_policy(CON, SABR), SABR, CON, CostSpec(0.0), n_paths=2000, policy_name="bartlett")
    assert reports["bartlett"].to_json() == direct.to_json()
    buf = io.StringIO()
    write_robustness_csv(reports, buf)
    assert buf.getvalue().splitlines()[0] == "policy,mean_cost,std_cost,mshe"
    with pytest.raises(ConfigError):
        robustness_eval(agents, MarketConfig(sigma0=0.25), SABR, CON, CostSpec(), n_paths=10)
    with pytest.raises(ConfigError):
        robustness_eval(agents, BS, MarketConfig(model_kind="SABR", maturity_days=60), CON, CostSpec(), n_paths=10)
    with pytest.raises(ConfigError):
        robustness_eval(agents, SABR, SABR, CON, CostSpec(), n_paths=10)


def test_bartlett_beats_bs_delta_on_sabr():
    reports = evaluate_many({"delta": delta_policy(CON, 0.2, SABR), "bartlett": bartlett_policy(CON, SABR)},
                            SABR, CON, CostSpec(0.0), n_paths=5000)
    assert reports["bartlett"].mshe < reports["delta"].mshe


def test_svg_rendering():
    reports = evaluate_many({"delta": delta_policy(CON, 0.2, BS), "static <half>": lambda s: 0.5},
                            BS, CON, CostSpec(), n_paths=300, bins=12)
    svg = render_histogram(reports.values())
    assert svg == render_histogram(reports.values())
    assert svg.count('class="hist"') == 2 and svg.count('class="legend"') == 2
    assert "total hedging cost" in svg and "static &lt;half&gt;" in svg
    # 12 bins -> 2 points per bin plus the two baseline anchors
    first = svg.split('class="hist"')[1].split('points="')[1].split('"')[0]
    assert len(first.split()) == 2 * 12 + 2
    degenerate = summarize(np.zeros(5), "flat", 0)
    assert render_histogram([degenerate]).count('class="hist"') == 1
    with pytest.raises(ValueError):
        render_histogram([])
