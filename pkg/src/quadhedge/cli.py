"""``quadhedge`` command line.

Exit codes: 0 success, 2 usage, 3 invalid configuration, 4 missing
checkpoint, 5 I/O failure, 6 training diverged, 1 anything else.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analytic import bartlett_delta, bs_call, sabr_implied_vol
from .config import echo_config, load_config, checkpoint_path
from .evaluation import (
    MissingCheckpointError,
    check_robustness_configs,
    evaluate_many,
    render_histogram,
    robustness_eval,
    sweep,
    write_comparison_csv,
    write_costs_csv,
    write_robustness_csv,
)
from .market import ConfigError, simulate_batch, write_paths_csv
from .neural import TrainingError
from .pipeline import bs_twin, make_policy, require_policy, save_agent, train_agent

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_CHECKPOINT = 4
EXIT_IO = 5
EXIT_DIVERGED = 6
EXIT_OTHER = 1

COMMON_FLAGS = [
    (("--config", "-c"), dict(metavar="PATH", help="YAML experiment config (defaults if omitted)")),
    (("--set",), dict(dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                      help="override a config entry, e.g. market.maturity_days=60 (repeatable)")),
    (("--output-dir",), dict(metavar="DIR", help="root directory for run artifacts")),
    (("--quiet", "-q"), dict(action="store_true", help="suppress progress output")),
]

# subcommand -> (help, [(flags, kwargs)])
COMMANDS = {
    "simulate": ("write simulated paths to CSV", [
        (("--n-paths",), dict(type=int, default=3, help="number of paths")),
        (("--seed",), dict(type=int, help="base seed; path k uses base+k (default eval.seed)")),
    ]),
    "train-dtsoc": ("train the per-date policy networks", [
        (("--episodes",), dict(type=int, help="override train.dtsoc.episodes")),
    ]),
    "train-rlqh": ("train the second-moment actor-critic agent", [
        (("--episodes",), dict(type=int, help="override train.rlqh.episodes")),
    ]),
    "evaluate": ("evaluate one policy on held-out paths", [
        (("--agent",), dict(choices=["dtsoc", "rlqh", "delta", "bartlett"], help="override agent.kind")),
        (("--checkpoint",), dict(metavar="PATH", help="agent checkpoint (default: checkpoint store)")),
        (("--n-paths",), dict(type=int, help="override eval.n_paths")),
        (("--seed",), dict(type=int, help="override eval.seed")),
        (("--bins",), dict(type=int, help="override eval.bins")),
    ]),
    "sweep": ("evaluate policies across maturities, volatilities or cost levels", [
        (("--axis",), dict(choices=["maturity_days", "sigma", "alpha"], help="override sweep.axis")),
        (("--values",), dict(metavar="V1,V2,...", help="override sweep.values")),
        (("--policies",), dict(metavar="P1,P2,...", help="override sweep.policies")),
        (("--train-missing",), dict(action="store_true", help="train agents for cells without checkpoints")),
    ]),
    "robustness": ("evaluate Black-Scholes-trained agents on SABR paths", [
        (("--bs-sigma",), dict(type=float, help="override robustness.bs_sigma")),
        (("--agents",), dict(metavar="A1,A2", help="override robustness.agents")),
        (("--train-missing",), dict(action="store_true", help="train agents without checkpoints")),
    ]),
    "greeks": ("print Black-Scholes and Bartlett greeks as CSV", [
        (("--spots",), dict(metavar="S1,S2,...", help="discounted spots (default 80..120 step 5)")),
        (("--ttm-days",), dict(type=float, help="time to maturity in days (default: maturity)")),
    ]),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="quadhedge", description="Quadratic hedging experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}",
                   help="show version and exit")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (help_text, flags) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text, description=help_text)
        for f, kw in COMMON_FLAGS + flags:
            sp.add_argument(*f, **kw)
    return p


def _csv_list(text, cast=str):
    return [cast(v.strip()) for v in text.split(",") if v.strip()]


def _overrides(args) -> list[str]:
    out = []
    if args.output_dir:
        out.append(f"output_dir={args.output_dir}")
    cmd = args.command
    if cmd in ("train-dtsoc", "train-rlqh") and args.episodes is not None:
        out.append(f"train.{cmd[6:]}.episodes={args.episodes}")
    if cmd == "simulate" and args.seed is not None:
        out.append(f"eval.seed={args.seed}")
    if cmd == "evaluate":
        for flag, key in (("agent", "agent.kind"), ("n_paths", "eval.n_paths"),
                          ("seed", "eval.seed"), ("bins", "eval.bins"), ("checkpoint", "agent.checkpoint")):
            v = getattr(args, flag)
            if v is not None:
                out.append(f"{key}={v}")
    if cmd == "sweep":
        if args.axis:
            out.append(f"sweep.axis={args.axis}")
        if args.values:
            out.append(f"sweep.values=[{args.values}]")
        if args.policies:
            out.append(f"sweep.policies=[{args.policies}]")
        if args.train_missing:
            out.append("sweep.train_missing=true")
    if cmd == "robustness":
        if args.bs_sigma is not None:
            out.append(f"robustness.bs_sigma={args.bs_sigma}")
        if args.agents:
            out.append(f"robustness.agents=[{args.agents}]")
        if args.train_missing:
            out.append("robustness.train_missing=true")
    return out + list(args.overrides)


def _say(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


def cmd_simulate(cfg, args, run: Path):
    paths = simulate_batch(cfg.market, args.n_paths, cfg.eval.seed)
    with open(run / "paths.csv", "w", newline="") as fh:
        write_paths_csv(paths, fh)
    return run / "paths.csv"


def cmd_train(cfg, args, run: Path, kind: str):
    every = max(1, (cfg.train.dtsoc.n_epochs if kind == "dtsoc" else cfg.train.rlqh.episodes) // 20)

    def progress(step, value):
        if step % every == 0:
            _say(args, f"{kind}: {step} {value}")

    agent, log = train_agent(cfg, kind, progress=progress)
    save_agent(kind, run / f"{kind}.json", agent, cfg)
    save_agent(kind, checkpoint_path(cfg, kind), agent, cfg)
    with open(run / f"{kind}_log.csv", "w", newline="") as fh:
        log.write_csv(fh)
    return run / f"{kind}.json"


def _write_reports(run: Path, reports, svg_name="histogram.svg"):
    reports = list(reports)
    (run / "report.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))
    with open(run / "costs.csv", "w", newline="") as fh:
        write_costs_csv(reports, fh)
    (run / svg_name).write_text(render_histogram(reports))


def cmd_evaluate(cfg, args, run: Path):
    kind = cfg.agent.kind
    if kind == "none":
        raise ConfigError("agent.kind", "evaluate needs an agent")
    pol = require_policy(cfg, kind, checkpoint=cfg.agent.checkpoint)
    reports = evaluate_many({kind: pol}, cfg.market, cfg.contract, cfg.cost, cfg.eval.n_paths,
                            cfg.eval.seed, premium=cfg.eval.premium, bins=cfg.eval.bins,
                            fingerprint=cfg.fingerprint())
    _write_reports(run, reports.values())
    r = reports[kind]
    print(f"{kind}: mean {r.mean_cost:.6f} std {r.std_cost:.6f} mshe {r.mshe:.6f} n {r.n_paths}")
    return run / "report.json"


def cmd_sweep(cfg, args, run: Path):
    sw = cfg.sweep

    def resolve(name, market, cost):
        return make_policy(cfg, name, market, cost, train_missing=sw.train_missing)

    cells = sweep(cfg.market, cfg.contract, cfg.cost, sw.axis, sw.values, sw.policies, resolve,
                  cfg.eval.n_paths, cfg.eval.seed, cfg.eval.bins, workers=cfg.threads)
    with open(run / "comparison.csv", "w", newline="") as fh:
        write_comparison_csv(cells, fh)
    (run / "reports.json").write_text(json.dumps(
        [dict(axis=c.axis, value=c.value, report=c.report.to_dict()) for c in cells], indent=2, sort_keys=True))
    for v in sw.values:
        rows = [c.report for c in cells if c.value == float(v)]
        (run / f"histogram_{sw.axis}_{v:g}.svg").write_text(render_histogram(rows))
    with open(run / "comparison.csv") as fh:
        sys.stdout.write(fh.read())
    return run / "comparison.csv"


def cmd_robustness(cfg, args, run: Path):
    rb = cfg.robustness
    sabr = cfg.market
    bs = bs_twin(sabr, rb.bs_sigma)
    check_robustness_configs(bs, sabr)
    agents = {name: require_policy(cfg, name, market=bs, train_missing=rb.train_missing)
              for name in rb.agents}
    reports = robustness_eval(agents, bs, sabr, cfg.contract, cfg.cost, cfg.eval.n_paths,
                              cfg.eval.seed, cfg.eval.bins)
    with open(run / "robustness.csv", "w", newline="") as fh:
        write_robustness_csv(reports, fh)
    _write_reports(run, reports.values())
    with open(run / "robustness.csv") as fh:
        sys.stdout.write(fh.read())
    return run / "robustness.csv"


def cmd_greeks(cfg, args, run: Path):
    m = cfg.market
    spots = _csv_list(args.spots, float) if args.spots else list(np.arange(80.0, 120.1, 5.0))
    ttm = (args.ttm_days if args.ttm_days is not None else m.maturity_days) / m.day_count
    k = cfg.contract.strike * np.exp(-m.ir * m.maturity)
    lines = ["spot,ttm,price,delta,vega,sabr_implied_vol,bartlett_delta"]
    sabr_ok = abs(m.rho) < 1 and ttm > 0
    for s in spots:
        g = bs_call(s, k, m.sigma0, ttm)
        iv = sabr_implied_vol(s, k, m.sigma0, m.eta, m.rho) if sabr_ok else float("nan")
        bd = bartlett_delta(s, k, m.sigma0, ttm, m.eta, m.rho) if sabr_ok else float("nan")
        lines.append(",".join(repr(float(x)) for x in (s, ttm, g.price, g.delta, g.vega, iv, bd)))
    text = "\n".join(lines) + "\n"
    (run / "greeks.csv").write_text(text)
    sys.stdout.write(text)
    return run / "greeks.csv"


HANDLERS = {
    "simulate": cmd_simulate,
    "train-dtsoc": lambda c, a, r: cmd_train(c, a, r, "dtsoc"),
    "train-rlqh": lambda c, a, r: cmd_train(c, a, r, "rlqh"),
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "robustness": cmd_robustness,
    "greeks": cmd_greeks,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        cfg = load_config(args.config, _overrides(args))
        run = echo_config(cfg)
        out = HANDLERS[args.command](cfg, args, run)
        _say(args, f"wrote {out}")
        return EXIT_OK
    except MissingCheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING_CHECKPOINT
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"error: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
