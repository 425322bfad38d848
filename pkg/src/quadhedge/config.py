"""Experiment configuration: one YAML file with sections, validated into dataclasses.

Missing keys take the defaults below (the base Black-Scholes / SABR case);
unknown keys are rejected. ``section.key=value`` overrides are applied after
the file and after the environment variables.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dtsoc import DtsocConfig
from .ledger import ContractSpec, CostSpec
from .market import ConfigError, MarketConfig
from .rlqh import RlqhConfig

AGENT_KINDS = ("dtsoc", "rlqh", "delta", "bartlett", "none")
ENV_OUTPUT_DIR = "QUADHEDGE_OUTPUT_DIR"
ENV_THREADS = "QUADHEDGE_THREADS"


class ConfigParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None):
        where = f"line {line}" if line is not None else "config"
        super().__init__(where, message)
        self.line = line


@dataclass
class AgentSection:
    kind: str = "delta"
    checkpoint: str | None = None

    def __post_init__(self):
        if self.kind not in AGENT_KINDS:
            raise ConfigError("agent.kind", f"must be one of {AGENT_KINDS}")


@dataclass
class TrainSection:
    dtsoc: DtsocConfig = field(default_factory=DtsocConfig)
    rlqh: RlqhConfig = field(default_factory=RlqhConfig)


@dataclass
class EvalSection:
    n_paths: int = 10_000
    seed: int = 0
    bins: int | None = None
    premium: bool = True

    def __post_init__(self):
        if self.n_paths < 1:
            raise ConfigError("eval.n_paths", "must be >= 1")
        if self.bins is not None and self.bins < 1:
            raise ConfigError("eval.bins", "must be >= 1")


@dataclass
class SweepSection:
    axis: str = "maturity_days"
    values: tuple = (10, 30, 60, 90)
    policies: tuple = ("delta",)
    train_missing: bool = False

    def __post_init__(self):
        from .evaluation import SWEEP_AXES

        self.values = tuple(self.values)
        self.policies = tuple(self.policies)
        if self.axis not in SWEEP_AXES:
            raise ConfigError("sweep.axis", f"must be one of {SWEEP_AXES}")
        if not self.values:
            raise ConfigError("sweep.values", "must not be empty")
        for p in self.policies:
            if p not in AGENT_KINDS or p == "none":
                raise ConfigError("sweep.policies", f"unknown policy {p!r}")


@dataclass
class RobustnessSection:
    bs_sigma: float | None = None
    agents: tuple = ("dtsoc", "rlqh")
    train_missing: bool = False

    def __post_init__(self):
        self.agents = tuple(self.agents)
        for a in self.agents:
            if a not in ("dtsoc", "rlqh"):
                raise ConfigError("robustness.agents", f"unknown learned agent {a!r}")


@dataclass
class ExperimentConfig:
    market: MarketConfig = field(default_factory=MarketConfig)
    contract: ContractSpec = field(default_factory=ContractSpec)
    cost: CostSpec = field(default_factory=CostSpec)
    agent: AgentSection = field(default_factory=AgentSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    robustness: RobustnessSection = field(default_factory=RobustnessSection)
    output_dir: str = "runs"
    threads: int = 1

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads", "must be >= 1")

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def fingerprint(self) -> str:
        # where results go and how many processes compute them do not change them
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("threads")
        return fingerprint(d)

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.output_dir) / "checkpoints"

    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.fingerprint()


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def fingerprint(data) -> str:
    """Short stable hash of JSON-serialisable data."""
    blob = json.dumps(_plain(data), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


# section name -> dataclass; nested sections are handled by _build
_SECTIONS = {
    "market": MarketConfig,
    "contract": ContractSpec,
    "cost": CostSpec,
    "agent": AgentSection,
    "eval": EvalSection,
    "sweep": SweepSection,
    "robustness": RobustnessSection,
}
_TRAIN = {"dtsoc": DtsocConfig, "rlqh": RlqhConfig}
_TOP_SCALARS = {"output_dir": str, "threads": int}


def _build_dataclass(cls, values, where: str):
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError(where, "must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}", "unknown key")
    try:
        return cls(**values)
    except ConfigError as exc:
        if exc.field.startswith(where):
            raise
        raise ConfigError(f"{where}.{exc.field}", str(exc).split(": ", 1)[-1]) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(where, str(exc)) from None


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    unknown = sorted(set(data) - set(_SECTIONS) - {"train"} - set(_TOP_SCALARS))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    kw = {name: _build_dataclass(cls, data.get(name), name) for name, cls in _SECTIONS.items()}
    train = data.get("train") or {}
    if not isinstance(train, dict):
        raise ConfigError("train", "must be a mapping")
    bad = sorted(set(train) - set(_TRAIN))
    if bad:
        raise ConfigError(f"train.{bad[0]}", "unknown key")
    kw["train"] = TrainSection(**{n: _build_dataclass(c, train.get(n), f"train.{n}") for n, c in _TRAIN.items()})
    for name, typ in _TOP_SCALARS.items():
        if name in data:
            try:
                kw[name] = typ(data[name])
            except (TypeError, ValueError):
                raise ConfigError(name, f"must be {typ.__name__}") from None
    return ExperimentConfig(**kw)


def parse_yaml(text: str) -> dict:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigParseError(str(getattr(exc, "problem", exc)), line) from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigParseError("top level must be a mapping", 1)
    return data


def apply_override(data: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value`` (value parsed as YAML) to a nested dict in place."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like section.key=value")
    key, raw = assignment.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(assignment, "empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError:
        raise ConfigError(key, f"cannot parse value {raw!r}") from None
    node = data
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(key, f"{p} is not a section")
        node = nxt
    node[parts[-1]] = value
    return data


def load_config(path=None, overrides=(), env=None) -> ExperimentConfig:
    """Read, merge and validate a configuration.

    Precedence (lowest first): built-in defaults, the file, environment
    variables, then ``overrides``.
    """
    env = os.environ if env is None else env
    data = parse_yaml(Path(path).read_text()) if path is not None else {}
    if env.get(ENV_OUTPUT_DIR):
        data["output_dir"] = env[ENV_OUTPUT_DIR]
    if env.get(ENV_THREADS):
        data["threads"] = env[ENV_THREADS]
    for o in overrides:
        apply_override(data, o)
    return from_dict(data)


def dump_yaml(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True, default_flow_style=False)


def echo_config(cfg: ExperimentConfig) -> Path:
    """Write the resolved config into its run directory and return that directory."""
    run = cfg.run_dir()
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.yaml").write_text(dump_yaml(cfg))
    return run


def training_key(cfg: ExperimentConfig, kind: str, market: MarketConfig | None = None,
                 cost: CostSpec | None = None) -> str:
    """Fingerprint of everything a trained agent depends on."""
    market = market or cfg.market
    cost = cost or cfg.cost
    trainer = cfg.train.dtsoc if kind == "dtsoc" else cfg.train.rlqh
    return fingerprint({
        "kind": kind,
        "market": dataclasses.asdict(market),
        "contract": dataclasses.asdict(cfg.contract),
        "cost": dataclasses.asdict(cost),
        "train": dataclasses.asdict(trainer),
    })


def checkpoint_path(cfg: ExperimentConfig, kind: str, market=None, cost=None) -> Path:
    return cfg.checkpoint_dir / f"{kind}-{training_key(cfg, kind, market, cost)}.json"
