"""Run configuration: INI text in, validated ``RunConfig`` out, and back again.

Grammar: standard ``configparser`` INI with the sections below. Every key is
optional except ``[run] protocol``; unknown sections or keys are errors. Lists
are comma separated. ``to_text`` writes every field explicitly, so
``parse_config(to_text(cfg)) == cfg``.

    [run]         protocol, backend, trials, seed, horizon, max_sim_time,
                  trace_every, run_id, output_dir, emit, workers
    [hyperparams] alpha0, anneal_factor, anneal_at, mu, weight_decay,
                  beta_gossip, beta_ea, tau, p, b
    [objective]   kind (quadratic | logistic), spectrum, optimum,
                  dataset, header, l2
    [init]        offset, init_sq_err, theta0
    [noise]       kind, total_variance
    [clock]       kind, rate_per_node
    [straggler]   kind, c, mu, sigma, slow_factor, slow_node, latency
    [transport]   timeout_ms, jitter
    [bounds]      lambda_variant, c_factor, min_trials
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import Hyperparams, ProtocolKind
from .objectives import NoiseModel, QuadraticObjective, load_csv_dataset
from .simulator import ASYNC_PROTOCOLS, SYNC_PROTOCOLS, ClockModel, SimConfig, StragglerModel
from .transport import TRANSPORT_PROTOCOLS

EMIT_KINDS = ("trace_jsonl", "summary_json", "bound_report")
REFERENCE_SPECTRUM = (1.0, 2.0, 5.0, 10.0)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str = "quadratic"
    spectrum: tuple[float, ...] = REFERENCE_SPECTRUM
    optimum: tuple[float, ...] | None = None
    dataset: str | None = None
    header: bool = False
    l2: float = 1e-2

    def build(self):
        if self.kind == "quadratic":
            return QuadraticObjective(np.array(self.spectrum), None if self.optimum is None else np.array(self.optimum))
        return load_csv_dataset(self.dataset, l2=self.l2, header=self.header)


@dataclass(frozen=True)
class InitSpec:
    """Every node starts at optimum + offset * ones, unless ``theta0`` is given.

    ``init_sq_err`` rescales the offset so that sum_i |theta0_i - theta*|^2
    equals it exactly.
    """

    offset: float = 1.0
    init_sq_err: float | None = None
    theta0: tuple[float, ...] | None = None


@dataclass(frozen=True)
class TransportSpec:
    timeout_ms: float = 10_000.0
    jitter: float = 0.0


@dataclass(frozen=True)
class BoundsSpec:
    lambda_variant: str = "theorem"
    c_factor: float = 1.1
    min_trials: int = 30


@dataclass(frozen=True)
class RunConfig:
    protocol: ProtocolKind
    h: Hyperparams = field(default_factory=Hyperparams)
    objective: ObjectiveSpec = field(default_factory=ObjectiveSpec)
    init: InitSpec = field(default_factory=InitSpec)
    noise: NoiseModel = field(default_factory=NoiseModel)
    clock: ClockModel = field(default_factory=ClockModel)
    straggler: StragglerModel = field(default_factory=StragglerModel)
    transport: TransportSpec = field(default_factory=TransportSpec)
    bounds: BoundsSpec = field(default_factory=BoundsSpec)
    backend: str = "sim"
    trials: int = 1
    seed: int = 0
    horizon: int = 1000
    max_sim_time: float | None = None
    trace_every: int = 1
    run_id: str = "run"
    output_dir: str = "out"
    emit: tuple[str, ...] = ("trace_jsonl", "summary_json")
    workers: int = 1

    def trial_id(self, k: int) -> str:
        return f"{self.run_id}-{k:04d}"

    def sim_config(self, k: int = 0, objective=None) -> SimConfig:
        obj = objective if objective is not None else self.objective.build()
        return SimConfig(
            protocol=self.protocol, h=self.h, objective=obj, noise=self.noise, clock=self.clock,
            straggler=self.straggler, horizon=self.horizon, max_sim_time=self.max_sim_time,
            seed=self.seed, trace_every=self.trace_every, run_id=self.trial_id(k),
            theta0=initial_point(self, obj),
        )


def initial_point(cfg: RunConfig, obj) -> np.ndarray:
    if cfg.init.theta0 is not None:
        th = np.array(cfg.init.theta0)
        if th.size == obj.dim:
            return th
        if th.size == cfg.h.p * obj.dim:
            return th.reshape(cfg.h.p, obj.dim)
        raise ConfigError(f"init.theta0 needs {obj.dim} or {cfg.h.p * obj.dim} values, got {th.size}")
    offset = cfg.init.offset
    if cfg.init.init_sq_err is not None:
        offset = math.sqrt(cfg.init.init_sq_err / (cfg.h.p * obj.dim))
    return np.asarray(obj.optimum, dtype=np.float64) + offset


# ---------------------------------------------------------------- parsing

_SECTIONS = {
    "run": ("protocol", "backend", "trials", "seed", "horizon", "max_sim_time", "trace_every",
            "run_id", "output_dir", "emit", "workers"),
    "hyperparams": tuple(f.name for f in fields(Hyperparams)),
    "objective": tuple(f.name for f in fields(ObjectiveSpec)),
    "init": tuple(f.name for f in fields(InitSpec)),
    "noise": ("kind", "total_variance"),
    "clock": ("kind", "rate_per_node"),
    "straggler": tuple(f.name for f in fields(StragglerModel)),
    "transport": tuple(f.name for f in fields(TransportSpec)),
    "bounds": tuple(f.name for f in fields(BoundsSpec)),
}


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(x) for x in raw.split(",") if x.strip())


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(x) for x in raw.split(",") if x.strip())


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _none_or(conv):
    def f(raw: str):
        return None if raw.strip().lower() in ("", "none") else conv(raw)
    return f


_CONVERT = {
    "run": {
        "protocol": ProtocolKind.parse, "backend": str.strip, "trials": int, "seed": int, "horizon": int,
        "max_sim_time": _none_or(float), "trace_every": int, "run_id": str.strip,
        "output_dir": str.strip, "workers": int,
        "emit": lambda raw: tuple(x.strip() for x in raw.split(",") if x.strip()),
    },
    "hyperparams": {
        "alpha0": float, "anneal_factor": float, "anneal_at": _ints, "mu": float,
        "weight_decay": float, "beta_gossip": float, "beta_ea": _none_or(float),
        "tau": int, "p": int, "b": int,
    },
    "objective": {
        "kind": str.strip, "spectrum": _floats, "optimum": _none_or(_floats),
        "dataset": _none_or(str.strip), "header": _bool, "l2": float,
    },
    "init": {"offset": float, "init_sq_err": _none_or(float), "theta0": _none_or(_floats)},
    "noise": {"kind": str.strip, "total_variance": float},
    "clock": {"kind": str.strip, "rate_per_node": float},
    "straggler": {
        "kind": str.strip, "c": float, "mu": float, "sigma": float, "slow_factor": float,
        "slow_node": int, "latency": float,
    },
    "transport": {"timeout_ms": float, "jitter": float},
    "bounds": {"lambda_variant": str.strip, "c_factor": float, "min_trials": int},
}


def _read_sections(text: str) -> dict[str, dict[str, object]]:
    cp = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    cp.optionxform = str  # keep key case so typos are not silently folded
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    out: dict[str, dict[str, object]] = {}
    for sec in cp.sections():
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        vals = {}
        for key, raw in cp.items(sec):
            if key not in _SECTIONS[sec]:
                raise ConfigError(f"unknown key {sec}.{key}")
            try:
                vals[key] = _CONVERT[sec][key](raw)
            except ValueError as exc:
                raise ConfigError(f"{sec}.{key}: {exc}") from None
        out[sec] = vals
    return out


def _build(cls, sec: str, vals: dict, **extra):
    try:
        return cls(**vals, **extra)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{sec}] {exc}") from None


def parse_config(text: str, base_dir: str | Path | None = None) -> RunConfig:
    """Parse and validate INI text; relative dataset paths resolve against ``base_dir``."""
    secs = _read_sections(text)
    run = dict(secs.get("run", {}))
    if "protocol" not in run:
        raise ConfigError("missing required key run.protocol")
    protocol = run.pop("protocol")

    objective = _build(ObjectiveSpec, "objective", secs.get("objective", {}))
    if objective.kind not in ("quadratic", "logistic"):
        raise ConfigError(f"[objective] unknown kind {objective.kind!r}")
    if objective.kind == "logistic":
        if not objective.dataset:
            raise ConfigError("[objective] logistic objective needs a dataset path")
        path = Path(objective.dataset)
        if base_dir is not None and not path.is_absolute():
            objective = replace(objective, dataset=str((Path(base_dir) / path).resolve()))
        if not objective.l2 > 0:
            raise ConfigError("[objective] l2 must be > 0")
    else:
        if not objective.spectrum or any(s <= 0 for s in objective.spectrum):
            raise ConfigError("[objective] spectrum must be non-empty and strictly positive")
        if objective.optimum is not None and len(objective.optimum) != len(objective.spectrum):
            raise ConfigError("[objective] optimum and spectrum lengths differ")

    cfg = _build(
        RunConfig, "run", run,
        protocol=protocol,
        h=_build(Hyperparams, "hyperparams", secs.get("hyperparams", {})),
        objective=objective,
        init=_build(InitSpec, "init", secs.get("init", {})),
        noise=_build(NoiseModel, "noise", secs.get("noise", {})),
        clock=_build(ClockModel, "clock", secs.get("clock", {})),
        straggler=_build(StragglerModel, "straggler", secs.get("straggler", {})),
        transport=_build(TransportSpec, "transport", secs.get("transport", {})),
        bounds=_build(BoundsSpec, "bounds", secs.get("bounds", {})),
    )
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    if cfg.backend not in ("sim", "transport"):
        raise ConfigError(f"[run] unknown backend {cfg.backend!r}")
    if cfg.trials < 1:
        raise ConfigError("[run] trials must be >= 1")
    if cfg.horizon < 1:
        raise ConfigError("[run] horizon must be >= 1")
    if cfg.trace_every < 1:
        raise ConfigError("[run] trace_every must be >= 1")
    if cfg.workers < 1:
        raise ConfigError("[run] workers must be >= 1")
    if cfg.max_sim_time is not None and not cfg.max_sim_time > 0:
        raise ConfigError("[run] max_sim_time must be positive")
    if not cfg.run_id or any(c in cfg.run_id for c in "/\\"):
        raise ConfigError("[run] run_id must be a non-empty name without path separators")
    bad = [e for e in cfg.emit if e not in EMIT_KINDS]
    if bad:
        raise ConfigError(f"[run] unknown emit kind(s) {bad}; choose from {list(EMIT_KINDS)}")
    if cfg.backend == "transport":
        if cfg.protocol not in TRANSPORT_PROTOCOLS:
            raise ConfigError(f"transport backend does not run {cfg.protocol.value}")
        if cfg.clock.kind != "lockstep":
            raise ConfigError("transport backend needs clock.kind = lockstep")
        if cfg.transport.timeout_ms <= 0 or cfg.transport.jitter < 0:
            raise ConfigError("[transport] timeout_ms must be > 0 and jitter >= 0")
    elif cfg.clock.kind == "poisson" and cfg.protocol not in ASYNC_PROTOCOLS:
        raise ConfigError(f"{cfg.protocol.value} has no poisson-clock implementation")
    elif cfg.clock.kind == "lockstep" and cfg.protocol not in SYNC_PROTOCOLS:
        raise ConfigError(f"{cfg.protocol.value} needs clock.kind = poisson")
    if not 0 <= cfg.straggler.slow_node < cfg.h.p:
        raise ConfigError("[straggler] slow_node out of range")
    if cfg.bounds.lambda_variant not in ("theorem", "diagonalization"):
        raise ConfigError(f"[bounds] unknown lambda_variant {cfg.bounds.lambda_variant!r}")
    if cfg.bounds.c_factor < 1 or cfg.bounds.min_trials < 1:
        raise ConfigError("[bounds] need c_factor >= 1 and min_trials >= 1")
    if cfg.init.init_sq_err is not None and cfg.init.init_sq_err < 0:
        raise ConfigError("[init] init_sq_err must be >= 0")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, base_dir=path.parent)


# ---------------------------------------------------------------- echo


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, ProtocolKind):
        return v.value
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def to_text(cfg: RunConfig) -> str:
    blocks = {
        "run": {k: getattr(cfg, k) for k in _SECTIONS["run"]},
        "hyperparams": {k: getattr(cfg.h, k) for k in _SECTIONS["hyperparams"]},
        "objective": {k: getattr(cfg.objective, k) for k in _SECTIONS["objective"]},
        "init": {k: getattr(cfg.init, k) for k in _SECTIONS["init"]},
        "noise": {k: getattr(cfg.noise, k) for k in _SECTIONS["noise"]},
        "clock": {k: getattr(cfg.clock, k) for k in _SECTIONS["clock"]},
        "straggler": {k: getattr(cfg.straggler, k) for k in _SECTIONS["straggler"]},
        "transport": {k: getattr(cfg.transport, k) for k in _SECTIONS["transport"]},
        "bounds": {k: getattr(cfg.bounds, k) for k in _SECTIONS["bounds"]},
    }
    lines = []
    for sec, vals in blocks.items():
        lines.append(f"[{sec}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in vals.items())
        lines.append("")
    return "\n".join(lines)
