"""Run configuration files: YAML sections, presets, overrides and content hashes."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import numpy as np
import yaml

from .evaluation import GridRequest
from .problems import ProblemSpec, _sum_terminal, _sum_terminal_grad, lqg_problem
from .trainer import TrainConfig


class ConfigError(ValueError):
    """A run configuration could not be parsed or validated."""


@dataclass
class ProblemConfig:
    kind: str = "LQG"
    n: int = 100
    T: float = 1.0
    mu: float = 1.0
    # PowerHJB only; A defaults to 1/n
    c: float = 1.5
    A: Optional[float] = None
    sigma: float = float(np.sqrt(2.0))
    phi: float = -2.0
    terminal: str = "sum"

    def build(self) -> ProblemSpec:
        if self.kind == "LQG":
            return lqg_problem(self.n, mu=self.mu, T=self.T)
        if self.kind != "PowerHJB":
            raise ConfigError(f"problem.kind: unknown kind {self.kind!r}")
        if self.terminal != "sum":
            raise ConfigError(f"problem.terminal: only 'sum' is supported, got {self.terminal!r}")
        A = 1.0 / self.n if self.A is None else float(self.A)
        phi = float(self.phi)
        linear = np.isclose(A, 1.0 / self.n) and np.isclose(self.sigma**2, 2.0) and phi == -2.0
        return ProblemSpec(
            "PowerHJB", n=self.n, T=self.T, sigma=self.sigma, A=np.full(self.n, A),
            c=np.full(self.n, float(self.c)),
            forcing_phi=lambda x, t: np.full(np.shape(t), phi),
            terminal_g=_sum_terminal, terminal_grad=_sum_terminal_grad,
            family="linear" if linear else None,
        )


@dataclass
class NetworkConfig:
    layers: int = 4  # weight layers, so layers - 1 hidden blocks
    width: int = 4096
    activation: str = "tanh"

    def dims(self, n: int) -> list:
        return [n + 1] + [self.width] * (self.layers - 1) + [1]


@dataclass
class EvalConfig:
    S: int = 10_000
    oracle_mc_samples: int = 10_000
    seed: int = 0
    grids: list = field(default_factory=list)  # list of GridRequest keyword dicts


@dataclass
class IoConfig:
    out_dir: Optional[str] = None
    checkpoint_every: int = 0  # 0 keeps only the final checkpoint


@dataclass
class RunConfig:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    io: IoConfig = field(default_factory=IoConfig)

    def to_dict(self) -> dict:
        out = {}
        for sec in SECTIONS:
            d = asdict(getattr(self, sec))
            if sec == "train":
                d = {_TRAIN_ALIASES_OUT.get(k, k): v for k, v in d.items()}
            out[sec] = d
        return out

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=False)

    def content_hash(self) -> str:
        """Git blob hash of the canonical serialization."""
        body = self.dumps().encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()


SECTIONS = {
    "problem": ProblemConfig,
    "network": NetworkConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "io": IoConfig,
}
_TRAIN_ALIASES_IN = {"lambda": "lam"}
_TRAIN_ALIASES_OUT = {v: k for k, v in _TRAIN_ALIASES_IN.items()}

_LQG_TABLE = dict(
    problem=dict(kind="LQG", n=100),
    network=dict(layers=4, width=4096, activation="tanh"),
    train=dict(M=5000, N1=100, N2=100, K=20, eta=0.05, lr0=7e-4, lr_schedule="linear_to_zero",
               adam_beta1=0.9, adam_beta2=0.999, adam_eps=1e-8),
)


def _hjb_preset(c):
    return dict(
        problem=dict(kind="PowerHJB", n=100, c=c),
        network=dict(layers=5, width=4096, activation="tanh"),
        train=dict(M=5000, N1=100, N2=100, K=5, eta=0.2),
    )


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for sec, vals in over.items():
        out.setdefault(sec, {}).update(vals)
    return out


PRESETS = {
    "lqg100": _LQG_TABLE,
    "lqg250": _merge(_LQG_TABLE, dict(problem=dict(n=250), train=dict(M=10000, N1=50, N2=50))),
    "hjb-c1.25": _hjb_preset(1.25),
    "hjb-c1.5": _hjb_preset(1.5),
    "hjb-c1.75": _hjb_preset(1.75),
    "lqg10-desk": _merge(_LQG_TABLE, dict(problem=dict(n=10), network=dict(width=256), train=dict(M=2000))),
}


def from_dict(doc: Any) -> RunConfig:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping of sections")
    for sec in doc:
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section {sec!r}; expected one of {', '.join(SECTIONS)}")
    built = {}
    for sec, cls in SECTIONS.items():
        vals = doc.get(sec) or {}
        if not isinstance(vals, dict):
            raise ConfigError(f"section {sec!r} must be a mapping")
        if sec == "train":
            vals = {_TRAIN_ALIASES_IN.get(k, k): v for k, v in vals.items()}
        known = {f.name for f in fields(cls)}
        for key in vals:
            if key not in known:
                shown = _TRAIN_ALIASES_OUT.get(key, key)
                raise ConfigError(f"unknown key {sec}.{shown}")
        try:
            built[sec] = cls(**vals)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"section {sec!r}: {exc}") from exc
    cfg = RunConfig(**built)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    p, net, ev = cfg.problem, cfg.network, cfg.eval
    if p.kind not in ("LQG", "PowerHJB"):
        raise ConfigError(f"problem.kind: unknown kind {p.kind!r}")
    if not isinstance(p.n, int) or p.n < 1:
        raise ConfigError("problem.n must be a positive integer")
    if net.activation != "tanh":
        raise ConfigError(f"network.activation: only tanh is supported, got {net.activation!r}")
    if net.layers < 1 or net.width < 1:
        raise ConfigError("network.layers and network.width must be >= 1")
    if ev.S < 1 or ev.oracle_mc_samples < 2:
        raise ConfigError("eval.S must be >= 1 and eval.oracle_mc_samples >= 2")
    for i, g in enumerate(ev.grids):
        try:
            GridRequest(**g)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"eval.grids[{i}]: {exc}") from exc
    if cfg.io.checkpoint_every < 0:
        raise ConfigError("io.checkpoint_every must be >= 0")
    try:
        p.build()
    except ValueError as exc:
        raise ConfigError(f"problem: {exc}") from exc


def loads(text: str) -> RunConfig:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"YAML parse error: {exc}") from exc
    return from_dict(doc)


def load(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return from_dict(PRESETS[name])


def apply_overrides(cfg: RunConfig, items) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    doc = cfg.to_dict()
    for item in items:
        key, sep, raw = item.partition("=")
        sec, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section {sec!r} in override {item!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: {exc}") from exc
        doc[sec][name] = value
    return from_dict(doc)
