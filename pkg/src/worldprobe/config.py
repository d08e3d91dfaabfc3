"""Experiment configuration: JSON in, fully defaulted dataclasses out."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .dynamics import DEFAULT_RANGES, TWO_BODY, SYSTEM_KINDS, target_dim
from .mechanics import ERASURE_CONCEPTS

EXPERIMENTS = ("baselines", "scan", "mechanics", "symreg", "bound")
TWO_BODY_TARGETS = ("force", "force_magnitude", "speed", "radius", "mass", "momentum",
                    "kinetic_energy", "potential_energy", "energy")
OSCILLATOR_TARGETS = ("momentum", "speed", "position", "force", "kinetic_energy", "potential_energy",
                      "energy", "mass")


class ConfigError(ValueError):
    pass


@dataclass
class SystemConfig:
    dt: float = 0.1
    steps: int = 48
    substeps: int = 100
    r_min_guard: float = 0.3


@dataclass
class DataConfig:
    ssl_trajectories: int = 2000
    probe_trajectories: int = 250
    ft_trajectories: int = 200
    ft_m2: float = 1.0
    ood_sets: int = 50
    ood_trajectories: int = 8
    ood_param: str = "m2"
    ood_range: list = field(default_factory=lambda: [2.5, 4.0])
    id_ranges: dict = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_RANGES[TWO_BODY].items()})


@dataclass
class ModelSection:
    window: int = 8
    width: int = 128
    n_blocks: int = 6


@dataclass
class TrainSection:
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 8
    schedule: str = "cosine"
    weight_decay: float = 1e-4


@dataclass
class ProbeSection:
    target: str = "force"
    block: str = "auto"
    alpha: float = 1.0
    validation_fraction: float = 0.2
    mlp_hidden: int = 254
    mlp_epochs: int = 200
    mlp_lr: float = 1e-3
    mlp_batch: int = 64
    scan_mlp: bool = True
    scan_mlp_epochs: int = 50


@dataclass
class FinetuneSection:
    target: str = "force"
    lr: float = 1e-3
    batch: int = 64
    epochs: int = 10
    schedule: str = "constant"
    weight_decay: float = 1e-4


@dataclass
class MechanicsSection:
    cka_samples: int = 2000
    erasure_fraction: float = 0.2
    concepts: list = field(default_factory=lambda: list(ERASURE_CONCEPTS))
    projection_samples: int = 2000


@dataclass
class SymregSection:
    population: int = 512
    generations: int = 60
    max_complexity: int = 25
    tournament: int = 5
    features: list = field(default_factory=lambda: ["r", "m1", "m2"])
    max_rows: int = 2000
    distill_finetuned: bool = True
    histogram_bins: int = 40


@dataclass
class BoundSection:
    system_kind: str = TWO_BODY
    dt_values: list = field(default_factory=lambda: [0.1, 0.2])
    targets: list = field(default_factory=lambda: ["momentum", "kinetic_energy"])
    ssl_trajectories: int = 500
    probe_trajectories: int = 100
    eval_trajectories: int = 100
    steps: int = 48
    window: int = 8
    width: int = 64
    n_blocks: int = 2
    epochs: int = 10
    lr: float = 1e-3
    batch: int = 64
    checkpoint_epochs: list = field(default_factory=lambda: list(range(1, 11)))
    block: str = "final"
    alpha: float = 1.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    deterministic: bool = True
    out: str = "runs/default"
    experiments: list = field(default_factory=lambda: list(EXPERIMENTS))
    system: SystemConfig = field(default_factory=SystemConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    probe: ProbeSection = field(default_factory=ProbeSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    mechanics: MechanicsSection = field(default_factory=MechanicsSection)
    symreg: SymregSection = field(default_factory=SymregSection)
    bound: BoundSection = field(default_factory=BoundSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def section_hash(self, *names: str) -> str:
        d = self.to_dict()
        return stable_hash({n: d[n] for n in names})

    @property
    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out")
        return stable_hash(d)


def stable_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path or 'config'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}.{name}" if path else name)
        else:
            kwargs[name] = _coerce(value, default, f"{path}.{name}" if path else name)
    return cls(**kwargs)


def _coerce(value, default, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
            raise ConfigError(f"{path} must be a finite number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{path} must be a list")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path} must be an object")
        return value
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(data)


def _positive(value, path):
    if value <= 0:
        raise ConfigError(f"{path} must be positive")


def validate(cfg: ExperimentConfig) -> None:
    """Check that every referenced name resolves and numeric knobs are sane."""
    if cfg.deterministic and not isinstance(cfg.seed, int):
        raise ConfigError("deterministic runs need a fixed integer seed")
    for e in cfg.experiments:
        if e not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {e!r}; choose from {EXPERIMENTS}")
    s = cfg.system
    _positive(s.dt, "system.dt")
    _positive(s.substeps, "system.substeps")
    _positive(s.r_min_guard, "system.r_min_guard")
    if s.steps < cfg.model.window + 2:
        raise ConfigError("system.steps must exceed model.window + 1")
    d = cfg.data
    for name in ("ssl_trajectories", "probe_trajectories", "ft_trajectories", "ood_sets", "ood_trajectories"):
        _positive(getattr(d, name), f"data.{name}")
    if d.ood_param not in d.id_ranges:
        raise ConfigError(f"data.ood_param {d.ood_param!r} is not a generator parameter")
    if len(d.ood_range) != 2 or not d.ood_range[0] < d.ood_range[1]:
        raise ConfigError("data.ood_range must be [lo, hi] with lo < hi")
    lo, hi = d.id_ranges[d.ood_param]
    if not (d.ood_range[0] > hi or d.ood_range[1] < lo):
        raise ConfigError("data.ood_range must be disjoint from the in-distribution range")
    for k, v in d.id_ranges.items():
        if k not in DEFAULT_RANGES[TWO_BODY]:
            raise ConfigError(f"unknown generator parameter {k!r}")
        if len(v) != 2 or v[0] > v[1]:
            raise ConfigError(f"data.id_ranges.{k} must be [lo, hi]")
    if not d.id_ranges["m2"][0] <= d.ft_m2 <= d.id_ranges["m2"][1]:
        raise ConfigError("data.ft_m2 must lie in the in-distribution m2 range")
    m = cfg.model
    for name in ("window", "width", "n_blocks"):
        _positive(getattr(m, name), f"model.{name}")
    for sec, name in ((cfg.train, "train"), (cfg.finetune, "finetune")):
        _positive(sec.lr, f"{name}.lr")
        _positive(sec.batch, f"{name}.batch")
        if sec.epochs < 0:
            raise ConfigError(f"{name}.epochs must be >= 0")
        if sec.schedule not in ("cosine", "constant"):
            raise ConfigError(f"{name}.schedule must be 'cosine' or 'constant'")
    p = cfg.probe
    latents = [f"blocks.{i}" for i in range(m.n_blocks)] + ["final"]
    if p.block != "auto" and p.block not in latents:
        raise ConfigError(f"probe.block {p.block!r} does not name a latent; have {latents} or 'auto'")
    for t in (p.target, cfg.finetune.target):
        if t not in TWO_BODY_TARGETS:
            raise ConfigError(f"unknown target {t!r}")
    if not 0.0 < p.validation_fraction < 1.0:
        raise ConfigError("probe.validation_fraction must be in (0, 1)")
    if p.alpha < 0:
        raise ConfigError("probe.alpha must be >= 0")
    for c in cfg.mechanics.concepts:
        if c not in TWO_BODY_TARGETS or target_dim(c, TWO_BODY) != 1:
            raise ConfigError(f"erasure concept {c!r} must be a scalar two-body target")
    if not 0.0 < cfg.mechanics.erasure_fraction <= 1.0:
        raise ConfigError("mechanics.erasure_fraction must be in (0, 1]")
    sr = cfg.symreg
    for name in ("population", "generations", "max_complexity", "tournament", "max_rows", "histogram_bins"):
        _positive(getattr(sr, name), f"symreg.{name}")
    for f_ in sr.features:
        if f_ not in ("r", "m1", "m2", "G"):
            raise ConfigError(f"unknown symbolic-regression feature {f_!r}")
    b = cfg.bound
    if b.system_kind not in SYSTEM_KINDS:
        raise ConfigError(f"bound.system_kind must be one of {SYSTEM_KINDS}")
    allowed = TWO_BODY_TARGETS if b.system_kind == TWO_BODY else OSCILLATOR_TARGETS
    for t in b.targets:
        if t not in allowed:
            raise ConfigError(f"bound target {t!r} is not defined for {b.system_kind}")
    if not b.dt_values or any(v <= 0 for v in b.dt_values):
        raise ConfigError("bound.dt_values must be positive")
    if len(b.checkpoint_epochs) < 1 or any(e < 0 or e > b.epochs for e in b.checkpoint_epochs):
        raise ConfigError("bound.checkpoint_epochs must lie in [0, bound.epochs]")
    if b.block not in [f"blocks.{i}" for i in range(b.n_blocks)] + ["final"]:
        raise ConfigError(f"bound.block {b.block!r} does not name a latent")
