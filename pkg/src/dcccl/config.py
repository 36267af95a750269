"""Experiment configuration: YAML parsing, defaults, validation and matrix expansion.

A config file is a YAML mapping with the sections ``data``, ``model`` and
``training`` plus the top-level keys ``name``, ``method`` and ``seed``. An
optional ``matrix`` mapping from dotted keys to value lists expands one file
into the cartesian product of runs, iterated in the order the keys appear.
"""

from __future__ import annotations

import copy
import itertools
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

from .model import SplitConfig, SplitError, as_fraction
from .training import PhaseHyperparams

METHODS = ("DC-CCL", "Central-B", "Cloud-B", "Central-D", "Distr-D", "Distr-S", "Incr-S",
           "DC-CCL-no-control", "DC-CCL-no-finetune")
COLLABORATIVE = ("DC-CCL", "Distr-D", "Distr-S", "DC-CCL-no-control", "DC-CCL-no-finetune")


class ConfigError(ValueError):
    pass


class MissingFieldError(ConfigError):
    pass


class UnknownKeyError(ConfigError):
    pass


class ConstraintError(ConfigError):
    pass


class UnknownMethodError(ConfigError):
    pass


@dataclass
class DataConfig:
    num_classes: int = 10
    samples_per_class: int = 100
    test_per_class: int = 50
    image_size: int = 12
    channels: int = 1
    noise_std: float = 0.6
    max_shift: Optional[int] = None
    num_device_classes: int = 2
    device_classes: Optional[list] = None  # overrides num_device_classes; default is the last k classes
    augment_fraction: float = 0.1
    train_path: Optional[str] = None  # dataset files replace the synthetic generator when given
    test_path: Optional[str] = None

    def resolved_device_classes(self) -> list:
        if self.device_classes is not None:
            return sorted(int(c) for c in self.device_classes)
        return list(range(self.num_classes - self.num_device_classes, self.num_classes))


@dataclass
class ModelConfig:
    base: Any = "desk"  # preset name, or a mapping {preset: ..., ...kwargs} / {layers: [...]}
    alpha_cl: str = "7/8"
    alpha_co: str = "1/8"
    shared_prefix_len: int = 1
    heterogeneous: bool = False
    cloud: Any = None  # heterogeneous mode: cloud backbone (same forms as ``base``)
    co: Any = None  # heterogeneous mode: co/control backbone
    cloud_checkpoint: Optional[str] = None  # pre-trained cloud submodel; skips phase 1

    def split(self) -> SplitConfig:
        return SplitConfig(as_fraction(self.alpha_cl), as_fraction(self.alpha_co),
                           0 if self.heterogeneous else self.shared_prefix_len, self.heterogeneous)


def _hp(lr, epochs, optimizer="sgd"):
    return lambda: {"learning_rate": lr, "epochs": epochs, "batch_size": 32, "optimizer": optimizer}


@dataclass
class TrainingConfig:
    cloud: dict = field(default_factory=_hp(0.03, 10))
    distill: dict = field(default_factory=_hp(0.01, 20, "adam"))
    co: dict = field(default_factory=_hp(0.05, 1))
    classifier: dict = field(default_factory=_hp(0.1, 30))
    rounds: int = 10
    cloud_epochs_per_round: int = 1
    device_epochs_per_round: int = 4
    finetune_on: str = "cloud"  # or "device"
    central_epochs: Optional[int] = None  # Central-D stage two; default: rounds * cloud_epochs_per_round
    baseline_epochs: Optional[int] = None  # default: cloud epochs + stage-two epochs

    def phase(self, name: str) -> PhaseHyperparams:
        return PhaseHyperparams(**getattr(self, name))

    @property
    def budget_epochs(self) -> int:
        if self.baseline_epochs is not None:
            return self.baseline_epochs
        return self.phase("cloud").epochs + self.stage_two_epochs

    @property
    def stage_two_epochs(self) -> int:
        """Centralized co-submodel epochs: the cloud-side epochs of all rounds unless set explicitly."""
        if self.central_epochs is not None:
            return self.central_epochs
        return self.rounds * self.cloud_epochs_per_round


@dataclass
class ExperimentConfig:
    method: str
    name: str = "experiment"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    labels: dict = field(default_factory=dict)  # matrix coordinates of this run

    @property
    def collaborative(self) -> bool:
        return self.method in COLLABORATIVE

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("labels")
        return d

    def run_id(self, index: int) -> str:
        tag = "_".join(f"{k.split('.')[-1]}={_fmt(v)}" for k, v in self.labels.items())
        return f"{index:03d}_{self.name}" + (f"_{tag}" if tag else "")


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return "-".join(str(x) for x in v)
    return str(v).replace("/", "over")


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "training": TrainingConfig}
_HP_KEYS = {f.name for f in fields(PhaseHyperparams)}


def _build_section(cls, raw: Any, where: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UnknownKeyError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    obj = cls()
    for k, v in raw.items():
        if cls is TrainingConfig and k in ("cloud", "distill", "co", "classifier"):
            if not isinstance(v, dict):
                raise ConfigError(f"{where}.{k} must be a mapping")
            bad = sorted(set(v) - _HP_KEYS)
            if bad:
                raise UnknownKeyError(f"unknown key(s) in {where}.{k}: {', '.join(bad)}")
            merged = dict(getattr(obj, k))
            merged.update(v)
            v = merged
        setattr(obj, k, v)
    return obj


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    allowed = {"method", "name", "seed", "data", "model", "training"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise UnknownKeyError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "method" not in raw:
        raise MissingFieldError("missing required field 'method'")
    cfg = ExperimentConfig(
        method=raw["method"], name=raw.get("name", "experiment"), seed=raw.get("seed", 0),
        **{k: _build_section(c, raw.get(k), k) for k, c in _SECTIONS.items()})
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    if cfg.method not in METHODS:
        raise UnknownMethodError(f"unknown method {cfg.method!r}; expected one of {', '.join(METHODS)}")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConstraintError("seed must be a non-negative integer")
    d, m, t = cfg.data, cfg.model, cfg.training
    if d.num_classes < 2:
        raise ConstraintError("data.num_classes must be >= 2")
    dev = d.resolved_device_classes()
    if not dev or len(set(dev)) >= d.num_classes or min(dev) < 0 or max(dev) >= d.num_classes:
        raise ConstraintError("device classes must be a proper non-empty subset of the classes")
    if not 0 <= d.augment_fraction <= 0.1:
        raise ConstraintError("data.augment_fraction must lie in [0, 0.1]")
    if (d.train_path is None) != (d.test_path is None):
        raise MissingFieldError("data.train_path and data.test_path must be given together")
    try:
        m.split()
    except (SplitError, ValueError, ZeroDivisionError) as e:
        raise ConstraintError(str(e)) from e
    if m.heterogeneous:
        for k in ("cloud", "co"):
            if getattr(m, k) is None:
                raise MissingFieldError(f"heterogeneous mode requires model.{k}")
    for name in ("cloud", "distill", "co", "classifier"):
        try:
            t.phase(name)
        except (TypeError, ValueError) as e:
            raise ConstraintError(f"training.{name}: {e}") from e
    if cfg.collaborative and (not isinstance(t.rounds, int) or t.rounds < 0):
        raise ConstraintError("training.rounds must be a non-negative integer for collaborative methods")
    if t.cloud_epochs_per_round < 0 or t.device_epochs_per_round < 0:
        raise ConstraintError("per-round epochs must be non-negative")
    for name in ("central_epochs", "baseline_epochs"):
        v = getattr(t, name)
        if v is not None and (not isinstance(v, int) or v < 0):
            raise ConstraintError(f"training.{name} must be a non-negative integer")
    if t.finetune_on not in ("cloud", "device"):
        raise ConstraintError("training.finetune_on must be 'cloud' or 'device'")


def _set_dotted(raw: dict, key: str, value) -> None:
    parts = key.split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"matrix key {key!r} does not address a mapping")
    node[parts[-1]] = value


def expand(raw: dict, seed_override: Optional[int] = None) -> list[ExperimentConfig]:
    """Expand the ``matrix`` section into concrete configs (deterministic order)."""
    raw = copy.deepcopy(raw)
    matrix = raw.pop("matrix", None) or {}
    if not isinstance(matrix, dict):
        raise ConfigError("matrix must be a mapping of key -> list of values")
    if seed_override is not None:
        matrix.pop("seed", None)
        raw["seed"] = seed_override
    keys = list(matrix)
    for k in keys:
        if not isinstance(matrix[k], list) or not matrix[k]:
            raise ConfigError(f"matrix.{k} must be a non-empty list")
    configs = []
    for combo in itertools.product(*(matrix[k] for k in keys)):
        r = copy.deepcopy(raw)
        for k, v in zip(keys, combo):
            _set_dotted(r, k, v)
        cfg = from_dict(r)
        cfg.labels = dict(zip(keys, combo))
        configs.append(cfg)
    return configs


def preset_path(name: str) -> Path:
    return Path(str(resources.files("dcccl") / "presets" / f"{name}.yaml"))


def parse_config(path, seed_override: Optional[int] = None) -> list[ExperimentConfig]:
    """Load a YAML config (or a bundled preset by name) into validated configs."""
    p = Path(path)
    if not p.exists() and preset_path(str(path)).exists():
        p = preset_path(str(path))
    if not p.exists():
        raise FileNotFoundError(f"config {path} not found")
    raw = yaml.safe_load(p.read_text())
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return expand(raw, seed_override)


def dump_resolved(configs: list[ExperimentConfig]) -> str:
    """YAML echo of every fully-defaulted config, for provenance."""
    docs = [{"run": i, "labels": c.labels, **c.to_dict()} for i, c in enumerate(configs)]
    return yaml.safe_dump(docs, sort_keys=False)
