"""
Configuration management for blockroll-fl experiments.
Reads YAML experiment profiles, .env defaults and CLI overrides.

Priority:
1. CLI flags (passed in as `section.key` overrides)
2. YAML experiment file
3. os.getenv (environment variables / config/.env)
4. dataclass defaults
"""
import os
import typing
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

import yaml
from dotenv import load_dotenv

# Load environment variables
CONFIG_DIR = Path(__file__).parent.absolute()
PROJECT_ROOT = CONFIG_DIR.parent
load_dotenv(CONFIG_DIR / ".env")

SMALLEST = "smallest"


class ConfigError(ValueError):
    """Bad config file, key or value; the message names the offending key."""


def _get_config_value(key: str, default: Any = None) -> Any:
    """Environment lookup, called lazily so tests can monkeypatch the env."""
    return os.getenv(key, default)


def get_default_out_dir() -> str:
    return _get_config_value("BLOCKROLL_OUT_DIR", "results")


def get_default_log_level() -> str:
    return _get_config_value("BLOCKROLL_LOG_LEVEL", "INFO")


def get_mnist_dir() -> Optional[str]:
    return _get_config_value("BLOCKROLL_MNIST_DIR")


# -------------- Sections ----------------
@dataclass
class ExperimentSection:
    name: str = "blockroll"
    seeds: List[int] = field(default_factory=lambda: [0])
    schemes: List[str] = field(default_factory=lambda: ["heterofl", "fedrolex", "fedbrb"])
    distributions: List[str] = field(default_factory=lambda: ["a0-e1"])
    setting: str = "dynamic"
    model: str = "cnn"  # cnn | mlp
    widths: List[int] = field(default_factory=lambda: [16, 32])
    eval_every: int = 1
    workers: int = 1


@dataclass
class DataSection:
    source: str = "mnist"  # mnist | synthetic
    mnist_dir: Optional[str] = None
    subset: Optional[int] = 8000
    test_size: Optional[int] = 2000
    subset_seed: int = 0
    splits: List[str] = field(default_factory=lambda: ["noniid-2"])
    mean: float = 0.1307
    std: float = 0.3081
    # synthetic source only
    classes: int = 10
    per_class: int = 200
    test_per_class: int = 50
    dim: int = 64
    image_shape: List[int] = field(default_factory=lambda: [1, 8, 8])
    separation: float = 6.0


@dataclass
class FederationSection:
    num_clients: int = 20
    selected_fraction: float = 0.2
    rounds: int = 100


@dataclass
class TrainSection:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 64
    local_epochs: int = 1
    decay_interval: int = 300
    decay_factor: float = 0.25


@dataclass
class AggregationSection:
    beta: float = 0.5
    sample_weighted: bool = False
    exclude_letters: List[str] = field(default_factory=list)  # a..e or "smallest"


@dataclass
class OutputSection:
    out_dir: Optional[str] = None
    log_level: Optional[str] = None


SECTIONS = {
    "experiment": ExperimentSection,
    "data": DataSection,
    "federation": FederationSection,
    "train": TrainSection,
    "aggregation": AggregationSection,
    "output": OutputSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    federation: FederationSection = field(default_factory=FederationSection)
    train: TrainSection = field(default_factory=TrainSection)
    aggregation: AggregationSection = field(default_factory=AggregationSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return asdict(self)

    def validate(self) -> None:
        e, d, f, t, a = self.experiment, self.data, self.federation, self.train, self.aggregation
        _require(len(e.seeds) > 0, "experiment.seeds", "must list at least one seed")
        _require(len(e.schemes) > 0, "experiment.schemes", "must list at least one scheme")
        _require(len(e.distributions) > 0, "experiment.distributions", "must list at least one distribution")
        for key, values in (("experiment.seeds", e.seeds), ("experiment.schemes", e.schemes),
                            ("experiment.distributions", e.distributions), ("data.splits", d.splits)):
            repeated = sorted({str(v) for v in values if values.count(v) > 1})
            _require(not repeated, key, f"repeated entries {repeated}; each grid cell needs a unique run_id")
        _require(e.setting in ("dynamic", "fixed"), "experiment.setting", f"must be dynamic or fixed, got {e.setting!r}")
        _require(e.model in ("cnn", "mlp"), "experiment.model", f"must be cnn or mlp, got {e.model!r}")
        _require(len(e.widths) == 2 or e.model == "mlp", "experiment.widths", "cnn needs exactly two widths")
        _require(e.eval_every >= 1, "experiment.eval_every", "must be >= 1")
        _require(e.workers >= 1, "experiment.workers", "must be >= 1")
        _require(d.source in ("mnist", "synthetic"), "data.source", f"must be mnist or synthetic, got {d.source!r}")
        _require(len(d.splits) > 0, "data.splits", "must list at least one split")
        _require(d.subset is None or d.subset >= 1, "data.subset", "must be >= 1")
        _require(d.test_size is None or d.test_size >= 1, "data.test_size", "must be >= 1")
        _require(d.std > 0, "data.std", "must be > 0")
        _require(len(d.image_shape) == 3, "data.image_shape", "must be [channels, height, width]")
        _require(f.num_clients >= 1, "federation.num_clients", "must be >= 1")
        _require(0 < f.selected_fraction <= 1, "federation.selected_fraction", "must be in (0, 1]")
        _require(f.rounds >= 0, "federation.rounds", "must be >= 0")
        _require(t.lr > 0, "train.lr", "must be > 0")
        _require(t.batch_size >= 1, "train.batch_size", "must be >= 1")
        _require(t.local_epochs >= 0, "train.local_epochs", "must be >= 0")
        _require(t.decay_interval >= 1, "train.decay_interval", "must be >= 1")
        _require(0 < t.decay_factor <= 1, "train.decay_factor", "must be in (0, 1]")
        _require(0 <= a.beta < 1, "aggregation.beta", "must be in [0, 1)")
        for letter in a.exclude_letters:
            _require(letter == SMALLEST or letter in "abcde" and len(letter) == 1,
                     "aggregation.exclude_letters", f"unknown size letter {letter!r}")

    def check_paths(self) -> None:
        """Referenced inputs must exist before a run starts."""
        if self.data.source != "mnist":
            return
        if not self.data.mnist_dir:
            raise ConfigError("data.mnist_dir: not set (and BLOCKROLL_MNIST_DIR is empty)")
        if not Path(self.data.mnist_dir).is_dir():
            raise ConfigError(f"data.mnist_dir: directory {self.data.mnist_dir} does not exist")


def _require(ok: bool, key: str, msg: str) -> None:
    if not ok:
        raise ConfigError(f"{key}: {msg}")


# -------------- Loading ----------------
def _coerce(key: str, value: Any, annotation: Any) -> Any:
    optional = typing.get_origin(annotation) is typing.Union and type(None) in typing.get_args(annotation)
    if optional:
        if value is None:
            return None
        annotation = next(a for a in typing.get_args(annotation) if a is not type(None))
    try:
        if typing.get_origin(annotation) in (list, List):
            (item,) = typing.get_args(annotation)
            items = value if isinstance(value, (list, tuple)) else [value]
            return [item(v) for v in items]
        if annotation is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if annotation is int and isinstance(value, float) and not value.is_integer():
            raise ValueError(value)
        return annotation(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot read {value!r} as {getattr(annotation, '__name__', annotation)}") from None


def _apply(cfg: ExperimentConfig, section: str, key: str, value: Any) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"{section}: unknown section; expected one of {', '.join(SECTIONS)}")
    target = getattr(cfg, section)
    hints = typing.get_type_hints(type(target))
    if key not in {f.name for f in fields(target)}:
        raise ConfigError(f"{section}.{key}: unknown key")
    setattr(target, key, _coerce(f"{section}.{key}", value, hints[key]))


def load_yaml_config(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping of sections")
    return raw


def load_experiment_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Defaults, then env fallbacks, then the YAML file, then `section.key` overrides."""
    cfg = ExperimentConfig()
    cfg.output.out_dir = get_default_out_dir()
    cfg.output.log_level = get_default_log_level()
    cfg.data.mnist_dir = get_mnist_dir()

    if path is not None:
        for section, values in load_yaml_config(path).items():
            if values is None:
                continue
            if not isinstance(values, dict):
                raise ConfigError(f"{section}: section must be a mapping")
            for key, value in values.items():
                if value is None and key in ("out_dir", "log_level", "mnist_dir"):
                    continue
                _apply(cfg, section, key, value)

    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ConfigError(f"{dotted}: override keys must be section.key")
        section, key = dotted.split(".", 1)
        _apply(cfg, section, key, value)

    cfg.validate()
    return cfg


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
