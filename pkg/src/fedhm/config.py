"""Experiment configuration: YAML with one section per concern.

Unknown keys and out-of-range values are rejected before any work starts;
every error names the offending field (``optim.lr``, ``federation.clients``...).
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

METHODS = ("fedhm", "fedavg", "widthslim-fedavg", "heterofl-channel")
MODELS = ("tiny_cnn", "resnet18", "resnet34", "mlp")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class ModelSection:
    name: str = "tiny_cnn"
    spec_file: str | None = None
    input_shape: list | None = None
    widths: list = field(default_factory=lambda: [16, 32, 32])
    hidden: int = 64


@dataclass
class DatasetSection:
    kind: str = "synthetic"
    classes: int = 4
    shape: list = field(default_factory=lambda: [1, 8, 8])
    per_class: int = 100
    test_per_class: int = 50
    noise: float = 0.3
    normalize: bool = True
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_csv: str | None = None
    test_csv: str | None = None


@dataclass
class FederationSection:
    clients: int = 20
    fraction: float = 0.5
    rounds: int = 160
    local_epochs: int = 10
    batch_size: int = 64


@dataclass
class OptimSection:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    frobenius_decay: float = 1e-4


@dataclass
class HeteroSection:
    rank_ratios: list = field(default_factory=lambda: [0.5, 0.25, 0.125, 0.083])
    width_ratios: list = field(default_factory=lambda: [1.0, 0.62, 0.5, 0.35])
    slim_ratio: float = 0.5
    rho: int | None = None
    factorize_stages: list | None = None
    factorize_stem: bool = False
    factorize_classifier: bool = False
    tau: float | None = None
    schedule: str = "fixed"
    assignment: list | None = None


@dataclass
class PartitionSection:
    scheme: str = "iid"
    alpha: float = 0.5


@dataclass
class SeedSection:
    init: int = 0
    sample: int = 0
    data: int = 0


@dataclass
class OutputSection:
    dir: str = "runs/out"
    format: str = "csv"


@dataclass
class ExperimentConfig:
    method: str = "fedhm"
    dtype: str = "float32"
    timing: bool = False
    model: ModelSection = field(default_factory=ModelSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    federation: FederationSection = field(default_factory=FederationSection)
    optim: OptimSection = field(default_factory=OptimSection)
    hetero: HeteroSection = field(default_factory=HeteroSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    seeds: SeedSection = field(default_factory=SeedSection)
    output: OutputSection = field(default_factory=OutputSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(name, value, default, annotation):
    ann = str(annotation)
    if value is None:
        if "None" in ann:
            return None
        raise ConfigError(name, "may not be null")
    if ann.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(name, f"expected true/false, got {value!r}")
        return value
    if ann.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"expected an integer, got {value!r}")
        return value
    if ann.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        return float(value)
    if ann.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(name, f"expected a string, got {value!r}")
        return value
    if ann.startswith("list"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(name, f"expected a list, got {value!r}")
        return list(value)
    return value


def _build_section(cls, raw, prefix):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(prefix, "expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{prefix}.{key}", "unknown key")
    inst = cls()
    for key, value in raw.items():
        f = known[key]
        setattr(inst, key, _coerce(f"{prefix}.{key}", value, getattr(inst, key), f.type))
    return inst


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key not in _SECTIONS:
            raise ConfigError(key, "unknown key")
        default = getattr(cfg, key)
        if dataclasses.is_dataclass(default):
            setattr(cfg, key, _build_section(type(default), value, key))
        else:
            setattr(cfg, key, _coerce(key, value, default, _SECTIONS[key]))
    resolve_defaults(cfg)
    validate(cfg)
    return cfg


def resolve_defaults(cfg: ExperimentConfig) -> None:
    h = cfg.hetero
    if h.tau is None:
        h.tau = math.inf if h.schedule == "fixed" else 5.0


def _require(cond, name, msg):
    if not cond:
        raise ConfigError(name, msg)


def validate(cfg: ExperimentConfig) -> None:
    _require(cfg.method in METHODS, "method", f"must be one of {METHODS}")
    _require(cfg.dtype in ("float32", "float64"), "dtype", "must be float32 or float64")
    m = cfg.model
    _require(m.spec_file is not None or m.name in MODELS, "model.name", f"must be one of {MODELS}")
    if m.input_shape is not None:
        _require(all(isinstance(v, int) and v > 0 for v in m.input_shape), "model.input_shape", "positive integers")
    _require(all(isinstance(v, int) and v > 0 for v in m.widths), "model.widths", "positive integers")
    _require(m.hidden > 0, "model.hidden", "must be > 0")
    d = cfg.dataset
    _require(d.kind in ("synthetic", "idx", "csv"), "dataset.kind", "must be synthetic, idx or csv")
    _require(d.classes >= 2, "dataset.classes", "must be >= 2")
    _require(d.per_class >= 1, "dataset.per_class", "must be >= 1")
    _require(d.test_per_class >= 1, "dataset.test_per_class", "must be >= 1")
    _require(d.noise >= 0, "dataset.noise", "must be >= 0")
    _require(all(isinstance(v, int) and v > 0 for v in d.shape), "dataset.shape", "positive integers")
    if d.kind == "idx":
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            _require(getattr(d, k), f"dataset.{k}", "required for idx datasets")
    if d.kind == "csv":
        for k in ("train_csv", "test_csv"):
            _require(getattr(d, k), f"dataset.{k}", "required for csv datasets")
    f = cfg.federation
    _require(f.clients >= 1, "federation.clients", "must be >= 1")
    _require(0 < f.fraction <= 1, "federation.fraction", "must be in (0, 1]")
    _require(f.rounds >= 0, "federation.rounds", "must be >= 0")
    _require(f.local_epochs >= 1, "federation.local_epochs", "must be >= 1")
    _require(f.batch_size >= 1, "federation.batch_size", "must be >= 1")
    o = cfg.optim
    _require(o.lr > 0, "optim.lr", "learning rate must be > 0")
    _require(0 <= o.momentum < 1, "optim.momentum", "must be in [0, 1)")
    _require(o.weight_decay >= 0, "optim.weight_decay", "must be >= 0")
    _require(o.frobenius_decay >= 0, "optim.frobenius_decay", "must be >= 0")
    h = cfg.hetero
    _require(len(h.rank_ratios) >= 1 and all(isinstance(r, (int, float)) and 0 < r <= 1 for r in h.rank_ratios),
             "hetero.rank_ratios", "non-empty list of values in (0, 1]")
    _require(len(h.width_ratios) >= 1 and all(isinstance(r, (int, float)) and 0 < r <= 1 for r in h.width_ratios),
             "hetero.width_ratios", "non-empty list of values in (0, 1]")
    h.rank_ratios = [float(r) for r in h.rank_ratios]
    h.width_ratios = [float(r) for r in h.width_ratios]
    _require(0 < h.slim_ratio <= 1, "hetero.slim_ratio", "must be in (0, 1]")
    _require(h.rho is None or h.rho >= 0, "hetero.rho", "must be >= 0")
    _require(h.rho is None or h.factorize_stages is None, "hetero.factorize_stages", "give either rho or factorize_stages")
    _require(h.tau > 0, "hetero.tau", "must be > 0")
    _require(h.schedule in ("fixed", "dynamic"), "hetero.schedule", "must be fixed or dynamic")
    if h.assignment is not None:
        _require(len(h.assignment) == f.clients, "hetero.assignment", f"needs one level per client ({f.clients})")
    p = cfg.partition
    _require(p.scheme in ("iid", "dirichlet"), "partition.scheme", "must be iid or dirichlet")
    _require(p.alpha > 0, "partition.alpha", "must be > 0")
    _require(cfg.output.format in ("csv", "jsonl"), "output.format", "must be csv or jsonl")


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("<file>", f"{path} does not exist")
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return from_dict(raw)


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
