"""Experiment configuration: typed sections, strict parsing, seed derivation.

A config file is JSON with the sections below; every key is optional and any
unknown key is rejected with its dotted path. ``serialize(parse(d))`` is a
fixpoint of ``parse``.

Per-module seeds: a section seed left as ``null`` resolves to
``derive_seed(master_seed, section_name)``, the first eight bytes of
``sha256(f"{master_seed}:{section_name}")`` reduced mod 2**32.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .poison import FAMILIES

OUTPUT_ENV = "VITBACKDOOR_OUT"
DEFAULT_OUTPUT = "runs"
SOURCES = ("synthetic", "idx", "cifar", "manifest")
MODEL_KINDS = ("vit", "cnn")


def derive_seed(master_seed: int, module: str) -> int:
    digest = hashlib.sha256(f"{int(master_seed)}:{module}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % 2 ** 32


@dataclass
class DatasetSection:
    source: str = "synthetic"
    paths: dict = field(default_factory=dict)
    num_classes: int = 4
    per_class: int = 1000
    image_size: int = 16
    noise: float = 0.05
    splits: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    seed: int | None = None

    def validate(self, at: str):
        if self.source not in SOURCES:
            raise ConfigurationError(f"{at}.source: expected one of {SOURCES}, got {self.source!r}")
        need = {"idx": ("images", "labels"), "cifar": ("files",), "manifest": ("manifest",)}.get(self.source, ())
        for key in need:
            if key not in self.paths:
                raise ConfigurationError(f"{at}.paths.{key}: required for source {self.source!r}")
        if len(self.splits) != 3 or any(f < 0 for f in self.splits) or abs(sum(self.splits) - 1) > 1e-9:
            raise ConfigurationError(f"{at}.splits: need three non-negative fractions summing to 1")
        if self.num_classes < 2 or self.per_class < 1:
            raise ConfigurationError(f"{at}: num_classes >= 2 and per_class >= 1 required")


@dataclass
class AttackSection:
    family: str = "patch"
    target_label: int = 0
    rate: float = 0.05
    params: dict = field(default_factory=dict)
    seed: int | None = None

    def validate(self, at: str):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"{at}.family: expected one of {FAMILIES}, got {self.family!r}")
        if not 0 < self.rate <= 0.1:
            raise ConfigurationError(f"{at}.rate: must lie in (0, 0.1], got {self.rate}")
        if self.target_label < 0:
            raise ConfigurationError(f"{at}.target_label: must be >= 0")


@dataclass
class ModelSection:
    kind: str = "vit"
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    channels: list = field(default_factory=lambda: [32, 64, 128])
    kernel_size: int = 3
    seed: int | None = None

    def validate(self, at: str):
        if self.kind not in MODEL_KINDS:
            raise ConfigurationError(f"{at}.kind: expected one of {MODEL_KINDS}, got {self.kind!r}")


@dataclass
class TrainingSection:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "cosine"
    warmup_epochs: int = 1
    seed: int | None = None

    def validate(self, at: str):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigurationError(f"{at}: epochs >= 0, batch_size >= 1 and lr > 0 required")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"{at}.schedule: expected 'cosine' or 'constant'")


@dataclass
class DropSection:
    grid: int = 8
    drop_count: int = 3
    fill: float = 0.0

    def validate(self, at: str):
        if self.grid < 1 or not 0 <= self.drop_count <= self.grid ** 2:
            raise ConfigurationError(f"{at}: need grid >= 1 and 0 <= drop_count <= grid**2")


@dataclass
class ShuffleSection:
    grid: int = 2

    def validate(self, at: str):
        if self.grid < 1:
            raise ConfigurationError(f"{at}.grid: must be >= 1")


@dataclass
class ScenarioTwoSection:
    trials: int = 2
    bootstrap_epochs: int = 10
    retrain_epochs: int | None = None
    profile: str = "no-clean"

    def validate(self, at: str):
        if self.trials < 1 or self.bootstrap_epochs < 0:
            raise ConfigurationError(f"{at}: trials >= 1 and bootstrap_epochs >= 0 required")
        if self.profile not in ("no-clean", "calibrated"):
            raise ConfigurationError(f"{at}.profile: expected 'no-clean' or 'calibrated'")


@dataclass
class DefenseSection:
    trials: int = 32
    drop: DropSection = field(default_factory=DropSection)
    shuffle: ShuffleSection = field(default_factory=ShuffleSection)
    n_d: float = 90.0
    n_s: float = 10.0
    calibration_size: int = 400
    early_exit: bool = False
    filter: ScenarioTwoSection = field(default_factory=ScenarioTwoSection)
    seed: int | None = None

    def validate(self, at: str):
        if self.trials < 1:
            raise ConfigurationError(f"{at}.trials: must be >= 1")
        for name in ("n_d", "n_s"):
            if not 0 <= getattr(self, name) <= 100:
                raise ConfigurationError(f"{at}.{name}: must lie in [0, 100]")
        if self.calibration_size < 1:
            raise ConfigurationError(f"{at}.calibration_size: must be >= 1")


@dataclass
class SweepSection:
    drop_grid: int = 8
    m_values: list = field(default_factory=lambda: [0, 3, 6, 13, 26])
    shuffle_grids: list = field(default_factory=lambda: [1, 2, 4, 8])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    trials: int = 1
    max_samples: int = 400

    def validate(self, at: str):
        if self.trials < 1 or not self.seeds:
            raise ConfigurationError(f"{at}: trials >= 1 and at least one seed required")


@dataclass
class OutputSection:
    dir: str | None = None
    report_format: str = "csv"

    def validate(self, at: str):
        if self.report_format not in ("csv", "json"):
            raise ConfigurationError(f"{at}.report_format: expected 'csv' or 'json'")


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetSection = field(default_factory=DatasetSection)
    attack: AttackSection | None = field(default_factory=AttackSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    defense: DefenseSection = field(default_factory=DefenseSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    output: OutputSection = field(default_factory=OutputSection)

    def section_seed(self, name: str) -> int:
        section = getattr(self, name)
        if section is not None and getattr(section, "seed", None) is not None:
            return int(section.seed)
        return derive_seed(self.seed, name)

    def output_dir(self, override=None) -> Path:
        return Path(override or self.output.dir or os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


_NESTED = {
    (ExperimentConfig, "dataset"): DatasetSection,
    (ExperimentConfig, "attack"): AttackSection,
    (ExperimentConfig, "model"): ModelSection,
    (ExperimentConfig, "training"): TrainingSection,
    (ExperimentConfig, "defense"): DefenseSection,
    (ExperimentConfig, "sweep"): SweepSection,
    (ExperimentConfig, "output"): OutputSection,
    (DefenseSection, "drop"): DropSection,
    (DefenseSection, "shuffle"): ShuffleSection,
    (DefenseSection, "filter"): ScenarioTwoSection,
}
_NULLABLE_SECTIONS = {(ExperimentConfig, "attack")}


def _coerce(value, default, annotation: str, at: str):
    """Check a scalar/list against the type of its default (ints accepted for floats)."""
    if value is None:
        if default is not None:
            raise ConfigurationError(f"{at}: may not be null")
        return value
    if default is None:
        default = {"int | None": 0, "str | None": ""}.get(annotation)
        if default is None:
            return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{at}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{at}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{at}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigurationError(f"{at}: expected a string, got {value!r}")
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigurationError(f"{at}: expected a list, got {value!r}")
        return list(value)
    if isinstance(default, dict) and not isinstance(value, dict):
        raise ConfigurationError(f"{at}: expected a mapping, got {value!r}")
    return value


def _build(cls, data, at: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{at or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        where = ", ".join(f"{at}.{k}" if at else k for k in unknown)
        raise ConfigurationError(f"unknown config key(s): {where}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        path = f"{at}.{name}" if at else name
        sub = _NESTED.get((cls, name))
        if sub is not None:
            if value is None and (cls, name) in _NULLABLE_SECTIONS:
                kwargs[name] = None
            else:
                kwargs[name] = _build(sub, value, path)
        else:
            kwargs[name] = _coerce(value, getattr(defaults, name), str(known[name].type), path)
    obj = cls(**kwargs)
    if hasattr(obj, "validate"):
        obj.validate(at)
    return obj


def parse_config(data: dict) -> ExperimentConfig:
    """Build and validate a config from a plain mapping."""
    cfg = _build(ExperimentConfig, data, "")
    if cfg.attack is not None and cfg.attack.target_label >= cfg.dataset.num_classes:
        raise ConfigurationError(f"attack.target_label: {cfg.attack.target_label} not below dataset.num_classes")
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    return parse_config(data)


def serialize(cfg: ExperimentConfig) -> dict:
    return cfg.to_dict()
