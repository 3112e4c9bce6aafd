"""Experiment configuration: a flat ``key = value`` text format.

Rules:

* one ``key = value`` pair per line; ``#`` starts a comment; blank lines ignored
* lists are comma separated (``teacher_depths = 14, 20``)
* booleans are ``true`` / ``false``
* unknown keys, duplicate keys and ill-typed values are errors reporting the line

Every key has a default (listed in :data:`FIELDS`), and the loaded config
always carries all of them so persisted manifests never rely on implicit
values.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .exceptions import ConfigError
from .losses import LossWeights
from .models import TEACHER_DEPTHS
from .training import TrainConfig

DATASETS = ("cifar10", "cifar100", "synthetic")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "ekd"
    dataset: str = "cifar10"
    data_root: str = "data"
    label_mode: str = "fine"
    data_fraction: float = 1.0
    student_depth: int = 8
    n_branches: int = 1
    teacher_depths: tuple = (14,)
    stage_widths: tuple = (16, 32, 64)
    epochs: int = 500
    pretrain_epochs: int = 500
    max_steps: int = 0
    pretrain_max_steps: int = 0
    base_lr: float = 0.01
    lr_drop_points: tuple = (0.5, 0.75)
    drop_factor: float = 10.0
    weight_decay: float = 0.0005
    batch_size: int = 128
    augment: bool = True
    init_std: float = 0.01
    alpha: float = 0.5
    beta: float = 0.5
    gamma: float = 0.6
    temperature: float = 10.0
    soften_student: bool = False
    freeze_teachers: bool = False
    teacher_objective: str = "ce"
    seeds: tuple = (1, 2, 3)
    compare_no_ekd: bool = True
    dump_features: bool = False
    eval_batch_size: int = 512
    synthetic_num_classes: int = 10
    synthetic_per_class: int = 100
    synthetic_test_per_class: int = 50
    synthetic_image_size: int = 32
    synthetic_separation: float = 5.0
    output_dir: str = "runs"

    def __post_init__(self):
        for f in fields(self):
            if f.type == "tuple":
                object.__setattr__(self, f.name, tuple(getattr(self, f.name)))
        self.validate()

    def validate(self):
        def check(ok, key, message):
            if not ok:
                raise ConfigError(message, key=key)

        check(self.dataset in DATASETS, "dataset",
              f"dataset must be one of {', '.join(DATASETS)}, got {self.dataset!r}")
        check(self.label_mode in ("fine", "coarse"), "label_mode", "label_mode must be 'fine' or 'coarse'")
        check(0 < self.data_fraction <= 1, "data_fraction", "data_fraction must lie in (0, 1]")
        check(self.n_branches >= 1, "n_branches", "n_branches must be >= 1")
        check(
            len(self.teacher_depths) == self.n_branches, "teacher_depths",
            f"teacher_depths lists {len(self.teacher_depths)} teachers but n_branches is "
            f"{self.n_branches}; each student branch pairs with one teacher",
        )
        for key, depths in (("student_depth", (self.student_depth,)), ("teacher_depths", self.teacher_depths)):
            for d in depths:
                check(d >= 8 and (d - 2) % 6 == 0, key, f"{key}: depth {d} is not of the form 6n+2")
        check(len(self.seeds) > 0, "seeds", "seeds must list at least one seed")
        check(self.epochs >= 1, "epochs", "epochs must be >= 1")
        check(self.pretrain_epochs >= 1, "pretrain_epochs", "pretrain_epochs must be >= 1")
        check(self.max_steps >= 0, "max_steps", "max_steps must be >= 0 (0 means unlimited)")
        check(self.pretrain_max_steps >= 0, "pretrain_max_steps",
              "pretrain_max_steps must be >= 0 (0 means unlimited)")
        check(self.batch_size >= 1, "batch_size", "batch_size must be >= 1")
        check(self.teacher_objective in ("ce", "full"), "teacher_objective",
              "teacher_objective must be 'ce' or 'full'")
        check(self.temperature > 0, "temperature", "temperature must be > 0")
        for key in ("alpha", "beta", "gamma"):
            check(getattr(self, key) >= 0, key, f"{key} must be >= 0")
        check(all(0 < p < 1 for p in self.lr_drop_points), "lr_drop_points",
              "lr_drop_points must lie strictly inside (0, 1)")

    @property
    def loss_weights(self):
        return LossWeights(self.alpha, self.beta, self.gamma, self.temperature, self.soften_student)

    def train_config(self, seed, pretrain=False) -> TrainConfig:
        return TrainConfig(
            epochs=self.pretrain_epochs if pretrain else self.epochs,
            base_lr=self.base_lr,
            lr_drop_points=self.lr_drop_points,
            drop_factor=self.drop_factor,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            seed=seed,
            augment=self.augment,
            init_std=self.init_std,
            loss_weights=self.loss_weights,
            freeze_teachers=self.freeze_teachers,
            teacher_objective=self.teacher_objective,
            max_steps=(self.pretrain_max_steps if pretrain else self.max_steps) or None,
        )

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def replace(self, **changes):
        return replace(self, **changes)

    def teacher_label(self):
        """Table-style teacher subset, e.g. ``T1-T3`` for the first three of the default list."""
        if tuple(self.teacher_depths) == TEACHER_DEPTHS[: len(self.teacher_depths)]:
            k = len(self.teacher_depths)
            return "T1" if k == 1 else f"T1-T{k}"
        return "+".join(f"ResNet{d}" for d in self.teacher_depths)


FIELDS = {f.name: f for f in fields(ExperimentConfig)}
# output location does not change what is computed
_UNHASHED = {"output_dir", "data_root"}


def config_hash(config: ExperimentConfig) -> str:
    """Stable hash of the canonicalized config (sorted keys, location fields excluded)."""
    d = {k: v for k, v in config.to_dict().items() if k not in _UNHASHED}
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _parse_scalar(kind, text, key, line):
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(text)
        return text
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot read {text!r} as {kind}", line) from None


def _list_kind(name):
    default = FIELDS[name].default
    return "float" if any(isinstance(v, float) for v in default) else "int"


def parse_config(text, source="<config>") -> ExperimentConfig:
    values, seen = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if key in seen:
            raise ConfigError(f"key {key!r} already set on line {seen[key]}", lineno)
        seen[key] = lineno
        kind = FIELDS[key].type
        if kind == "tuple":
            items = [v.strip() for v in value.split(",") if v.strip()]
            values[key] = tuple(_parse_scalar(_list_kind(key), v, key, lineno) for v in items)
        else:
            values[key] = _parse_scalar(kind, value, key, lineno)
    try:
        return ExperimentConfig(**values)
    except ConfigError as exc:
        # a violated default is reported against the line that set a related key
        line = seen.get(exc.key)
        if line is None and exc.key == "teacher_depths":
            line = seen.get("n_branches")
        raise ConfigError(str(exc), line, exc.key) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_config(config: ExperimentConfig) -> str:
    lines = []
    for k, v in config.to_dict().items():
        if isinstance(v, list):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
