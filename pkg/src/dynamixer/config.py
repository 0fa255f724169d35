"""Model, training and data configuration, presets, and the JSON config file.

A config file is one JSON object with the sections ``model``, ``train`` and
``data``. Unknown keys anywhere are rejected, and each error names the
offending key path (``model.stages[1].hidden``).
"""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from enum import Enum

from dynamixer.errors import ConfigError


class GenKind(str, Enum):
    """How a DynaMixer op obtains its token-mixing matrices."""

    DYNAMIC = "dynamic"
    DENSE_PER_TOKEN = "dense_per_token"
    STATIC_RANDOM = "static_random"

    @property
    def uses_softmax(self):
        return self is not GenKind.STATIC_RANDOM


@dataclass(frozen=True)
class StageConfig:
    patch_size: int
    hidden: int
    depth: int
    segments: int


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple[StageConfig, ...]
    image_size: int = 224
    in_chans: int = 3
    reduced_dim: int = 2
    mlp_ratio: int = 3
    stoch_depth_max: float = 0.1
    num_classes: int = 1000
    disable_row: bool = False
    disable_col: bool = False
    disable_channel: bool = False
    disable_reweight: bool = False
    share_row_col_op: bool = False
    gen_kind: GenKind = GenKind.DYNAMIC

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "gen_kind", GenKind(self.gen_kind))

    @property
    def grids(self):
        """Token-grid side length of each stage (grids are square)."""
        sides, side = [], self.image_size
        for stage in self.stages:
            side //= stage.patch_size
            sides.append(side)
        return sides

    @property
    def total_depth(self):
        return sum(s.depth for s in self.stages)

    @property
    def branches(self):
        """Enabled mixing branches in fusion order."""
        return tuple(
            name
            for name, off in (("row", self.disable_row), ("col", self.disable_col), ("channel", self.disable_channel))
            if not off
        )

    def drop_path_rates(self):
        """Per-layer stochastic-depth rate, linear from 0 to the max over all layers."""
        n = self.total_depth
        if n == 1:
            return [0.0]
        return [self.stoch_depth_max * i / (n - 1) for i in range(n)]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def validate(self):
        problems = []
        if not self.stages:
            problems.append("model.stages: at least one stage is required")
        for name in ("image_size", "in_chans", "reduced_dim", "mlp_ratio", "num_classes"):
            if getattr(self, name) < 1:
                problems.append(f"model.{name}: must be >= 1")
        if not 0.0 <= self.stoch_depth_max <= 1.0:
            problems.append("model.stoch_depth_max: must lie in [0, 1]")
        side = self.image_size
        for i, st in enumerate(self.stages):
            where = f"model.stages[{i}]"
            for name in ("patch_size", "hidden", "depth", "segments"):
                if getattr(st, name) < 1:
                    problems.append(f"{where}.{name}: must be >= 1")
            if st.patch_size >= 1:
                if side % st.patch_size:
                    problems.append(f"{where}.patch_size: grid side {side} is not divisible by {st.patch_size}")
                side //= st.patch_size
            if st.segments >= 1 and st.hidden % st.segments:
                problems.append(f"{where}.segments: hidden {st.hidden} is not divisible by {st.segments}")
            if not self.disable_reweight and st.hidden % 4:
                problems.append(f"{where}.hidden: reweighting needs hidden divisible by 4, got {st.hidden}")
        if self.disable_row and self.disable_col and self.disable_channel:
            problems.append("model: row, column and channel mixing cannot all be disabled")
        if self.share_row_col_op and (self.disable_row or self.disable_col):
            problems.append("model.share_row_col_op: needs both row and column mixing enabled")
        if problems:
            raise ConfigError("; ".join(problems), problems)
        return self


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    base_lr: float = 0.002
    weight_decay: float = 0.05
    warmup_start_lr: float = 1e-6
    warmup_epochs: float = 1.0
    label_smoothing: float = 0.0
    seed: int = 0
    checkpoint_dir: str | None = None
    checkpoint_every: int = 1
    max_steps: int | None = None

    def validate(self):
        problems = []
        for name in ("base_lr", "weight_decay", "warmup_start_lr", "warmup_epochs", "label_smoothing"):
            if getattr(self, name) < 0:
                problems.append(f"train.{name}: must be >= 0")
        if self.label_smoothing >= 1:
            problems.append("train.label_smoothing: must be < 1")
        if self.batch_size < 1:
            problems.append("train.batch_size: must be >= 1")
        if self.epochs < 1:
            problems.append("train.epochs: must be >= 1")
        if self.checkpoint_every < 1:
            problems.append("train.checkpoint_every: must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            problems.append("train.max_steps: must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems), problems)
        return self


CIFAR10_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR10_STD = (0.2470, 0.2435, 0.2616)


@dataclass(frozen=True)
class DataConfig:
    kind: str = "synthetic"
    dir: str | None = None
    n_train: int = 2000
    n_val: int = 500
    noise: float = 0.1
    seed: int = 0
    augment: bool | None = None
    mean: tuple[float, ...] = CIFAR10_MEAN
    std: tuple[float, ...] = CIFAR10_STD

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(self.mean))
        object.__setattr__(self, "std", tuple(self.std))

    @property
    def use_augment(self):
        return self.kind == "cifar10" if self.augment is None else self.augment

    def validate(self):
        problems = []
        if self.kind not in ("cifar10", "synthetic"):
            problems.append(f"data.kind: expected 'cifar10' or 'synthetic', got {self.kind!r}")
        if self.n_train < 1 or self.n_val < 1:
            problems.append("data.n_train/n_val: must be >= 1")
        if self.noise < 0:
            problems.append("data.noise: must be >= 0")
        if any(s <= 0 for s in self.std):
            problems.append("data.std: entries must be positive")
        if problems:
            raise ConfigError("; ".join(problems), problems)
        return self


# Published S/M/L sizes; "tiny" is the desk-scale test model.
_PRESET_MODELS = {
    "dynamixer-s": ModelConfig(
        stages=(StageConfig(7, 192, 4, 8), StageConfig(2, 384, 14, 16)),
        reduced_dim=2,
        stoch_depth_max=0.1,
    ),
    "dynamixer-m": ModelConfig(
        stages=(StageConfig(7, 256, 7, 8), StageConfig(2, 512, 17, 16)),
        reduced_dim=2,
        stoch_depth_max=0.1,
    ),
    "dynamixer-l": ModelConfig(
        stages=(StageConfig(7, 256, 8, 8), StageConfig(2, 512, 28, 16)),
        reduced_dim=8,
        stoch_depth_max=0.3,
    ),
    "tiny": ModelConfig(
        stages=(StageConfig(8, 8, 1, 2), StageConfig(2, 16, 1, 2)),
        image_size=32,
        reduced_dim=1,
        stoch_depth_max=0.1,
        num_classes=10,
    ),
}

_PRESET_TRAIN = {
    "tiny": TrainConfig(epochs=15, batch_size=64, base_lr=0.005, warmup_epochs=1.0, seed=0),
}

_PRESET_DATA = {
    "tiny": DataConfig(kind="synthetic", n_train=2000, n_val=500, noise=0.1),
}

PRESETS = tuple(_PRESET_MODELS)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        problems = []
        for part in (self.model, self.train, self.data):
            try:
                part.validate()
            except ConfigError as err:
                problems.extend(err.problems)
        if problems:
            raise ConfigError("; ".join(problems), problems)
        return self

    def to_dict(self):
        return to_dict(self)


def preset(name):
    """Full run document for a named preset."""
    try:
        model = _PRESET_MODELS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    data = _PRESET_DATA.get(name)
    if data is None:
        data = DataConfig(kind="synthetic")
    return RunConfig(model, _PRESET_TRAIN.get(name, TrainConfig()), data)


def model_preset(name):
    return preset(name).model


def to_dict(obj):
    if isinstance(obj, Enum):
        return obj.value
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def _type_name(tp):
    return getattr(tp, "__name__", str(tp))


def _coerce(value, tp, path):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return tuple(_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError:
            allowed = ", ".join(m.value for m in tp)
            raise ConfigError(f"{path}: {value!r} is not one of {allowed}") from None
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    raise ConfigError(f"{path}: unsupported field type {_type_name(tp)}")


def from_dict(cls, doc, path):
    """Build dataclass ``cls`` from ``doc``, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown key")
    kwargs = {}
    for name, f in known.items():
        if name in doc:
            kwargs[name] = _coerce(doc[name], hints[name], f"{path}.{name}")
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{path}.{name}: required key missing")
    return cls(**kwargs)


def run_config_from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("$: config document must be a JSON object")
    for key in doc:
        if key not in ("model", "train", "data"):
            raise ConfigError(f"{key}: unknown top-level key")
    if "model" not in doc:
        raise ConfigError("model: required section missing")
    model = from_dict(ModelConfig, doc["model"], "model")
    train = from_dict(TrainConfig, doc.get("train", {}), "train")
    data = from_dict(DataConfig, doc.get("data", {}), "data")
    return RunConfig(model, train, data).validate()


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"$: invalid JSON ({err.msg} at line {err.lineno})") from None
    return run_config_from_dict(doc)
