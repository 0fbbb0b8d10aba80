"""Experiment configuration: a flat ``dotted.key = value`` text format.

Lines starting with ``#`` are comments. Every key is listed in
``docs/config.md``; unknown keys are errors. Architectures are written as
``ann(16, 16, 32)`` (ReLU dense layers) or ``cnn(16, 32)`` (ReLU conv layers),
each followed by a softmax head over the user's labels. Schedules and shifts
are ``iteration: value`` pairs separated by ``;``::

    user.1.labels = Sit, Walk
    user.1.model = cnn(16, 32)
    user.1.schedule = 10: ann(16, 16, 32); 14: cnn(16)
    user.2.shift = 5: 1.5
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Mapping

from . import nn_core
from .data import SyntheticParams, TARGET_RATE, WINDOW_SECONDS
from .distill import DistillConfig
from .federation import BETA_USER, BETA_USER_LABEL
from .nn_core import ModelSpec, TrainConfig


class ConfigError(ValueError):
    pass


def parse_flat(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """``key -> (raw value, line number)``; raises on syntax errors and duplicates."""
    entries: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if not re.fullmatch(r"[A-Za-z0-9_]+(\.[A-Za-z0-9_]+)*", key):
            raise ConfigError(f"{source}:{lineno}: malformed key {key!r}")
        if key in entries:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first on line {entries[key][1]})")
        entries[key] = (value.strip(), lineno)
    if not entries:
        raise ConfigError(f"{source}: empty configuration")
    return entries


@dataclass(frozen=True)
class ModelSchedule:
    initial: ModelSpec
    changes: tuple[tuple[int, ModelSpec], ...] = ()

    def spec_at(self, iteration: int) -> ModelSpec:
        spec = self.initial
        for at, new in self.changes:
            if at <= iteration:
                spec = new
        return spec

    def change_at(self, iteration: int) -> ModelSpec | None:
        for at, new in self.changes:
            if at == iteration:
                return new
        return None


@dataclass(frozen=True)
class UserConfig:
    labels: tuple[str, ...]
    schedule: ModelSchedule
    shifts: Mapping[int, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SyntheticSource:
    params: SyntheticParams = field(default_factory=SyntheticParams)


@dataclass(frozen=True)
class CsvSource:
    path: Path
    schema: Path | None = None
    seconds: float = WINDOW_SECONDS


@dataclass(frozen=True)
class ExperimentConfig:
    labels: tuple[str, ...]
    users: tuple[UserConfig, ...]
    iterations: int = 15
    per_label_per_iteration: int = 200
    public_per_label: int = 200
    source: SyntheticSource | CsvSource = field(default_factory=SyntheticSource)
    distill: DistillConfig = field(default_factory=DistillConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    beta_granularity: str = BETA_USER_LABEL
    restrict_local: bool = True
    restrict_beta: bool = True
    kernel_width: int = 3
    audit_messages: bool = False

    @property
    def input_dim(self) -> int:
        return feature_dim(self.source)

    def label_ids(self, names) -> tuple[int, ...]:
        return tuple(self.labels.index(n) for n in names)


def feature_dim(source) -> int:
    if isinstance(source, SyntheticSource):
        return source.params.dim
    return 3 * math.ceil(int(round(source.seconds * TARGET_RATE)) / 2)


_ARCH = re.compile(r"^(ann|cnn)\(\s*(\d+(?:\s*,\s*\d+)*)?\s*\)$")


def parse_arch(text: str, labels, input_dim: int, kernel_width: int = 3) -> ModelSpec:
    m = _ARCH.match(text.strip().lower())
    if not m:
        raise ConfigError(f"bad architecture {text!r}; expected e.g. ann(16, 32) or cnn(16, 32)")
    sizes = [int(s) for s in m.group(2).split(",")] if m.group(2) else []
    if m.group(1) == "ann":
        return nn_core.dense_spec(sizes, labels, input_dim)
    if not sizes:
        raise ConfigError("cnn() needs at least one conv layer")
    return nn_core.conv_spec(sizes, labels, input_dim, kernel_width)


def _pairs(text: str) -> list[tuple[int, str]]:
    out = []
    for part in text.split(";"):
        if not part.strip():
            continue
        at, sep, value = part.partition(":")
        if not sep:
            raise ValueError(f"expected 'iteration: value', got {part.strip()!r}")
        out.append((int(at), value.strip()))
    return out


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("true", "yes", "on", "1"):
        return True
    if t in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _names(text: str) -> tuple[str, ...]:
    return tuple(n.strip() for n in text.split(",") if n.strip())


# key -> converter; user.N.* and the sources are handled separately
_SCALARS = {
    "labels": _names,
    "iterations": int,
    "seed": int,
    "per_label_per_iteration": int,
    "public_per_label": int,
    "beta_granularity": str,
    "restrict_local": _bool,
    "restrict_beta": _bool,
    "audit_messages": _bool,
    "model.kernel_width": int,
    "data.source": str,
    "data.synthetic.dim": int,
    "data.synthetic.separation": float,
    "data.synthetic.anisotropy": float,
    "data.synthetic.drift_magnitude": float,
    "data.synthetic.noise": float,
    "data.csv.path": str,
    "data.csv.schema": str,
    "data.csv.seconds": float,
    "train.max_epochs": int,
    "train.batch_size": int,
    "train.learning_rate": float,
    "train.patience": int,
    "train.validation_fraction": float,
    "train.seed": int,
    "distill.temperature": float,
    "distill.student": str,
}
_USER_KEYS = ("labels", "model", "schedule", "shift")


def parse_config(text: str, source: str = "<config>", base_dir: Path | None = None,
                 overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    entries = parse_flat(text, source)
    for key, value in (overrides or {}).items():
        entries[key] = (str(value), 0)

    def where(key):
        line = entries[key][1]
        return f"{source}:{line}: {key}" if line else f"override {key}"

    values = {}
    users: dict[int, dict[str, str]] = {}
    for key, (raw, _) in entries.items():
        if key.startswith("user."):
            parts = key.split(".")
            if len(parts) != 3 or not parts[1].isdigit() or parts[2] not in _USER_KEYS:
                raise ConfigError(f"{where(key)}: unknown key")
            users.setdefault(int(parts[1]), {})[parts[2]] = key
            continue
        if key not in _SCALARS:
            raise ConfigError(f"{where(key)}: unknown key")
        try:
            values[key] = _SCALARS[key](raw)
        except ValueError as exc:
            raise ConfigError(f"{where(key)}: {exc}") from None

    def get(key, default):
        return values.get(key, default)

    labels = get("labels", ())
    if not labels:
        raise ConfigError(f"{source}: 'labels' is required")
    if len(set(labels)) != len(labels):
        raise ConfigError(f"{source}: labels: duplicate names")

    kind = get("data.source", "synthetic")
    try:
        if kind == "synthetic":
            defaults = SyntheticParams()
            src = SyntheticSource(
                SyntheticParams(
                    dim=get("data.synthetic.dim", defaults.dim),
                    separation=get("data.synthetic.separation", defaults.separation),
                    anisotropy=get("data.synthetic.anisotropy", defaults.anisotropy),
                    drift_magnitude=get("data.synthetic.drift_magnitude", defaults.drift_magnitude),
                    noise=get("data.synthetic.noise", defaults.noise),
                )
            )
        elif kind == "csv":
            if "data.csv.path" not in values:
                raise ConfigError(f"{source}: data.csv.path is required when data.source = csv")
            base = base_dir or Path(".")
            schema = values.get("data.csv.schema")
            src = CsvSource(
                base / values["data.csv.path"],
                base / schema if schema else None,
                get("data.csv.seconds", WINDOW_SECONDS),
            )
        else:
            raise ConfigError(f"{source}: data.source must be 'synthetic' or 'csv', got {kind!r}")
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{source}: data.synthetic: {exc}") from None

    try:
        train = TrainConfig(
            max_epochs=get("train.max_epochs", 5),
            batch_size=get("train.batch_size", 32),
            learning_rate=get("train.learning_rate", 1e-3),
            patience=get("train.patience", 1),
            validation_fraction=get("train.validation_fraction", 0.1),
            seed=get("train.seed", 0),
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: train: {exc}") from None

    input_dim = feature_dim(src)
    kernel_width = get("model.kernel_width", 3)
    iterations = get("iterations", 15)
    if iterations < 1:
        raise ConfigError(f"{where('iterations')}: must be >= 1")

    student = get("distill.student", "ann(8, 16)")
    m = _ARCH.match(student.lower())
    if not m or m.group(1) != "ann":
        raise ConfigError(f"{source}: distill.student: expected ann(...), got {student!r}")
    try:
        distill_cfg = DistillConfig(
            temperature=get("distill.temperature", 1.0),
            student_hidden=tuple(int(s) for s in m.group(2).split(",")) if m.group(2) else (),
            train=train,
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: distill: {exc}") from None

    if not users:
        raise ConfigError(f"{source}: at least one user.N block is required")
    user_cfgs = []
    for n in sorted(users):
        keys = users[n]
        prefix = f"user.{n}"
        for required in ("labels", "model"):
            if required not in keys:
                raise ConfigError(f"{source}: {prefix}.{required} is required")
        names = _names(entries[keys["labels"]][0])
        unknown = [x for x in names if x not in labels]
        if unknown or not names or len(set(names)) != len(names):
            raise ConfigError(f"{where(keys['labels'])}: invalid label set {names} (unknown: {unknown})")
        ids = tuple(labels.index(x) for x in names)
        try:
            initial = parse_arch(entries[keys["model"]][0], ids, input_dim, kernel_width)
        except ValueError as exc:
            raise ConfigError(f"{where(keys['model'])}: {exc}") from None
        changes = []
        if "schedule" in keys:
            try:
                for at, arch in _pairs(entries[keys["schedule"]][0]):
                    changes.append((at, parse_arch(arch, ids, input_dim, kernel_width)))
            except ValueError as exc:
                raise ConfigError(f"{where(keys['schedule'])}: {exc}") from None
            ats = [at for at, _ in changes]
            if any(b <= a for a, b in zip(ats, ats[1:])):
                raise ConfigError(f"{where(keys['schedule'])}: change iterations must be strictly increasing")
            if any(not 1 <= at <= iterations for at in ats):
                raise ConfigError(f"{where(keys['schedule'])}: change iterations must lie in [1, {iterations}]")
        shifts = {}
        if "shift" in keys:
            try:
                shifts = {at: float(v) for at, v in _pairs(entries[keys["shift"]][0])}
            except ValueError as exc:
                raise ConfigError(f"{where(keys['shift'])}: {exc}") from None
            if any(not 1 <= at <= iterations for at in shifts):
                raise ConfigError(f"{where(keys['shift'])}: shift iterations must lie in [1, {iterations}]")
        user_cfgs.append(UserConfig(names, ModelSchedule(initial, tuple(changes)), shifts))

    cfg = ExperimentConfig(
        labels=labels,
        users=tuple(user_cfgs),
        iterations=iterations,
        per_label_per_iteration=get("per_label_per_iteration", 200),
        public_per_label=get("public_per_label", 200),
        source=src,
        distill=distill_cfg,
        train=train,
        seed=get("seed", 0),
        beta_granularity=get("beta_granularity", BETA_USER_LABEL),
        restrict_local=get("restrict_local", True),
        restrict_beta=get("restrict_beta", True),
        kernel_width=kernel_width,
        audit_messages=get("audit_messages", False),
    )
    validate(cfg, source)
    return cfg


def validate(cfg: ExperimentConfig, source: str = "<config>") -> None:
    if cfg.beta_granularity not in (BETA_USER, BETA_USER_LABEL):
        raise ConfigError(f"{source}: beta_granularity must be {BETA_USER!r} or {BETA_USER_LABEL!r}")
    if cfg.per_label_per_iteration < 1 or cfg.public_per_label < 1:
        raise ConfigError(f"{source}: per_label_per_iteration and public_per_label must be >= 1")
    owned = {name for u in cfg.users for name in u.labels}
    for name in cfg.labels:
        if name not in owned:
            raise ConfigError(f"{source}: labels: label {name!r} is not owned by any user")
    for n, user in enumerate(cfg.users, start=1):
        first = user.schedule.initial
        for at, spec in user.schedule.changes:
            if spec.input_dim != first.input_dim or spec.labels != first.labels:
                raise ConfigError(
                    f"{source}: user.{n}.schedule: iteration {at} changes feature width or labels"
                )


def load_config(path: str | Path, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path), path.parent, overrides)


BUNDLED = ("paper-topology",)


def bundled_config_path(name: str = "paper-topology") -> Path:
    ref = resources.files("fedlabel") / "configs" / f"{name}.cfg"
    return Path(str(ref))


def load_bundled(name: str = "paper-topology", overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    return load_config(bundled_config_path(name), overrides)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(cfg, seed=seed)
