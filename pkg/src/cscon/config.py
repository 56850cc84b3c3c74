"""Run configuration: key=value text with [section] headers.

    [run]
    profile = desk
    data = data/shapes
    [model]
    mask_ratio = 0.6
    [train]
    epochs = 30
    [data]
    n_points = 1024

Resolution order: profile defaults, then file values, then flags.
"""

from __future__ import annotations

import dataclasses
import re
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .model import PROFILES, ModelConfig
from .synthdata import DataConfig
from .training import DESK_TRAIN, PAPER_TRAIN, TrainConfig

TRAIN_PROFILES = {"desk": DESK_TRAIN, "paper": PAPER_TRAIN}
SECTIONS = ("run", "model", "train", "data")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class RunConfig:
    profile: str = "desk"
    data: str | None = None
    out: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DataConfig = field(default_factory=DataConfig)

    def to_text(self) -> str:
        lines = ["[run]", f"profile = {self.profile}"]
        if self.data is not None:
            lines.append(f"data = {self.data}")
        if self.out is not None:
            lines.append(f"out = {self.out}")
        for name, obj in (("model", self.model), ("train", self.train), ("data", self.dataset)):
            lines.append(f"[{name}]")
            for f in fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    def echo(self, out_dir) -> Path:
        path = Path(out_dir) / "config.resolved"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(section: str, cls, name: str, raw: str):
    hints = typing.get_type_hints(cls)
    if name not in hints:
        raise ConfigError(f"{section}.{name}", "unknown field")
    kind = hints[name]
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if typing.get_origin(kind) is tuple:
            inner = typing.get_args(kind)[0]
            return tuple(inner(x.strip()) for x in raw.split(",") if x.strip())
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{section}.{name}", f"cannot parse {raw!r} as {getattr(kind, '__name__', kind)}") from None


def _blame(cls, message: str) -> str:
    """The field a validation message names first."""
    hits = [(m.start(), f.name) for f in fields(cls) if (m := re.search(rf"\b{f.name}\b", message))]
    return min(hits)[1] if hits else "?"


def parse_text(text: str, source: str = "<config>") -> dict[str, dict[str, str]]:
    """Raw section -> {key: value} strings; '#' starts a comment."""
    out: dict[str, dict[str, str]] = {s: {} for s in SECTIONS}
    section = "run"
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in out:
                raise ConfigError(section, f"unknown section in {source} line {lineno}")
            continue
        if "=" not in line:
            raise ConfigError(f"{section}", f"expected key = value in {source} line {lineno}")
        key, _, val = line.partition("=")
        out[section][key.strip()] = val.strip()
    return out


def resolve(raw: dict[str, dict[str, str]], overrides: dict[str, dict[str, object]] | None = None) -> RunConfig:
    """Build a validated RunConfig. ``overrides`` holds already-typed flag values."""
    overrides = overrides or {}
    run = {**raw.get("run", {}), **{k: str(v) for k, v in overrides.get("run", {}).items()}}
    for key in run:
        if key not in ("profile", "data", "out"):
            raise ConfigError(f"run.{key}", "unknown field")
    profile = run.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError("run.profile", f"must be one of {sorted(PROFILES)}, got {profile!r}")

    def build(section, cls, base):
        vals = {k: _coerce(section, cls, k, v) for k, v in raw.get(section, {}).items()}
        for k, v in overrides.get(section, {}).items():
            if k not in {f.name for f in fields(cls)}:
                raise ConfigError(f"{section}.{k}", "unknown field")
            vals[k] = v
        try:
            return dataclasses.replace(base, **vals)
        except ValueError as e:
            raise ConfigError(f"{section}.{_blame(cls, str(e))}", str(e)) from None

    return RunConfig(
        profile=profile,
        data=run.get("data"),
        out=run.get("out"),
        model=build("model", ModelConfig, PROFILES[profile]),
        train=build("train", TrainConfig, TRAIN_PROFILES[profile]),
        dataset=build("data", DataConfig, DataConfig()),
    )


def load(path=None, overrides=None) -> RunConfig:
    raw: dict[str, dict[str, str]] = {}
    if path is not None:
        text = Path(path).read_text()
        raw = parse_text(text, str(path))
    return resolve(raw, overrides)
