"""Run configuration: dataclasses plus a ``key = value`` sectioned file format.

Example::

    [run]
    seed = 0
    pooling = attpool
    output_dir = runs/demo

    [backbone]
    family = conv4
    filters = 32,32,32,32

    [pretrain]
    mode = dc
    epochs = 30
    milestones = 24

Every section maps onto one dataclass below; ``section.key=value`` overrides
are applied after the file is parsed.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .synth import SynthSpec


class ConfigParseError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    pooling: str = "attpool"
    output_dir: str = "runs/default"


@dataclass
class PretrainConfig:
    mode: str = "dc"                 # none | gap | dc
    epochs: int = 30
    milestones: tuple = (24,)        # epochs
    lr: float = 0.1
    batch_size: int = 64
    holdout_rate: float = 0.1
    smoothing: float = 0.1
    normalize_by_r: bool = True      # dense loss: mean instead of sum over sites
    flip: bool = True


@dataclass
class MetaConfig:
    iterations: int = 200            # optimizer steps (episode batches)
    tasks_per_batch: int = 4
    way: int = 5
    shot: int = 1
    queries: int = 15
    lr_backbone: float = 0.001
    lr_regressor: float = 0.01
    milestones: tuple = (640,)       # in milestone_unit; 640 tasks = step 160 of 200
    milestone_unit: str = "tasks"    # tasks | steps
    val_every: int = 50
    val_tasks: int = 1000
    beta: float = 0.1
    gamma: float = 0.5
    normalize_by_r: bool = False
    flip: bool = True


@dataclass
class OptimConfig:
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 0.0005
    lr_decay: float = 0.1


@dataclass
class EvalConfig:
    way: int = 5
    shot: int = 1
    queries: int = 15
    tasks: int = 1000
    seed: int = 1234


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    data: SynthSpec = field(default_factory=SynthSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.run.pooling not in ("gap", "attpool"):
            raise ConfigParseError(f"run.pooling must be gap or attpool, got {self.run.pooling!r}")
        if self.pretrain.mode not in ("none", "gap", "dc"):
            raise ConfigParseError(f"pretrain.mode must be none, gap or dc, got {self.pretrain.mode!r}")
        if self.meta.milestone_unit not in ("tasks", "steps"):
            raise ConfigParseError("meta.milestone_unit must be tasks or steps")
        for name, ms in (("pretrain.milestones", self.pretrain.milestones), ("meta.milestones", self.meta.milestones)):
            if any(b <= a for a, b in zip(ms, ms[1:])):
                raise ConfigParseError(f"{name} must be strictly increasing, got {ms}")
        if self.pretrain.lr <= 0 or self.meta.lr_backbone <= 0 or self.meta.lr_regressor <= 0:
            raise ConfigParseError("learning rates must be positive")

    @property
    def variant(self) -> str:
        pre = {"none": "Zero", "gap": "GAP", "dc": "DC"}[self.pretrain.mode]
        return f"{pre}-{'GAP' if self.run.pooling == 'gap' else 'AttPool'}"

    def to_dict(self) -> dict:
        return {f.name: _section_dict(getattr(self, f.name)) for f in dataclasses.fields(self)}

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def with_overrides(self, overrides) -> "RunConfig":
        return apply_overrides(self, overrides)


def _section_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            if not raw:
                return ()
            kind = float if any(isinstance(v, float) for v in default) else int
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            try:
                return tuple(kind(p) for p in parts)
            except ValueError:
                return tuple(float(p) for p in parts)
        return raw
    except ValueError:
        raise ConfigParseError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None


def _set_values(config: RunConfig, values: dict) -> RunConfig:
    """``values`` maps section -> {key: raw string}; unknown names are rejected."""
    sections = {f.name: getattr(config, f.name) for f in dataclasses.fields(config)}
    updated = {}
    for section, items in values.items():
        if section not in sections:
            raise ConfigParseError(f"unknown section [{section}]")
        obj = sections[section]
        known = {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}
        changes = {}
        for key, raw in items.items():
            if key not in known:
                raise ConfigParseError(f"unknown key {section}.{key}")
            changes[key] = _coerce(raw, known[key], f"{section}.{key}")
        try:
            updated[section] = dataclasses.replace(updated.get(section, obj), **changes)
        except ValueError as exc:
            raise ConfigParseError(f"[{section}]: {exc}") from exc
    try:
        return dataclasses.replace(config, **updated)
    except ValueError as exc:
        raise ConfigParseError(str(exc)) from exc


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigParseError(str(exc).splitlines()[0]) from exc
    values = {s: dict(parser.items(s)) for s in parser.sections()}
    return _set_values(base or RunConfig(), values)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigParseError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def apply_overrides(config: RunConfig, overrides) -> RunConfig:
    values: dict = {}
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigParseError(f"override {item!r} is not of the form section.key=value")
        values.setdefault(section, {})[name] = raw
    return _set_values(config, values)


def render_config(config: RunConfig) -> str:
    lines = []
    for section, items in config.to_dict().items():
        lines.append(f"[{section}]")
        for k, v in items.items():
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
