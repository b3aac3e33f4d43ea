"""Flat ``key = value`` run configuration.

Grammar, one entry per line::

    # comment
    section.field = value
    section.sub.field = value

Values are typed by the dataclass field they address: ``true``/``false`` for
flags, Python-style int and float literals, bare strings, comma-separated
lists for tuples (``12,24``) and ``none`` for optional fields. Unknown keys
are rejected. The dataclass defaults below are the single source of truth;
``defaults_table()`` renders them.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .augment import NoiseSpec
from .backbone import DESK_CONFIG
from .data import SyntheticSpec
from .errors import ConfigError
from .geometry import ClipRule
from .model import ModelConfig
from .selftrain import SelfTrainConfig
from .training import TrainConfig


@dataclass(frozen=True)
class SelfTrainKnobs:
    ratio: int = 3
    batch_b: int = 8
    max_generations: int = 4
    eps_sat: float = 0.1
    balance: bool = True
    threshold: float = 0.5
    minority: tuple[int, ...] | None = None
    majority: tuple[int, ...] | None = None
    student_blocks: tuple[int, ...] | None = None  # wider/deeper student channels; none = teacher's


@dataclass(frozen=True)
class GeometryKnobs:
    side: int = 224
    min_frames: int = 30
    area_threshold: float = 0.2
    majority: float = 0.5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(backbone=DESK_CONFIG))
    train: TrainConfig = field(default_factory=TrainConfig)
    student: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    selftrain: SelfTrainKnobs = field(default_factory=SelfTrainKnobs)
    geometry: GeometryKnobs = field(default_factory=GeometryKnobs)

    def train_config(self) -> TrainConfig:
        return replace(self.train, noise=self.noise.disabled())

    def clip_rule(self) -> ClipRule:
        g = self.geometry
        return ClipRule(g.min_frames, g.area_threshold, g.majority)

    def student_model(self) -> ModelConfig | None:
        blocks = self.selftrain.student_blocks
        if blocks is None:
            return None
        bb = replace(self.model.backbone, num_blocks=len(blocks), channels_per_block=tuple(blocks))
        return replace(self.model, backbone=bb)

    def selftrain_config(self) -> SelfTrainConfig:
        s = self.selftrain
        return SelfTrainConfig(
            teacher_model=self.model,
            student_model=self.student_model(),
            teacher_train=self.train,
            student_train=self.student,
            noise=self.noise,
            ratio=s.ratio,
            batch_b=s.batch_b,
            max_generations=s.max_generations,
            eps_sat=s.eps_sat,
            balance=s.balance,
            threshold=s.threshold,
            minority=s.minority,
            majority=s.majority,
            seed=self.seed,
        )


# fields managed elsewhere (noise lives in its own section)
_SKIP = {(TrainConfig, "noise")}


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def flatten(obj, prefix: str = "") -> dict[str, object]:
    out = {}
    for f in fields(obj):
        if (type(obj), f.name) in _SKIP:
            continue
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(v):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str, typ, key: str):
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true or false, got {text!r}")
            return low == "true"
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    raise ConfigError(f"{key}: unsupported type {typ}")


def parse_value(text: str, typ, key: str):
    text = text.strip()
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin in (typing.Union, types.UnionType):
        if text.lower() == "none" and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return parse_value(text, inner[0], key)
    if origin is tuple:
        items = [t for t in text.split(",") if t.strip()] if text else []
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(t.strip(), args[0], key) for t in items)
        if len(items) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_parse_scalar(t.strip(), a, key) for t, a in zip(items, args))
    return _parse_scalar(text, typ, key)


def _field_type(root_cls, key: str):
    cls, parts = root_cls, key.split(".")
    for i, part in enumerate(parts):
        hints = _hints(cls)
        if part not in hints or (cls, part) in _SKIP:
            raise ConfigError(f"unknown config key {key!r}")
        typ = hints[part]
        if i == len(parts) - 1:
            if is_dataclass(typ):
                raise ConfigError(f"config key {key!r} names a section, not a field")
            return typ
        if not is_dataclass(typ):
            raise ConfigError(f"unknown config key {key!r}")
        cls = typ
    raise ConfigError(f"unknown config key {key!r}")


def _set(obj, parts: list[str], value):
    if len(parts) == 1:
        return replace(obj, **{parts[0]: value})
    child = getattr(obj, parts[0])
    return replace(obj, **{parts[0]: _set(child, parts[1:], value)})


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    """Apply textual ``key -> value`` overrides with type checking."""
    for key, text in pairs.items():
        typ = _field_type(RunConfig, key)
        value = parse_value(text, typ, key)
        try:
            cfg = _set(cfg, key.split("."), value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    return cfg


def parse_text(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"config line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = apply_overrides(cfg, parse_text(text))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in flatten(cfg).items())


def defaults_table() -> str:
    """Markdown table of every key with its type and default."""
    rows = ["| key | type | default |", "|---|---|---|"]
    for key, v in flatten(RunConfig()).items():
        typ = _field_type(RunConfig, key)
        name = getattr(typ, "__name__", None) or str(typ).replace("typing.", "")
        rows.append(f"| `{key}` | {name} | `{format_value(v)}` |")
    return "\n".join(rows)


__all__ = [
    "RunConfig",
    "SelfTrainKnobs",
    "GeometryKnobs",
    "load_config",
    "dump_config",
    "apply_overrides",
    "parse_text",
    "defaults_table",
    "flatten",
]

del dataclasses
