"""Run configuration: every tunable of one experiment as flat ``key = value`` pairs.

Keys are grouped by prefix (``data.``, ``net.``, ``optim.``, ``train.``,
``detect.``, ``eval.``). Unknown keys are rejected so that a typo never
silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .detection import AnchorSpec
from .errors import ConfigError
from .kv import parse_kv, render_kv
from .model import DetectConfig
from .resnet import BlockVariant, DropoutPlacement, NetworkConfig
from .synth import DatasetSpec
from .trainer import OptimConfig, TrainConfig

PRECISIONS = ("float64", "float32")


def _fmt(v) -> str:
    if isinstance(v, enum.Enum):
        return v.value
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(s) for s in text.split(",") if s.strip())


def _stages(text: str) -> tuple[tuple[int, int, int], ...]:
    out = []
    for part in text.split(","):
        bits = part.strip().split("x")
        if len(bits) != 3:
            raise ValueError(f"stage {part.strip()!r} is not blocks x width x stride")
        out.append(tuple(int(b) for b in bits))
    return tuple(out)


def _render_stages(stages) -> str:
    return ",".join("x".join(str(v) for v in s) for s in stages)


# per-field parsers where the default's type is not enough
_SPECIAL: dict[str, Callable[[str], Any]] = {
    "net.stages": _stages,
    "net.block_variant": BlockVariant,
    "net.dropout": DropoutPlacement,
    "net.anchor_sizes": _floats,
    "net.anchor_ratios": _floats,
    "detect.bbox_std": _floats,
}


def _section_pairs(prefix: str, obj) -> dict[str, str]:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, AnchorSpec):
            out[f"{prefix}.anchor_sizes"] = _fmt(v.base_sizes)
            out[f"{prefix}.anchor_ratios"] = _fmt(v.aspect_ratios)
        elif f.name == "stages":
            out[f"{prefix}.stages"] = _render_stages(v)
        else:
            out[f"{prefix}.{f.name}"] = _fmt(v)
    return out


def _convert(key: str, text: str, default):
    if key in _SPECIAL:
        return _SPECIAL[key](text)
    return type(default)(text)


def _build(cls, prefix: str, pairs: dict[str, str], used: set[str]):
    kwargs = {}
    anchors = {}
    for f in dataclasses.fields(cls):
        if f.name == "anchors":
            for sub in ("anchor_sizes", "anchor_ratios"):
                key = f"{prefix}.{sub}"
                if key in pairs:
                    try:
                        anchors[sub] = _SPECIAL[key](pairs[key])
                    except ValueError as exc:
                        raise ConfigError(f"bad value for {key}: {exc}") from None
                    used.add(key)
            continue
        key = f"{prefix}.{f.name}"
        if key not in pairs:
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        try:
            kwargs[f.name] = _convert(key, pairs[key], default)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
        used.add(key)
    if anchors:
        base = AnchorSpec()
        kwargs["anchors"] = AnchorSpec(
            anchors.get("anchor_sizes", base.base_sizes), anchors.get("anchor_ratios", base.aspect_ratios)
        )
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix} settings: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    data: DatasetSpec = field(default_factory=DatasetSpec)
    net: NetworkConfig = field(default_factory=NetworkConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    eval_iou: float = 0.5
    precision: str = "float64"

    def __post_init__(self):
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if not 0.0 < self.eval_iou <= 1.0:
            raise ConfigError(f"eval.iou must lie in (0, 1], got {self.eval_iou}")

    def to_pairs(self) -> dict[str, str]:
        pairs: dict[str, str] = {}
        for prefix in ("data", "net", "optim", "train", "detect"):
            pairs.update(_section_pairs(prefix, getattr(self, prefix)))
        pairs["eval.iou"] = _fmt(self.eval_iou)
        pairs["precision"] = self.precision
        return pairs

    @classmethod
    def from_pairs(cls, pairs: dict[str, str]) -> "RunConfig":
        used: set[str] = set()
        parts = {
            "data": _build(DatasetSpec, "data", pairs, used),
            "net": _build(NetworkConfig, "net", pairs, used),
            "optim": _build(OptimConfig, "optim", pairs, used),
            "train": _build(TrainConfig, "train", pairs, used),
            "detect": _build(DetectConfig, "detect", pairs, used),
        }
        if "eval.iou" in pairs:
            try:
                parts["eval_iou"] = float(pairs["eval.iou"])
            except ValueError:
                raise ConfigError(f"bad value for eval.iou: {pairs['eval.iou']!r}") from None
            used.add("eval.iou")
        if "precision" in pairs:
            parts["precision"] = pairs["precision"]
            used.add("precision")
        unknown = sorted(set(pairs) - used)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return cls(**parts)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def render_config(cfg: RunConfig) -> str:
    return render_kv(cfg.to_pairs(), "run configuration")


def parse_config(text: str, path=None) -> RunConfig:
    return RunConfig.from_pairs(parse_kv(text, path))


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config ({exc.strerror})") from None
    try:
        return parse_config(text, p)
    except ConfigError as exc:
        raise ConfigError(f"{p}: {exc}") from None


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(render_config(cfg), encoding="utf-8")


__all__ = ["RunConfig", "render_config", "parse_config", "load_config", "save_config", "PRECISIONS"]
