"""Flat ``section.key = value`` experiment configuration."""
from __future__ import annotations

import typing
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from tubeskel.evalkit import MatchParams
from tubeskel.flowfield import VectorFieldParams
from tubeskel.phantom import PhantomConfig
from tubeskel.teasar import (
    AdaptiveMaskParams,
    PenaltyParams,
    PostprocessParams,
    RootDetectionParams,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SweepParams:
    kind: str = "vector_noise"
    levels: tuple[float, ...] = tuple(round(0.1 * k, 1) for k in range(21))
    threshold: float = 0.5

    def __post_init__(self):
        if self.kind not in ("vector_noise", "image_noise"):
            raise ValueError(f"unknown sweep kind {self.kind!r}")
        if any(not lv >= 0 for lv in self.levels):
            raise ValueError("sweep levels must be >= 0")


SECTIONS = {
    "phantom": PhantomConfig,
    "vectors": VectorFieldParams,
    "penalty": PenaltyParams,
    "masking": AdaptiveMaskParams,
    "roots": RootDetectionParams,
    "post": PostprocessParams,
    "match": MatchParams,
    "sweep": SweepParams,
}
# the phantom seed is derived from the run seed
_DERIVED = {"phantom.seed"}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "."
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    vectors: VectorFieldParams = field(default_factory=VectorFieldParams)
    penalty: PenaltyParams = field(default_factory=PenaltyParams)
    masking: AdaptiveMaskParams = field(default_factory=AdaptiveMaskParams)
    roots: RootDetectionParams = field(default_factory=RootDetectionParams)
    post: PostprocessParams = field(default_factory=PostprocessParams)
    match: MatchParams = field(default_factory=MatchParams)
    sweep: SweepParams = field(default_factory=SweepParams)

    def resolved_phantom(self) -> PhantomConfig:
        return replace(self.phantom, seed=sub_seed(self.seed, "phantom"))

    def items(self) -> list[tuple[str, str]]:
        out = [("out_dir", self.out_dir), ("seed", str(self.seed))]
        for section in SECTIONS:
            block = getattr(self, section)
            for f in fields(block):
                key = f"{section}.{f.name}"
                if key not in _DERIVED:
                    out.append((key, format_value(getattr(block, f.name))))
        return sorted(out)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())


def sub_seed(seed: int, label: str) -> int:
    """Independent, reproducible seed for a labelled random stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(label.encode()),))
    return int(ss.generate_state(1, np.uint32)[0])


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str, kind):
    t = text.strip()
    if kind is bool:
        low = t.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(t)
    if kind is float:
        return float(t)
    return t


def _field_types(cls) -> dict:
    return typing.get_type_hints(cls)


def parse_value(text: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is tuple:
        parts = [p for p in text.replace(",", " ").split() if p]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(p, args[0]) for p in parts)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} values, got {text!r}")
        return tuple(_parse_scalar(p, a) for p, a in zip(parts, args))
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        if text.strip().lower() == "none":
            return None
        inner = [a for a in args if a is not type(None)][0]
        return parse_value(text, inner)
    return _parse_scalar(text, hint)


def known_keys() -> list[str]:
    keys = ["seed", "out_dir"]
    for section, cls in SECTIONS.items():
        keys += [f"{section}.{f.name}" for f in fields(cls) if f"{section}.{f.name}" not in _DERIVED]
    return keys


def build(values: dict[str, str], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply string overrides to ``base``; unknown keys raise ConfigError."""
    cfg = base or ExperimentConfig()
    unknown = sorted(set(values) - set(known_keys()))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    top = {}
    per_section: dict[str, dict] = {}
    for key, text in values.items():
        try:
            if key == "seed":
                top["seed"] = int(text)
            elif key == "out_dir":
                top["out_dir"] = str(text)
            else:
                section, name = key.split(".", 1)
                hint = _field_types(SECTIONS[section])[name]
                per_section.setdefault(section, {})[name] = parse_value(str(text), hint)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    try:
        blocks = {s: replace(getattr(cfg, s), **kv) for s, kv in per_section.items()}
        return replace(cfg, **top, **blocks)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def read_config_file(path) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def write_resolved(cfg: ExperimentConfig, directory, name: str) -> Path:
    path = Path(directory) / f"{name}.config"
    path.write_text(cfg.to_text())
    return path


__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "SweepParams",
    "build",
    "known_keys",
    "read_config_file",
    "sub_seed",
    "write_resolved",
]
