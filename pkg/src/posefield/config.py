"""Run configuration dataclasses and their ``section.key = value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .diffusion import GuidanceConfig


def _check_prob(name, p):
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must be a probability, got {p}")


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 5.0
    sil: float = 10.0
    bg: float = 10.0

    def __post_init__(self):
        if min(self.rgb, self.sil, self.bg) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    steps: int = 1600
    batch: int = 1
    views: int = 5
    reg_prob: float = 0.25
    text_drop: float = 0.10
    importance_prob: float = 0.9
    pool_size: int = 64
    checkpoint_every: int = 200
    seed: int = 0

    def __post_init__(self):
        for k in ("reg_prob", "text_drop", "importance_prob"):
            _check_prob(k, getattr(self, k))
        if self.views < 2:
            raise ValueError("need at least one reference besides the target")


@dataclass(frozen=True)
class PretrainConfig:
    learning_rate: float = 1e-3
    steps: int = 2000
    batch: int = 8
    pool_size: int = 256
    text_drop: float = 0.10
    seed: int = 0

    def __post_init__(self):
        _check_prob("text_drop", self.text_drop)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 50
    mode: str = "ancestral"
    references: int = 4

    def __post_init__(self):
        if self.mode not in ("ancestral", "deterministic"):
            raise ValueError(f"unknown sampler mode {self.mode!r}")


@dataclass(frozen=True)
class EvalConfig:
    references: int = 4
    render_size: int = 32
    layer: str = ""  # empty: deepest pose layer
    adherence_seeds: int = 4
    rotation: float = 90.0
    fg_threshold: float = 0.95


SECTIONS = {
    "train": TrainConfig,
    "pretrain": PretrainConfig,
    "loss": LossWeights,
    "guidance": GuidanceConfig,
    "sampler": SamplerConfig,
    "eval": EvalConfig,
}


class ConfigError(ValueError):
    pass


def _coerce(field: dataclasses.Field, text: str):
    typ = field.type if isinstance(field.type, type) else {"float": float, "int": int, "str": str, "bool": bool}[field.type]
    if typ is bool:
        if text.lower() not in ("true", "false", "1", "0"):
            raise ConfigError(f"{field.name}: expected a boolean, got {text!r}")
        return text.lower() in ("true", "1")
    try:
        return typ(text)
    except ValueError as e:
        raise ConfigError(f"{field.name}: cannot parse {text!r} as {typ.__name__}") from e


def parse_overrides(lines) -> dict[str, dict[str, object]]:
    """``section.key = value`` lines (``#`` comments allowed) to per-section dicts."""
    out: dict[str, dict[str, object]] = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"line {n}: unknown section {section!r}")
        fields = {f.name: f for f in dataclasses.fields(SECTIONS[section])}
        if name not in fields:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out.setdefault(section, {})[name] = _coerce(fields[name], value)
    return out


def build(section: str, overrides: dict[str, dict[str, object]] | None = None, **extra):
    vals = dict((overrides or {}).get(section, {}))
    vals.update({k: v for k, v in extra.items() if v is not None})
    try:
        return SECTIONS[section](**vals)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[{section}] {e}") from e


def load_config(path: str | Path) -> dict[str, dict[str, object]]:
    return parse_overrides(Path(path).read_text().splitlines())


def dump_config(configs: dict[str, object]) -> str:
    lines = []
    for section, cfg in configs.items():
        for f in dataclasses.fields(cfg):
            lines.append(f"{section}.{f.name} = {getattr(cfg, f.name)}")
    return "\n".join(lines) + "\n"
