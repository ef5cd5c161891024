"""INI run configuration: one section per module config, unknown keys rejected."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .pairs import PairBuildConfig
from .pose3d import FinetuneConfig
from .synth import SceneConfig
from .wsp import TrainConfig, WspConfig


class ConfigError(ValueError):
    pass


SECTIONS = {
    "synth": SceneConfig,
    "pairs": PairBuildConfig,
    "wsp": WspConfig,
    "train": TrainConfig,
    "finetune": FinetuneConfig,
}


@dataclass(frozen=True)
class RunConfig:
    synth: SceneConfig = field(default_factory=SceneConfig)
    pairs: PairBuildConfig = field(default_factory=PairBuildConfig)
    wsp: WspConfig = field(default_factory=WspConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            obj = getattr(self, name)
            for f in fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, pairs=replace(self.pairs, rng_seed=seed),
                       train=replace(self.train, seed=seed), finetune=replace(self.finetune, seed=seed))

    def with_overrides(self, overrides: Mapping[str, Mapping[str, str]]) -> "RunConfig":
        """Apply string values keyed by section then field, parsed like file values."""
        cfg = self
        for section, values in overrides.items():
            cfg = replace(cfg, **{section: _apply(section, getattr(cfg, section), values)})
        return cfg


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(text: str, like: Any) -> Any:
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def _parse(text: str, like: Any) -> Any:
    if isinstance(like, tuple):
        parts = [p for p in text.split(",") if p.strip()]
        proto = like[0] if like else 0.0
        return tuple(_parse_scalar(p, proto) for p in parts)
    return _parse_scalar(text, like)


def _apply(section: str, obj, values: Mapping[str, str]):
    known = {f.name for f in fields(obj)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")
    parsed = {}
    for key, text in values.items():
        try:
            parsed[key] = _parse(text, getattr(obj, key))
        except ValueError as e:
            raise ConfigError(f"[{section}] {key}: {e}") from None
    try:
        return replace(obj, **parsed)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"[{section}] {e}") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__no_defaults__")
    cp.optionxform = str  # keep key case so typos are not silently folded
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    return (base or RunConfig()).with_overrides({s: dict(cp.items(s)) for s in cp.sections()})


def load_config(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text())
