"""Flat dotted-key run configuration: defaults < config file < command-line overrides."""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field, fields

from .baselines import BaselineConfig
from .model import OATConfig
from .positional import PEConfig
from .training import ConfigError, TrainConfig


@dataclass
class GenerateConfig:
    mode: str = "sample"
    n: int = 100
    max_len: int = 30

    def validate(self) -> None:
        if self.mode not in ("greedy", "sample"):
            raise ConfigError(f"generate.mode must be greedy or sample, got {self.mode!r}")
        if self.n < 1:
            raise ConfigError("generate.n must be >= 1")
        if self.max_len < 1:
            raise ConfigError("generate.max_len must be >= 1")


SECTIONS = {
    "model": OATConfig,
    "pe": PEConfig,
    "train": TrainConfig,
    "generate": GenerateConfig,
    "baseline": BaselineConfig,
}


# Reduced model that trains on the synthetic 6x6 benchmark in a few CPU minutes.
PRESETS: dict[str, dict[str, object]] = {
    "paper": {},
    "desk": {
        "model.p": 32,
        "model.h": 64,
        "model.n_e": 2,
        "model.n_d": 2,
        "model.k": 32,
        "model.dropout": 0.0,
        "model.temporal_scale": 0.1,
        "train.lr": 1e-3,
        "train.epochs": 60,
        "train.patience": 15,
        "train.alpha_auto": True,
        "train.augment": True,
    },
}


@dataclass
class RunConfig:
    model: OATConfig = field(default_factory=OATConfig)
    pe: PEConfig = field(default_factory=PEConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def validate(self) -> None:
        """Validate every section; errors name the dotted key."""
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except ConfigError:
                raise
            except (ValueError, TypeError) as exc:
                msg = str(exc)
                raise ConfigError(msg if msg.startswith(f"{name}.") else f"{name}: {msg}") from exc

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def to_text(self) -> str:
        lines = []
        for section, values in self.to_dict().items():
            for key, value in values.items():
                lines.append(f"{section}.{key} = {value!r}")
        return "\n".join(lines) + "\n"


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        lowered = text.lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        return text


def parse_text(text: str, origin: str = "<config>") -> dict[str, object]:
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def _coerce(section: str, name: str, current, value):
    key = f"{section}.{name}"
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a sequence, got {value!r}")
        return tuple(value)
    return value


def apply_overrides(cfg: RunConfig, overrides: dict[str, object]) -> RunConfig:
    """Return a copy of ``cfg`` with dotted-key overrides applied."""
    parts = {name: dataclasses.asdict(getattr(cfg, name)) for name in SECTIONS}
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        known = {f.name for f in fields(SECTIONS[section])}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        parts[section][name] = _coerce(section, name, parts[section][name], value)
    built = {}
    for section, cls in SECTIONS.items():
        values = parts[section]
        for f in fields(cls):
            if isinstance(values.get(f.name), list):
                values[f.name] = tuple(values[f.name])
        built[section] = cls(**values)
    return RunConfig(**built)


def load_run_config(path=None, overrides: dict[str, object] | None = None, preset: str = "paper") -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = apply_overrides(RunConfig(), PRESETS[preset])
    if path is not None:
        with open(path) as fh:
            cfg = apply_overrides(cfg, parse_text(fh.read(), str(path)))
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg
