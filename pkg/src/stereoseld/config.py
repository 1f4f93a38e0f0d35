"""JSON run configuration with four sections (model, train, features, data),
strict key checking, and ``section.key=value`` command-line overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .features import MelFilterbank, StftConfig
from .model import EncoderConfig, SeldModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad, unknown, or missing configuration keys."""


@dataclass
class FeatureSettings:
    sample_rate: int = 24000
    win_length: int = 960
    hop_length: int = 480
    fft_size: int = 1024
    n_mels: int = 64
    fmin: float = 50.0
    fmax: float = 12000.0

    def stft_config(self) -> StftConfig:
        return StftConfig(sample_rate=self.sample_rate, win_length=self.win_length,
                          hop_length=self.hop_length, fft_size=self.fft_size)

    def filterbank(self) -> MelFilterbank:
        return MelFilterbank(n_mels=self.n_mels, fmin=self.fmin, fmax=self.fmax,
                             cfg=self.stft_config())


@dataclass
class DataSettings:
    distance_unit: str = "m"

    def __post_init__(self) -> None:
        if self.distance_unit not in ("m", "cm"):
            raise ConfigError(f"data.distance_unit must be 'm' or 'cm', "
                              f"got {self.distance_unit!r}")


@dataclass
class AppConfig:
    model: SeldModelConfig = field(default_factory=SeldModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    features: FeatureSettings = field(default_factory=FeatureSettings)
    data: DataSettings = field(default_factory=DataSettings)


_SECTION_TYPES = {
    "model": SeldModelConfig,
    "train": TrainConfig,
    "features": FeatureSettings,
    "data": DataSettings,
}


def _build_section(section: str, cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key '{section}.{sorted(unknown)[0]}'")
    if section == "model" and "encoder" in values:
        enc = values["encoder"]
        if isinstance(enc, dict):
            enc_known = {f.name for f in fields(EncoderConfig)}
            bad = set(enc) - enc_known
            if bad:
                raise ConfigError(f"unknown key 'model.encoder.{sorted(bad)[0]}'")
            values = dict(values)
            values["encoder"] = EncoderConfig(**enc)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad section '{section}': {exc}") from exc


def load_config(path, overrides: list[str] | None = None) -> AppConfig:
    """Parse the config file, apply overrides, and validate every key.

    All four sections must be present (possibly empty). Overrides take the
    form ``section.key=value`` with JSON-encoded values (bare strings pass
    through).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown section '{sorted(unknown)[0]}'")
    missing = set(_SECTION_TYPES) - set(raw)
    if missing:
        raise ConfigError(f"missing section '{sorted(missing)[0]}'")

    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _SECTION_TYPES:
            raise ConfigError(f"unknown section '{section}'")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        raw[section][key] = parsed

    built = {name: _build_section(name, cls, raw[name])
             for name, cls in _SECTION_TYPES.items()}
    try:
        return AppConfig(**built)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def default_config_dict() -> dict:
    """Fully populated defaults, suitable for writing an example file."""
    cfg = AppConfig()
    out = {}
    for name in _SECTION_TYPES:
        section = getattr(cfg, name)
        d = dataclasses.asdict(section)
        out[name] = d
    return out
