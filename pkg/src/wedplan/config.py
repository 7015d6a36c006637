"""Run configuration: one YAML file with a section per module.

Every section is optional; missing keys take the module defaults.  See
config.example.yaml at the repository root for an annotated example.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .autodecoder import TrainConfig
from .encoder import BaselineConfig, EncoderConfig
from .errors import ConfigError, VersionError
from .phantom import CameraConfig, PopulationConfig
from .positioning import PositioningConfig
from .refine import RefineConfig

FORMAT_VERSION = "1"


@dataclass(frozen=True)
class MetricsConfig:
    # a patient passes when the median relative WED error is below this
    iec_bound: float = 0.1

    def validate(self) -> None:
        if not 0 < self.iec_bound < 1:
            raise ConfigError("iec_bound must be in (0, 1)")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    format_version: str = FORMAT_VERSION
    # number of dataset records treated as depth/CT pairs for the
    # encoder, baseline and positioning trainers
    paired_n: int = 50
    population: PopulationConfig = field(default_factory=PopulationConfig)
    camera: CameraConfig = field(default_factory=CameraConfig)
    decoder: TrainConfig = field(default_factory=TrainConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    positioning: PositioningConfig = field(default_factory=PositioningConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, data: dict | None) -> "RunConfig":
        data = dict(data or {})
        sections = {
            "population": PopulationConfig.from_dict,
            "camera": CameraConfig.from_dict,
            "decoder": TrainConfig.from_dict,
            "encoder": EncoderConfig.from_dict,
            "baseline": BaselineConfig.from_dict,
            "positioning": PositioningConfig.from_dict,
            "refine": RefineConfig.from_dict,
            "metrics": lambda d: MetricsConfig(**d),
        }
        known = set(sections) | {"seed", "format_version", "paired_n"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        version = str(data.pop("format_version", FORMAT_VERSION))
        if version != FORMAT_VERSION:
            raise VersionError(f"config format version {version!r}, expected {FORMAT_VERSION!r}")
        kwargs = {"format_version": version}
        for key in ("seed", "paired_n"):
            if key in data:
                kwargs[key] = int(data.pop(key))
        for name, build in sections.items():
            if name in data:
                try:
                    kwargs[name] = build(data[name] or {})
                except TypeError as exc:
                    raise ConfigError(f"bad [{name}] section: {exc}") from exc
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.paired_n < 1:
            raise ConfigError("paired_n must be >= 1")
        self.population.validate()
        self.decoder.validate()
        self.encoder.validate()
        self.baseline.validate()
        self.positioning.validate()
        self.refine.validate()
        self.metrics.validate()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return RunConfig.from_dict(data)
