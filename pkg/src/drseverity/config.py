"""Pipeline configuration: one TOML file, one section per stage.

Every key has a default, so a minimal file only names dataset paths. Unknown
sections or keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .classifier import ClassifierSpec, ClfTrainConfig
from .cleaner import CleanConfig
from .fusion import FusionSpec, FusionTrainConfig
from .preprocess import AugmentationPolicy
from .segnet import SegNetworkSpec, SegTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    drive_root: Optional[str] = None
    stare_root: Optional[str] = None
    chase_root: Optional[str] = None
    aptos_root: Optional[str] = None
    aptos_labels: Optional[str] = None
    drive_annotator: int = 1
    stare_annotator: int = 1
    chase_annotator: int = 1


@dataclass
class PreprocessConfig:
    patch_size: int = 256
    per_image: int = 68
    crop_threshold: float = 7.0
    sigma_fraction: float = 1 / 30
    noise_std: float = 0.0


@dataclass
class SegmentConfig:
    checkpoint: Optional[str] = None  # load this segmenter instead of training one
    threshold: float = 0.5
    tile_stride: int = 128


@dataclass
class SplitConfig:
    strategy: str = "STRATIFIED_BALANCED"
    test_size: int = 1000
    val_fraction: float = 0.2


@dataclass
class MetricsConfig:
    decimals: int = 6


@dataclass
class RunConfig:
    seed: int = 0
    output_root: str = "runs"
    cache: str = "readwrite"  # "readwrite" | "off"
    cache_root: Optional[str] = None


SECTIONS: dict[str, type] = {
    "data": DataConfig,
    "preprocess": PreprocessConfig,
    "segnet": SegNetworkSpec,
    "segtrain": SegTrainConfig,
    "segment": SegmentConfig,
    "cleaner": CleanConfig,
    "classifier": ClassifierSpec,
    "clftrain": ClfTrainConfig,
    "augment": AugmentationPolicy,
    "fusion": FusionSpec,
    "fusiontrain": FusionTrainConfig,
    "split": SplitConfig,
    "metrics": MetricsConfig,
    "run": RunConfig,
}
# keys that exist on the dataclass but are not user configuration
_HIDDEN = {"segnet": {"wiring"}, "clftrain": {"augmentation", "seed"}, "segtrain": {"seed"},
           "fusiontrain": {"seed"}, "augment": {"seed"}}
_SEEDED = ("segtrain", "clftrain", "fusiontrain", "augment")


def _fields(name: str) -> list[str]:
    return [f.name for f in dataclasses.fields(SECTIONS[name]) if f.name not in _HIDDEN.get(name, ())]


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    segnet: SegNetworkSpec = field(default_factory=SegNetworkSpec)
    segtrain: SegTrainConfig = field(default_factory=SegTrainConfig)
    segment: SegmentConfig = field(default_factory=SegmentConfig)
    cleaner: CleanConfig = field(default_factory=CleanConfig)
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    clftrain: ClfTrainConfig = field(default_factory=ClfTrainConfig)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    fusion: FusionSpec = field(default_factory=FusionSpec)
    fusiontrain: FusionTrainConfig = field(default_factory=FusionTrainConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        self.apply_seed()

    def apply_seed(self) -> None:
        """Propagate the global seed and the augmentation policy into stage configs."""
        for name in _SEEDED:
            getattr(self, name).seed = self.run.seed
        self.clftrain.augmentation = self.augment

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s) {sorted(unknown)}; valid: {sorted(SECTIONS)}")
        parts = {}
        for name, klass in SECTIONS.items():
            values = raw.get(name, {})
            if not isinstance(values, dict):
                raise ConfigError(f"[{name}] must be a table")
            allowed = _fields(name)
            bad = set(values) - set(allowed)
            if bad:
                raise ConfigError(f"unknown key(s) {sorted(bad)} in [{name}]; valid: {sorted(allowed)}")
            kwargs = {k: tuple(v) if isinstance(v, list) and name in ("augment", "fusion") else v
                      for k, v in values.items()}
            try:
                parts[name] = klass(**kwargs)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from exc
        return cls(**parts)

    @classmethod
    def from_toml(cls, text: str) -> "PipelineConfig":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls.from_toml(text)
        cfg.resolve_paths(Path(path).parent)
        return cfg

    def resolve_paths(self, base: Path) -> None:
        """Make relative dataset/output paths relative to the config file's directory."""
        for name in ("drive_root", "stare_root", "chase_root", "aptos_root", "aptos_labels"):
            v = getattr(self.data, name)
            if v is not None and not Path(v).is_absolute():
                setattr(self.data, name, str(base / v))
        if not Path(self.run.output_root).is_absolute():
            self.run.output_root = str(base / self.run.output_root)
        for obj, key in ((self.segment, "checkpoint"), (self.run, "cache_root")):
            v = getattr(obj, key)
            if v is not None and not Path(v).is_absolute():
                setattr(obj, key, str(base / v))

    def section(self, name: str) -> dict:
        obj = getattr(self, name)
        return {k: _plain(getattr(obj, k)) for k in _fields(name)}

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            sec = {k: v for k, v in self.section(name).items() if v is not None}
            out[name] = sec
        return out

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def digest(self, *names: str) -> str:
        """Stable hash of the named sections (all sections when none are given)."""
        payload = {n: self.section(n) for n in (names or SECTIONS)}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()

    def validate_inputs(self, need_vessels: bool = True, need_aptos: bool = True) -> None:
        """Check that every dataset path the run needs exists; raises ConfigError."""
        d = self.data
        if need_vessels and self.segment.checkpoint is None:
            roots = [d.drive_root, d.stare_root, d.chase_root]
            if not any(roots):
                raise ConfigError("no vessel dataset configured: set data.drive_root, data.stare_root, "
                                  "data.chase_root or segment.checkpoint")
            for key, v in (("drive_root", d.drive_root), ("stare_root", d.stare_root),
                           ("chase_root", d.chase_root)):
                if v is not None and not Path(v).is_dir():
                    raise ConfigError(f"data.{key} does not exist: {v}")
        if self.segment.checkpoint is not None and not Path(self.segment.checkpoint).is_file():
            raise ConfigError(f"segment.checkpoint does not exist: {self.segment.checkpoint}")
        if need_aptos:
            if d.aptos_root is None or d.aptos_labels is None:
                raise ConfigError("data.aptos_root and data.aptos_labels are required")
            if not Path(d.aptos_root).is_dir():
                raise ConfigError(f"data.aptos_root does not exist: {d.aptos_root}")
            if not Path(d.aptos_labels).is_file():
                raise ConfigError(f"data.aptos_labels does not exist: {d.aptos_labels}")


def _plain(v: Any) -> Any:
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, list):
        return [_plain(x) for x in v]
    return v
