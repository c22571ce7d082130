"""Experiment configuration: nested frozen dataclasses with a YAML round trip.

Schema (version 1), every section optional in the file::

    version: 1
    seed: 0                  # data generation, split, training and explain noise
    output: runs/default
    dataset:   {kind, resolution, n_per_class, background_noise, gaussian_shape,
                gaussian_offset, gaussian_variance, gaussian_accuracy, folder,
                split, wavelet}
    model:     {source, checkpoint, use_ema, base_resolution, image_resolution,
                denoiser: {base_channels, depth, embedding_dim, lambda_embedding, groups}}
    train:     TrainConfig fields
    classification: {N, rule, seeds, N_list, batch_size, split, tie_break_by_error}
    uncertainty: {fractions, positive_class}
    explain:   {n_images, source, target, verify_steps, guidance: GuidanceConfig fields}
"""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from ..classifier import RULES
from ..denoiser import GaussianClassModel, TinyDenoiserSpec
from ..explain import GuidanceConfig
from ..schedule import NoiseSchedule
from ..training import TrainConfig

CONFIG_VERSION = 1
DATASET_KINDS = ("shapes", "gaussian", "folder")
MODEL_SOURCES = ("checkpoint", "oracle")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "shapes"
    resolution: int = 16
    n_per_class: int = 2000
    background_noise: float = 0.15
    gaussian_shape: tuple[int, ...] = (1, 8, 8)
    gaussian_offset: float = 0.5
    gaussian_variance: float | None = None  # None: derived from gaussian_accuracy
    gaussian_accuracy: float = 0.95
    folder: str | None = None
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    wavelet: bool = True

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"dataset.kind must be one of {DATASET_KINDS}")
        if self.kind == "folder" and not self.folder:
            raise ConfigError("dataset.folder is required for kind 'folder'")
        if self.n_per_class < 1:
            raise ConfigError("dataset.n_per_class must be >= 1")

    def gaussian_model(self) -> GaussianClassModel:
        var = self.gaussian_variance
        if var is None:
            var = GaussianClassModel.variance_for_accuracy(
                self.gaussian_accuracy, self.gaussian_shape, self.gaussian_offset)
        return GaussianClassModel.symmetric_pair(self.gaussian_shape, self.gaussian_offset, var)


@dataclass(frozen=True)
class ModelConfig:
    source: str = "checkpoint"
    checkpoint: str | None = None  # default: <out>/train/checkpoint.pt
    use_ema: bool = True
    base_resolution: int = 64
    image_resolution: int = 16
    denoiser: TinyDenoiserSpec = field(default_factory=TinyDenoiserSpec)

    def __post_init__(self):
        if self.source not in MODEL_SOURCES:
            raise ConfigError(f"model.source must be one of {MODEL_SOURCES}")

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(base_resolution=self.base_resolution,
                             image_resolution=self.image_resolution)


@dataclass(frozen=True)
class ClassificationConfig:
    N: int = 501
    rule: str = "majority"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    N_list: tuple[int, ...] = (11, 51, 201, 501)
    batch_size: int = 50
    split: str = "test"
    tie_break_by_error: bool = False

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"classification.rule must be one of {RULES}")
        if self.N < 1 or not self.seeds or any(n < 1 for n in self.N_list):
            raise ConfigError("classification needs N >= 1, at least one seed and positive N_list")
        if self.split not in ("train", "val", "test"):
            raise ConfigError("classification.split must be train, val or test")
        if self.batch_size < 1:
            raise ConfigError("classification.batch_size must be >= 1")


@dataclass(frozen=True)
class UncertaintyConfig:
    fractions: tuple[float, ...] = (1.0, 0.9, 0.8, 0.7, 0.6, 0.55, 0.5, 0.4, 0.3, 0.2, 0.1)
    positive_class: int = 1

    def __post_init__(self):
        if not self.fractions or any(not 0 < f <= 1 for f in self.fractions):
            raise ConfigError("uncertainty.fractions must lie in (0, 1]")


@dataclass(frozen=True)
class ExplainConfig:
    n_images: int = 10
    source: int = 0
    target: int = 1
    verify_steps: int = 101
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    output: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    classification: ClassificationConfig = field(default_factory=ClassificationConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}; expected {CONFIG_VERSION}")
        if self.model.source == "oracle" and self.dataset.kind != "gaussian":
            raise ConfigError("the oracle model needs a gaussian dataset")
        if self.model.source == "oracle" and self.dataset.wavelet:
            raise ConfigError("the oracle model works in pixel space; set dataset.wavelet: false")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.to_yaml())

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        data = dict(data or {})
        # the training seed follows the experiment seed unless set explicitly
        if "seed" in data and isinstance(data.get("train", {}), dict) and "seed" not in data.get("train", {}):
            data["train"] = {**data.get("train", {}), "seed": data["seed"]}
        try:
            return _build(cls, data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            data = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)


_NESTED = {
    "dataset": DatasetConfig, "model": ModelConfig, "train": TrainConfig,
    "classification": ClassificationConfig, "uncertainty": UncertaintyConfig,
    "explain": ExplainConfig, "denoiser": TinyDenoiserSpec, "guidance": GuidanceConfig,
}


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"section for {cls.__name__} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and isinstance(value, dict):
            value = _build(_NESTED[key], value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)
