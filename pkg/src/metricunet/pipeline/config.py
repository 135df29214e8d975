"""Experiment configuration with desk and full-size profiles."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..data import SceneDistribution
from ..errors import ValidationError
from ..losses import LossConfig
from ..network import NetworkSpec, detection_spec
from ..sampling import SamplingConfig

PROFILES = ("desk", "paper")


@dataclass
class DatasetConfig:
    manifest: str | None = None
    n_volumes: int = 100
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: int = 0
    data_seed: int = 0
    scene: SceneDistribution = field(default_factory=SceneDistribution)
    body_threshold: float = 10.0
    landmark_threshold: float = 200.0

    def validate(self) -> None:
        if len(self.split) != 3 or min(self.split) < 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValidationError(f"split fractions must be three non-negative values summing to 1, got {self.split}")
        if self.n_volumes <= 0:
            raise ValidationError(f"n_volumes must be positive, got {self.n_volumes}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = self.scene.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DatasetConfig:
        d = dict(d)
        if "scene" in d:
            d["scene"] = SceneDistribution.from_dict(d["scene"])
        if "split" in d:
            d["split"] = tuple(d["split"])
        return cls(**d)


@dataclass
class TrainConfig:
    batch_size: int = 30
    base_lr: float = 0.01
    poly_power: float = 0.9
    max_iters: int = 3000
    seed: int = 0
    patches_per_image: int = 500
    val_interval: int = 250

    def validate(self) -> None:
        if self.batch_size <= 0 or self.max_iters <= 0 or self.patches_per_image <= 0:
            raise ValidationError("batch_size, max_iters and patches_per_image must be positive")
        if self.base_lr < 0:
            raise ValidationError(f"base_lr must be non-negative, got {self.base_lr}")
        if self.val_interval < 0:
            raise ValidationError("val_interval must be >= 0 (0 disables validation)")


@dataclass
class Stage1Config:
    downsample: int = 4
    patch_size: int = 64
    channels: int = 5
    max_filters: int = 32
    train: TrainConfig = field(default_factory=lambda: TrainConfig(max_iters=1000, val_interval=0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> Stage1Config:
        d = dict(d)
        if "train" in d:
            d["train"] = TrainConfig(**d["train"])
        return cls(**d)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    profile: str = "desk"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    region_size: int = 128
    patch_size: int = 64
    channels: int = 3

    @property
    def sampling(self) -> list[SamplingConfig]:
        return self.loss.strategies

    def detector_spec(self) -> NetworkSpec:
        base = NetworkSpec(
            in_channels=self.stage1.channels,
            encoder_channels=list(self.network.encoder_channels),
            decoder_channels=list(self.network.decoder_channels),
            head_channels=self.network.head_channels,
        )
        return detection_spec(base, self.stage1.max_filters)

    def validate(self) -> None:
        if self.profile not in PROFILES:
            raise ValidationError(f"unknown profile {self.profile!r}; expected one of {PROFILES}")
        self.dataset.validate()
        self.network.validate()
        self.loss.validate()
        self.train.validate()
        self.stage1.train.validate()
        if self.network.in_channels != self.channels:
            raise ValidationError(f"network expects {self.network.in_channels} input slices, config uses {self.channels}")
        if self.channels % 2 == 0 or self.stage1.channels % 2 == 0:
            raise ValidationError("slice-stack channel counts must be odd")
        if self.region_size < self.patch_size:
            raise ValidationError(f"region_size {self.region_size} is smaller than patch size {self.patch_size}")
        factor = 2**self.network.levels
        for name, size in (("patch_size", self.patch_size), ("region_size", self.region_size), ("stage1.patch_size", self.stage1.patch_size)):
            if size % factor:
                raise ValidationError(f"{name}={size} must be divisible by {factor}")
        if self.stage1.downsample < 1:
            raise ValidationError("stage1.downsample must be >= 1")

    def to_dict(self) -> dict:
        loss = self.loss.to_dict()
        sampling = loss.pop("strategies")
        return {
            "name": self.name,
            "profile": self.profile,
            "dataset": self.dataset.to_dict(),
            "network": self.network.to_dict(),
            "sampling": sampling,
            "loss": loss,
            "train": asdict(self.train),
            "stage1": self.stage1.to_dict(),
            "region_size": self.region_size,
            "patch_size": self.patch_size,
            "channels": self.channels,
        }

    @classmethod
    def from_dict(cls, d: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
        """Build a config from ``d``; keys absent from ``d`` keep ``base``'s values."""
        base = base or cls()
        merged = base.to_dict()
        for key, value in d.items():
            if key not in merged:
                raise ValidationError(f"unknown config key {key!r}")
            if isinstance(merged[key], dict) and isinstance(value, dict):
                merged[key] = _deep_merge(merged[key], value)
            else:
                merged[key] = value
        loss = dict(merged["loss"])
        loss["strategies"] = merged["sampling"]
        cfg = cls(
            name=merged["name"],
            profile=merged["profile"],
            dataset=DatasetConfig.from_dict(merged["dataset"]),
            network=NetworkSpec.from_dict(merged["network"]),
            loss=LossConfig.from_dict(loss),
            train=TrainConfig(**merged["train"]),
            stage1=Stage1Config.from_dict(merged["stage1"]),
            region_size=merged["region_size"],
            patch_size=merged["patch_size"],
            channels=merged["channels"],
        )
        cfg.validate()
        return cfg

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | Path, profile: str | None = None) -> ExperimentConfig:
        d = json.loads(Path(path).read_text())
        base = profile_config(profile or d.get("profile", "desk"))
        return cls.from_dict(d, base)


def _deep_merge(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _deep_merge(out[k], v) if isinstance(out.get(k), dict) and isinstance(v, dict) else v
    return out


def profile_config(profile: str = "desk") -> ExperimentConfig:
    """Defaults for a profile.

    ``desk`` shrinks every geometric size (and halves the network widths) so
    training runs on one CPU core; ``paper`` keeps full sizes.
    """
    if profile == "desk":
        cfg = ExperimentConfig(
            profile="desk",
            network=NetworkSpec(
                in_channels=3,
                encoder_channels=[16, 32, 64, 128],
                decoder_channels=[64, 32, 16],
                head_channels=16,
            ),
            train=TrainConfig(batch_size=16, base_lr=0.1, max_iters=3000, val_interval=250),
            stage1=Stage1Config(
                downsample=2, patch_size=32, channels=5, train=TrainConfig(batch_size=16, base_lr=0.1, max_iters=400, val_interval=0)
            ),
            region_size=48,
            patch_size=32,
        )
    elif profile == "paper":
        cfg = ExperimentConfig(
            profile="paper",
            dataset=DatasetConfig(scene=SceneDistribution().scaled(3.5)),
            network=NetworkSpec(),
            train=TrainConfig(batch_size=30, max_iters=3000, val_interval=250),
            stage1=Stage1Config(downsample=4, patch_size=64, channels=5),
            region_size=128,
            patch_size=64,
        )
    else:
        raise ValidationError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    cfg.validate()
    return cfg
