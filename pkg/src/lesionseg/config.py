"""YAML run configuration: model / loss / augment / train / data sections.

Every section is validated strictly; unknown keys anywhere are errors so a
typo cannot silently fall back to a default.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .augment import AugmentationConfig
from .dataset import SPLITS
from .losses import LossConfig
from .models import ModelConfig
from .trainer import TrainConfig

SECTIONS = ("name", "model", "loss", "augment", "train", "data")


@dataclass
class DataConfig:
    root: str = ""
    train_split: str = "train"
    val_split: str = "val"
    test_split: str = "test"

    def validate(self):
        for name in ("train_split", "val_split", "test_split"):
            if getattr(self, name) not in SPLITS:
                raise ValueError(
                    f"{name} must be one of {SPLITS}, got {getattr(self, name)!r}"
                )
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "DataConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown data config keys: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass
class RunConfig:
    name: str = "run"
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self):
        self.model.validate()
        self.loss.validate()
        self.augment.validate()
        self.train.validate()
        self.data.validate()
        if self.model.input_size != self.augment.target_size[0]:
            raise ValueError(
                f"model.input_size={self.model.input_size} disagrees with "
                f"augment.target_size={self.augment.target_size}"
            )
        return self

    def to_dict(self) -> dict:
        raw = {
            "name": self.name,
            "model": asdict(self.model),
            "loss": asdict(self.loss),
            "augment": asdict(self.augment),
            "train": asdict(self.train),
            "data": asdict(self.data),
        }
        # json round-trip turns tuples into lists, keeping the dict
        # serializable by YAML and by checkpoint sidecars alike
        return json.loads(json.dumps(raw))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(
            name=data.get("name", "run"),
            model=ModelConfig.from_dict(data.get("model", {})),
            loss=LossConfig.from_dict(data.get("loss", {})),
            augment=AugmentationConfig.from_dict(data.get("augment", {})),
            train=TrainConfig.from_dict(data.get("train", {})),
            data=DataConfig.from_dict(data.get("data", {})),
        ).validate()


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise
    except yaml.YAMLError as exc:
        raise ValueError(f"cannot parse config {path}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValueError(f"config {path} must be a mapping of sections")
    return RunConfig.from_dict(data)


def save_run_config(config: RunConfig, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
