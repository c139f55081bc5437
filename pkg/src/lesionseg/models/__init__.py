"""Model zoo: the attention DeepLab plus its three comparison baselines."""

import logging
from dataclasses import dataclass, fields

from .attention import CBAM, AttentionGate, ChannelAttention, SpatialAttention
from .deeplab import ASPP, ASPPConv, DeepLabV3Plus, ResNetEncoder
from .unet import GatedUNet, UNet

log = logging.getLogger(__name__)

MODEL_ARCHS = ("attention_deeplab", "deeplab_v3plus", "unet", "gated_unet")
ENCODER_WEIGHTS = ("none", "imagenet")
DEEPLAB_ARCHS = ("attention_deeplab", "deeplab_v3plus")
CBAM_CHANNELS = (256, 48)  # high-level (post-ASPP) and low-level placements


@dataclass
class ModelConfig:
    arch: str = "attention_deeplab"
    num_classes: int = 4
    in_channels: int = 3
    encoder: str = "resnet50"        # deeplab family only
    encoder_weights: str = "none"    # "imagenet" requires the weight cache
    cbam_reduction: int = 16
    aspp_rates: tuple = (6, 12, 18)
    base_width: int = 64             # unet family only
    input_size: int = 512            # expected square side, recorded for checks

    def validate(self):
        if self.arch not in MODEL_ARCHS:
            raise ValueError(f"arch must be one of {MODEL_ARCHS}, got {self.arch!r}")
        if self.encoder_weights not in ENCODER_WEIGHTS:
            raise ValueError(
                f"encoder_weights must be one of {ENCODER_WEIGHTS}, "
                f"got {self.encoder_weights!r}"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.cbam_reduction < 1:
            raise ValueError("cbam_reduction must be >= 1")
        if self.arch == "attention_deeplab":
            for channels in CBAM_CHANNELS:
                if channels % self.cbam_reduction:
                    raise ValueError(
                        f"cbam_reduction={self.cbam_reduction} does not divide "
                        f"the {channels}-channel attention placement"
                    )
        if len(self.aspp_rates) != 3 or any(r < 1 for r in self.aspp_rates):
            raise ValueError(f"aspp_rates must be three positive rates, got {self.aspp_rates}")
        stride = 32 if self.arch in DEEPLAB_ARCHS else 16
        if self.input_size < stride or self.input_size % stride:
            raise ValueError(
                f"input_size must be a positive multiple of {stride} for {self.arch}"
            )
        return self

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        if "aspp_rates" in data:
            data = {**data, "aspp_rates": tuple(data["aspp_rates"])}
        return cls(**data).validate()


def build_model(config: ModelConfig):
    config.validate()
    if config.arch in DEEPLAB_ARCHS:
        model = DeepLabV3Plus(
            num_classes=config.num_classes,
            in_channels=config.in_channels,
            encoder=config.encoder,
            encoder_weights=config.encoder_weights,
            use_cbam=config.arch == "attention_deeplab",
            cbam_reduction=config.cbam_reduction,
            aspp_dilations=config.aspp_rates,
        )
    elif config.arch == "unet":
        model = UNet(config.num_classes, config.in_channels, config.base_width)
    else:
        model = GatedUNet(config.num_classes, config.in_channels, config.base_width)
    log.info("%s: %d trainable parameters", config.arch, count_parameters(model))
    return model


def count_parameters(model, trainable_only: bool = True) -> int:
    return sum(
        p.numel() for p in model.parameters()
        if p.requires_grad or not trainable_only
    )


__all__ = [
    "ASPP",
    "ASPPConv",
    "AttentionGate",
    "CBAM",
    "ChannelAttention",
    "DeepLabV3Plus",
    "GatedUNet",
    "ModelConfig",
    "MODEL_ARCHS",
    "ResNetEncoder",
    "SpatialAttention",
    "UNet",
    "build_model",
    "count_parameters",
]
