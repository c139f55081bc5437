"""DeepLab-V3+ over a ResNet encoder, optionally refined with CBAM.

The attention variant inserts CBAM twice: on the ASPP output (deep,
semantic) and on the reduced low-level skip (shallow, spatial).  Both
variants share module names, so the plain model's state dict is a strict
subset of the attention model's.
"""

import torch
from torch import nn
from torch.nn import functional as F
from torchvision import models as tv_models

from .attention import CBAM

ENCODERS = {
    # name -> (builder, low-level channels @ stride 4, deep channels @ stride 32)
    "resnet50": (tv_models.resnet50, 256, 2048),
    "resnet18": (tv_models.resnet18, 64, 512),
}
ENCODER_STRIDE = 32
LOW_LEVEL_STRIDE = 4


def init_head_weights(module):
    """Kaiming conv weights, unit BN scale, zero biases for decoder parts."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


class ResNetEncoder(nn.Module):
    """ResNet trunk exposing the stride-4 and stride-32 feature maps."""

    def __init__(self, name: str = "resnet50", weights: str = "none"):
        super().__init__()
        if name not in ENCODERS:
            raise ValueError(f"unknown encoder {name!r}, expected one of {sorted(ENCODERS)}")
        builder, self.low_channels, self.deep_channels = ENCODERS[name]
        # "imagenet" hits the torchvision weight cache or the network; any
        # failure should surface rather than silently fall back to random.
        net = builder(weights="IMAGENET1K_V1" if weights == "imagenet" else None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4

    def forward(self, x):
        low = self.layer1(self.stem(x))
        deep = self.layer4(self.layer3(self.layer2(low)))
        return low, deep


class ASPPConv(nn.Sequential):
    """3x3 convolution with spaced taps; dilation 1 is a plain 3x3 conv."""

    def __init__(self, in_channels, out_channels, dilation):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3,
                      padding=dilation, dilation=dilation, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


class ASPP(nn.Module):
    """Atrous spatial pyramid pooling: 1x1, three dilated 3x3, image pool."""

    def __init__(self, in_channels, out_channels=256, dilations=(6, 12, 18)):
        super().__init__()
        point = nn.Sequential(
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )
        self.branches = nn.ModuleList(
            [point] + [ASPPConv(in_channels, out_channels, d) for d in dilations]
        )
        # no BN here: the pooled map is 1x1, which train mode with batch
        # size 1 would reject
        self.image_pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_channels, out_channels, 1, bias=True),
            nn.ReLU(inplace=True),
        )
        self.project = nn.Sequential(
            nn.Conv2d(out_channels * (len(dilations) + 2), out_channels, 1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        feats = [branch(x) for branch in self.branches]
        pooled = self.image_pool(x)
        feats.append(
            F.interpolate(pooled, size=x.shape[-2:], mode="bilinear", align_corners=False)
        )
        return self.project(torch.cat(feats, dim=1))


class DeepLabV3Plus(nn.Module):
    """Encoder-decoder segmentation head with per-class sigmoid outputs.

    forward() returns probabilities (the lesion classes are not mutually
    exclusive); forward_logits() feeds the losses.
    """

    def __init__(
        self,
        num_classes: int = 4,
        in_channels: int = 3,
        encoder: str = "resnet50",
        encoder_weights: str = "none",
        use_cbam: bool = False,
        cbam_reduction: int = 16,
        aspp_dilations=(6, 12, 18),
        decoder_channels: int = 256,
        low_level_channels: int = 48,
    ):
        super().__init__()
        if in_channels != 3:
            raise ValueError("ResNet encoders expect 3-channel input")
        if use_cbam:
            for channels in (decoder_channels, low_level_channels):
                if channels % cbam_reduction:
                    raise ValueError(
                        f"cbam_reduction={cbam_reduction} does not divide the "
                        f"{channels}-channel attention placement"
                    )
        self.num_classes = num_classes
        self.use_cbam = use_cbam
        self.encoder = ResNetEncoder(encoder, encoder_weights)
        self.aspp = ASPP(self.encoder.deep_channels, decoder_channels, aspp_dilations)
        self.low_reduce = nn.Sequential(
            nn.Conv2d(self.encoder.low_channels, low_level_channels, 1, bias=False),
            nn.BatchNorm2d(low_level_channels),
            nn.ReLU(inplace=True),
        )
        if use_cbam:
            self.aspp_cbam = CBAM(decoder_channels, reduction=cbam_reduction)
            self.low_cbam = CBAM(low_level_channels, reduction=cbam_reduction)
        self.decoder = nn.Sequential(
            nn.Conv2d(
                decoder_channels + low_level_channels, decoder_channels, 3,
                padding=1, bias=False,
            ),
            nn.BatchNorm2d(decoder_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(decoder_channels, decoder_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(decoder_channels),
            nn.ReLU(inplace=True),
        )
        self.classifier = nn.Conv2d(decoder_channels, num_classes, 1)

        init_head_weights(self.aspp)
        init_head_weights(self.low_reduce)
        if use_cbam:
            init_head_weights(self.aspp_cbam)
            init_head_weights(self.low_cbam)
        init_head_weights(self.decoder)
        init_head_weights(self.classifier)

    def set_attention_enabled(self, enabled: bool):
        """Flip CBAM blocks between active and identity (ablation runs)."""
        for m in self.modules():
            if isinstance(m, CBAM):
                m.enabled = enabled

    def _check_input(self, x):
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected (B, 3, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % ENCODER_STRIDE or w % ENCODER_STRIDE:
            raise ValueError(
                f"input size {h}x{w} must be divisible by {ENCODER_STRIDE}"
            )

    def forward_logits(self, x):
        self._check_input(x)
        low, deep = self.encoder(x)
        z = self.aspp(deep)
        if self.use_cbam:
            z = self.aspp_cbam(z)
        skip = self.low_reduce(low)
        if self.use_cbam:
            skip = self.low_cbam(skip)
        z = F.interpolate(z, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        z = self.decoder(torch.cat([z, skip], dim=1))
        logits = self.classifier(z)
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)

    def forward(self, x):
        return torch.sigmoid(self.forward_logits(x))
