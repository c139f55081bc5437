"""U-Net and its gated variant (attention gates on every skip connection)."""

import torch
from torch import nn

from .attention import AttentionGate
from .deeplab import init_head_weights

DOWNSAMPLE_FACTOR = 16  # four 2x poolings


class DoubleConv(nn.Sequential):
    def __init__(self, in_channels, out_channels):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )


class UNet(nn.Module):
    """Classic encoder-decoder with skip concatenation and sigmoid outputs.

    base_width=64 gives the 64/128/256/512 ladder with a 1024-channel
    bottleneck; smaller widths keep unit tests cheap.  With use_gates each
    skip is rescaled by an additive attention gate driven by the coarser
    decoder feature before its upconvolution.
    """

    def __init__(
        self,
        num_classes: int = 4,
        in_channels: int = 3,
        base_width: int = 64,
        use_gates: bool = False,
    ):
        super().__init__()
        if base_width < 2:
            raise ValueError("base_width must be >= 2")
        widths = [base_width * f for f in (1, 2, 4, 8)]
        bottleneck = base_width * 16
        self.num_classes = num_classes
        self.use_gates = use_gates

        self.pool = nn.MaxPool2d(2)
        self.enc_blocks = nn.ModuleList()
        ch = in_channels
        for w in widths:
            self.enc_blocks.append(DoubleConv(ch, w))
            ch = w
        self.bottleneck = DoubleConv(widths[-1], bottleneck)

        self.upconvs = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        ch = bottleneck
        for w in reversed(widths):
            self.upconvs.append(nn.ConvTranspose2d(ch, w, kernel_size=2, stride=2))
            self.dec_blocks.append(DoubleConv(w * 2, w))
            ch = w
        if use_gates:
            self.gates = nn.ModuleList(
                AttentionGate(x_channels=w, gating_channels=w * 2)
                for w in reversed(widths)
            )
        self.classifier = nn.Conv2d(widths[0], num_classes, 1)
        init_head_weights(self)

    def _check_input(self, x):
        if x.dim() != 4:
            raise ValueError(f"expected (B, C, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        if h % DOWNSAMPLE_FACTOR or w % DOWNSAMPLE_FACTOR:
            raise ValueError(
                f"input size {h}x{w} must be divisible by {DOWNSAMPLE_FACTOR}"
            )

    def forward_logits(self, x):
        self._check_input(x)
        skips = []
        for block in self.enc_blocks:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for i, (up, block) in enumerate(zip(self.upconvs, self.dec_blocks)):
            skip = skips[-1 - i]
            if self.use_gates:
                skip = self.gates[i](skip, x)
            x = up(x)
            x = block(torch.cat([skip, x], dim=1))
        return self.classifier(x)

    def forward(self, x):
        return torch.sigmoid(self.forward_logits(x))


class GatedUNet(UNet):
    def __init__(self, num_classes: int = 4, in_channels: int = 3, base_width: int = 64):
        super().__init__(num_classes, in_channels, base_width, use_gates=True)
