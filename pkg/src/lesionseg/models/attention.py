"""Attention blocks: CBAM (channel + spatial) and additive skip gates."""

import torch
from torch import nn
from torch.nn import functional as F


class ChannelAttention(nn.Module):
    """Channel weights from a shared C -> C/r -> C MLP over avg and max pools."""

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, hidden, kernel_size=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, channels, kernel_size=1),
        )

    def forward(self, x):
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return torch.sigmoid(avg + mx)


class SpatialAttention(nn.Module):
    """Spatial weights from a 7x7 conv over channel-wise mean and max maps."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def forward(self, x):
        pooled = torch.cat(
            [x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1
        )
        return torch.sigmoid(self.conv(pooled))


class CBAM(nn.Module):
    """Sequential channel-then-spatial refinement of a feature map.

    `enabled` turns the block into an identity without touching its
    parameters, so an attention model can be run as its plain ablation
    while keeping the same state dict.
    """

    def __init__(self, channels: int, reduction: int = 16, spatial_kernel: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(spatial_kernel)
        self.enabled = True

    def forward(self, x):
        if not self.enabled:
            return x
        x = x * self.channel(x)
        x = x * self.spatial(x)
        return x


class AttentionGate(nn.Module):
    """Additive attention gate over a skip connection.

    alpha = sigmoid(psi(relu(W_x x + W_g g + b_g)) + b_psi), result alpha * x.
    The gating signal g may be coarser than x; its projection is upsampled.
    """

    def __init__(self, x_channels: int, gating_channels: int, inter_channels: int = 0):
        super().__init__()
        inter = inter_channels or max(x_channels // 2, 1)
        self.w_x = nn.Conv2d(x_channels, inter, kernel_size=1, bias=False)
        self.w_g = nn.Conv2d(gating_channels, inter, kernel_size=1, bias=True)
        self.psi = nn.Conv2d(inter, 1, kernel_size=1, bias=True)

    def gate_map(self, x, g):
        theta = self.w_x(x)
        phi = self.w_g(g)
        if phi.shape[-2:] != theta.shape[-2:]:
            phi = F.interpolate(
                phi, size=theta.shape[-2:], mode="bilinear", align_corners=False
            )
        return torch.sigmoid(self.psi(F.relu(theta + phi)))

    def forward(self, x, g):
        return x * self.gate_map(x, g)
