"""The four segmentation loss terms and their weighted combination.

All terms take raw logits (Dice takes probabilities) shaped (C, H, W) or
(B, C, H, W) with binary targets of the same shape, and reduce to a scalar
by averaging over every pixel (Dice: per class, then across classes).
"""

from dataclasses import dataclass, asdict

import torch
import torch.nn.functional as F

SOBEL_X = torch.tensor(
    [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]
)
SOBEL_Y = SOBEL_X.T.contiguous()

BOUNDARY_MODES = ("as_written", "emphasize")


@dataclass
class LossConfig:
    w_dice: float = 1.0
    w_bce: float = 0.5
    w_focal: float = 1.0
    w_boundary: float = 0.5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    boundary_theta: float = 1.5
    eps: float = 1e-6
    # "as_written" down-weights boundary pixels with exp(-theta*|grad|);
    # "emphasize" up-weights them with exp(+theta*|grad|), mean-normalized.
    boundary_weight_mode: str = "as_written"

    def validate(self):
        for name in ("w_dice", "w_bce", "w_focal", "w_boundary"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError(f"focal_alpha must be in (0, 1), got {self.focal_alpha}")
        if self.focal_gamma < 0:
            raise ValueError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.boundary_weight_mode not in BOUNDARY_MODES:
            raise ValueError(
                f"boundary_weight_mode must be one of {BOUNDARY_MODES}, "
                f"got {self.boundary_weight_mode!r}"
            )
        return self

    @classmethod
    def from_dict(cls, data):
        known = set(asdict(cls()))
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**data).validate()


@dataclass
class LossBreakdown:
    total: torch.Tensor
    dice: torch.Tensor
    bce: torch.Tensor
    focal: torch.Tensor
    boundary: torch.Tensor

    def to_floats(self):
        # no asdict here: it deepcopies, which graph-attached tensors reject
        return {
            "total": float(self.total.detach()),
            "dice": float(self.dice.detach()),
            "bce": float(self.bce.detach()),
            "focal": float(self.focal.detach()),
            "boundary": float(self.boundary.detach()),
        }


def _check_shapes(logits, targets):
    if logits.shape != targets.shape:
        raise ValueError(
            f"logits/targets shape mismatch: {tuple(logits.shape)} vs "
            f"{tuple(targets.shape)}"
        )


def bce_loss(logits, targets):
    """Mean binary cross-entropy over all pixels, in stable logit form."""
    _check_shapes(logits, targets)
    return F.binary_cross_entropy_with_logits(logits, targets.to(logits.dtype))


def focal_loss(logits, targets, alpha=0.25, gamma=2.0):
    """Mean of -alpha_t * (1 - p_t)^gamma * log(p_t) over all pixels."""
    _check_shapes(logits, targets)
    targets = targets.to(logits.dtype)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p_t = torch.exp(-ce)
    alpha_t = alpha * targets + (1.0 - alpha) * (1.0 - targets)
    return (alpha_t * (1.0 - p_t) ** gamma * ce).mean()


def dice_loss(probs, targets, eps=1e-6):
    """1 - soft Dice, computed per class then averaged across classes."""
    _check_shapes(probs, targets)
    targets = targets.to(probs.dtype)
    class_dim = 0 if probs.dim() == 3 else 1
    reduce_dims = [d for d in range(probs.dim()) if d != class_dim]
    intersection = (probs * targets).sum(dim=reduce_dims)
    cardinality = probs.sum(dim=reduce_dims) + targets.sum(dim=reduce_dims)
    dice = (2.0 * intersection + eps) / (cardinality + eps)
    return (1.0 - dice).mean()


def target_gradient_magnitude(targets, eps=1e-6):
    """sqrt((Sx*T)^2 + (Sy*T)^2 + eps) with 3x3 Sobel, replicate borders."""
    squeeze = targets.dim() == 3
    t = targets.unsqueeze(0) if squeeze else targets
    b, c, h, w = t.shape
    flat = t.reshape(b * c, 1, h, w).to(torch.float32 if not t.is_floating_point() else t.dtype)
    flat = F.pad(flat, (1, 1, 1, 1), mode="replicate")
    kx = SOBEL_X.to(flat.dtype).to(flat.device).view(1, 1, 3, 3)
    ky = SOBEL_Y.to(flat.dtype).to(flat.device).view(1, 1, 3, 3)
    gx = F.conv2d(flat, kx)
    gy = F.conv2d(flat, ky)
    mag = torch.sqrt(gx ** 2 + gy ** 2 + eps).reshape(b, c, h, w)
    return mag.squeeze(0) if squeeze else mag


def boundary_loss(logits, targets, theta=1.5, eps=1e-6, mode="as_written"):
    """Per-pixel BCE re-weighted by the target's Sobel gradient magnitude."""
    _check_shapes(logits, targets)
    if mode not in BOUNDARY_MODES:
        raise ValueError(f"unknown boundary mode {mode!r}")
    targets = targets.to(logits.dtype)
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    grad_mag = target_gradient_magnitude(targets, eps)
    if mode == "as_written":
        weight = torch.exp(-theta * grad_mag)
    else:
        weight = torch.exp(theta * grad_mag)
        weight = weight / weight.mean()
    return (weight * ce).mean()


def combined_loss(logits, targets, config):
    """Weighted sum of the four terms; Dice gets sigmoid(logits) internally."""
    _check_shapes(logits, targets)
    dice = dice_loss(torch.sigmoid(logits), targets, config.eps)
    bce = bce_loss(logits, targets)
    focal = focal_loss(logits, targets, config.focal_alpha, config.focal_gamma)
    boundary = boundary_loss(
        logits, targets, config.boundary_theta, config.eps,
        config.boundary_weight_mode,
    )
    total = (
        config.w_dice * dice
        + config.w_bce * bce
        + config.w_focal * focal
        + config.w_boundary * boundary
    )
    return LossBreakdown(total=total, dice=dice, bce=bce, focal=focal, boundary=boundary)
