import math

import pytest
import torch

from lesionseg.losses import (
    LossConfig,
    bce_loss,
    boundary_loss,
    combined_loss,
    dice_loss,
    focal_loss,
    target_gradient_magnitude,
)


def rand_pair(shape=(1, 4, 6, 6), seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(shape, generator=g, dtype=dtype)
    targets = (torch.rand(shape, generator=g, dtype=dtype) > 0.5).to(dtype)
    return logits, targets


class TestConfig:
    def test_reference_weights(self):
        cfg = LossConfig().validate()
        assert (cfg.w_dice, cfg.w_bce, cfg.w_focal, cfg.w_boundary) == (1.0, 0.5, 1.0, 0.5)
        assert (cfg.focal_alpha, cfg.focal_gamma) == (0.25, 2.0)
        assert cfg.boundary_theta == 1.5

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(w_dice=-0.1).validate()

    def test_alpha_outside_unit_interval_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(focal_alpha=1.0).validate()

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            LossConfig(boundary_weight_mode="boost").validate()

    def test_from_dict_unknown_key(self):
        with pytest.raises(ValueError):
            LossConfig.from_dict({"w_iou": 1.0})


class TestHandValues:
    def test_bce_zero_logits_is_log2(self):
        logits = torch.zeros(2, 3, 4, 4, dtype=torch.float64)
        targets = (torch.arange(96, dtype=torch.float64) % 2).reshape(2, 3, 4, 4)
        value = bce_loss(logits, targets).item()
        assert abs(value - math.log(2.0)) <= 1e-6 * math.log(2.0)

    def test_bce_single_pixel(self):
        logits = torch.tensor([[[math.log(3.0)]]], dtype=torch.float64)
        targets = torch.ones(1, 1, 1, dtype=torch.float64)
        # p = 3/4, so the loss is -log(3/4)
        assert bce_loss(logits, targets).item() == pytest.approx(-math.log(0.75), rel=1e-9)

    def test_focal_zero_logits_single_positive(self):
        logits = torch.zeros(1, 1, 1, dtype=torch.float64)
        targets = torch.ones(1, 1, 1, dtype=torch.float64)
        # alpha * (1-p)^gamma * ce = 0.25 * 0.25 * ln 2
        expected = 0.25 * 0.25 * math.log(2.0)
        value = focal_loss(logits, targets, alpha=0.25, gamma=2.0).item()
        assert abs(value - expected) <= 1e-6 * expected

    def test_focal_confident_correct_is_tiny(self):
        logits = torch.full((1, 2, 4, 4), 12.0, dtype=torch.float64)
        targets = torch.ones(1, 2, 4, 4, dtype=torch.float64)
        assert focal_loss(logits, targets).item() < 1e-8

    def test_dice_fixture_is_half(self):
        probs = torch.tensor([[[1.0, 1.0], [0.0, 0.0]]], dtype=torch.float64)
        targets = torch.tensor([[[0.0, 1.0], [1.0, 0.0]]], dtype=torch.float64)
        # intersection 1, cardinality 4 -> dice 1/2 -> loss 1/2
        assert dice_loss(probs, targets).item() == pytest.approx(0.5, abs=1e-6)

    def test_dice_perfect_and_empty(self):
        targets = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
        targets[0, 0, 1:3, 1:3] = 1.0
        assert dice_loss(targets.clone(), targets).item() == pytest.approx(0.0, abs=1e-6)
        empty = torch.zeros(1, 2, 4, 4, dtype=torch.float64)
        assert dice_loss(empty, empty).item() == pytest.approx(0.0, abs=1e-12)

    def test_dice_antiperfect(self):
        targets = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
        targets[0, 0, 0, 0] = 1.0
        probs = 1.0 - targets
        assert dice_loss(probs, targets).item() == pytest.approx(1.0, abs=1e-5)


class TestSobelWeighting:
    def test_vertical_step_edge_magnitude(self):
        targets = torch.zeros(1, 1, 6, 6, dtype=torch.float64)
        targets[..., :3] = 1.0  # columns 0-2 are foreground
        mag = target_gradient_magnitude(targets)
        # the 3x3 Sobel spans the step at columns 2 and 3: |gx| = 4
        assert torch.allclose(mag[0, 0, :, 2], torch.full((6,), 4.0, dtype=torch.float64), atol=1e-3)
        assert torch.allclose(mag[0, 0, :, 3], torch.full((6,), 4.0, dtype=torch.float64), atol=1e-3)
        # far from the edge only the eps floor remains
        assert mag[0, 0, :, 0].max().item() < 2e-3
        assert mag[0, 0, :, 5].max().item() < 2e-3

    def test_flat_target_magnitude_is_eps_floor(self):
        targets = torch.ones(2, 3, 5, 5, dtype=torch.float64)
        mag = target_gradient_magnitude(targets, eps=1e-6)
        assert torch.allclose(mag, torch.full_like(mag, 1e-3), atol=1e-9)

    def test_replicate_padding_keeps_borders_quiet(self):
        # a full-frame mask has no interior edges; zero padding would fake them
        targets = torch.ones(1, 1, 8, 8, dtype=torch.float64)
        mag = target_gradient_magnitude(targets)
        assert mag.max().item() < 2e-3

    def test_3d_and_4d_agree(self):
        _, targets = rand_pair((2, 4, 6, 6), seed=3)
        stacked = target_gradient_magnitude(targets)
        manual = torch.stack([target_gradient_magnitude(t) for t in targets])
        assert torch.allclose(stacked, manual, atol=1e-12)


class TestBoundary:
    def test_down_weighting_never_exceeds_bce(self):
        for seed in range(5):
            logits, targets = rand_pair(seed=seed)
            b = boundary_loss(logits, targets, theta=1.5, mode="as_written").item()
            assert b < bce_loss(logits, targets).item()

    def test_emphasize_equals_bce_on_uniform_ce(self):
        # zero logits make the per-pixel CE constant, so any normalized
        # weighting averages back to plain BCE
        targets = (torch.rand(1, 4, 8, 8, dtype=torch.float64) > 0.5).double()
        logits = torch.zeros_like(targets)
        b = boundary_loss(logits, targets, theta=1.5, mode="emphasize").item()
        assert b == pytest.approx(math.log(2.0), rel=1e-9)

    def test_unknown_mode_rejected(self):
        logits, targets = rand_pair()
        with pytest.raises(ValueError):
            boundary_loss(logits, targets, mode="other")


class TestReductions:
    def test_focal_reduces_to_half_bce(self):
        for seed in range(5):
            logits, targets = rand_pair(seed=seed)
            f = focal_loss(logits, targets, alpha=0.5, gamma=0.0).item()
            b = 0.5 * bce_loss(logits, targets).item()
            assert abs(f - b) <= 1e-6 * abs(b)

    def test_boundary_theta_zero_reduces_to_bce(self):
        for seed in range(5):
            logits, targets = rand_pair(seed=seed)
            b = bce_loss(logits, targets).item()
            for mode in ("as_written", "emphasize"):
                v = boundary_loss(logits, targets, theta=0.0, mode=mode).item()
                assert abs(v - b) <= 1e-6 * abs(b)


class TestCombined:
    def test_breakdown_identity(self):
        cfg = LossConfig(w_dice=0.7, w_bce=0.3, w_focal=1.1, w_boundary=0.2)
        logits, targets = rand_pair(seed=7)
        out = combined_loss(logits, targets, cfg)
        expected = (0.7 * out.dice + 0.3 * out.bce + 1.1 * out.focal
                    + 0.2 * out.boundary).item()
        assert abs(out.total.item() - expected) <= 1e-7 * abs(expected)

    def test_zero_weights_zero_total(self):
        cfg = LossConfig(w_dice=0.0, w_bce=0.0, w_focal=0.0, w_boundary=0.0)
        logits, targets = rand_pair()
        assert combined_loss(logits, targets, cfg).total.item() == 0.0

    def test_saturated_correct_flat_masks(self):
        cfg = LossConfig()
        for fill, sign in ((0.0, -1.0), (1.0, 1.0)):
            targets = torch.full((1, 4, 6, 6), fill, dtype=torch.float32)
            logits = torch.full_like(targets, sign * 40.0)
            assert combined_loss(logits, targets, cfg).total.item() < 1e-4

    def test_to_floats_on_graph_attached_tensors(self):
        logits, targets = rand_pair()
        logits.requires_grad_(True)
        out = combined_loss(logits, targets, LossConfig())
        values = out.to_floats()
        assert set(values) == {"total", "dice", "bce", "focal", "boundary"}
        assert all(isinstance(v, float) for v in values.values())
        out.total.backward()  # graph must survive the conversion
        assert logits.grad is not None

    def test_pointwise_terms_are_permutation_invariant(self):
        logits, targets = rand_pair((1, 4, 6, 6), seed=11)
        perm = torch.randperm(logits.numel(), generator=torch.Generator().manual_seed(0))
        pl = logits.flatten()[perm].reshape(logits.shape)
        pt = targets.flatten()[perm].reshape(targets.shape)
        assert bce_loss(pl, pt).item() == pytest.approx(bce_loss(logits, targets).item(), rel=1e-12)
        assert focal_loss(pl, pt).item() == pytest.approx(focal_loss(logits, targets).item(), rel=1e-12)
        # dice needs a within-class shuffle to keep its per-class reduction comparable
        spatial_perm = torch.randperm(36, generator=torch.Generator().manual_seed(1))
        dl = logits.reshape(1, 4, 36)[..., spatial_perm].reshape(logits.shape)
        dt = targets.reshape(1, 4, 36)[..., spatial_perm].reshape(targets.shape)
        assert dice_loss(torch.sigmoid(dl), dt).item() == pytest.approx(
            dice_loss(torch.sigmoid(logits), targets).item(), rel=1e-12
        )

    def test_shape_mismatch_rejected(self):
        logits = torch.zeros(1, 4, 6, 6)
        targets = torch.zeros(1, 4, 6, 5)
        for fn in (bce_loss, lambda a, b: focal_loss(a, b),
                   lambda a, b: dice_loss(torch.sigmoid(a), b),
                   lambda a, b: boundary_loss(a, b),
                   lambda a, b: combined_loss(a, b, LossConfig())):
            with pytest.raises(ValueError):
                fn(logits, targets)


class TestGradients:
    def test_gradcheck_all_terms(self):
        g = torch.Generator().manual_seed(5)
        logits = torch.randn(1, 2, 5, 5, generator=g, dtype=torch.float64,
                             requires_grad=True)
        targets = (torch.rand(1, 2, 5, 5, generator=g, dtype=torch.float64) > 0.5).double()
        assert torch.autograd.gradcheck(lambda x: bce_loss(x, targets), (logits,))
        assert torch.autograd.gradcheck(lambda x: focal_loss(x, targets), (logits,))
        assert torch.autograd.gradcheck(lambda x: boundary_loss(x, targets), (logits,))
        assert torch.autograd.gradcheck(
            lambda x: combined_loss(x, targets, LossConfig()).total, (logits,)
        )
        probs = (torch.rand(1, 2, 5, 5, generator=g, dtype=torch.float64)
                 * 0.9 + 0.05).requires_grad_(True)
        assert torch.autograd.gradcheck(lambda p: dice_loss(p, targets), (probs,))

    def test_gradients_point_downhill(self):
        logits, targets = rand_pair(seed=13)
        logits.requires_grad_(True)
        out = combined_loss(logits, targets, LossConfig())
        out.total.backward()
        stepped = (logits - 0.05 * logits.grad).detach()
        after = combined_loss(stepped, targets, LossConfig()).total.item()
        assert after < out.total.item()
