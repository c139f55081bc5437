"""Stochastic training augmentation and the deterministic eval transform.

The training schedule, applied in this fixed order:

    resize -> hflip -> vflip -> rot90 -> shift/scale/rotate
           -> one-of {brightness-contrast, gamma, hsv}
           -> gaussian noise -> gaussian blur
           -> one-of {elastic, grid distortion, optical distortion}
           -> normalize

Geometric transforms are applied jointly to the image (bilinear) and to all
four mask channels (nearest-neighbor, so masks stay strictly binary);
photometric transforms touch the image only.  One-of groups fire with their
group probability and then pick a single member with probability proportional
to the member probabilities.  Every applied op and its sampled parameters are
recorded for audit.
"""

from dataclasses import dataclass, field, asdict

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class AugmentError(ValueError):
    pass


@dataclass
class AugmentationConfig:
    target_size: tuple = (512, 512)
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_rot90: float = 0.5
    p_shift_scale_rotate: float = 0.5
    shift_limit: float = 0.0625
    scale_limit: float = 0.10
    rotate_limit: float = 15.0
    p_color_group: float = 0.5
    p_brightness_contrast: float = 0.4
    brightness_limit: float = 0.20
    contrast_limit: float = 0.20
    p_gamma: float = 0.4
    gamma_range: tuple = (0.8, 1.2)
    p_hsv: float = 0.4
    hue_shift_deg: float = 10.0
    sat_shift: float = 0.15
    val_shift: float = 0.10
    p_noise: float = 0.15
    noise_var_range: tuple = (10.0, 50.0)
    p_blur: float = 0.15
    blur_kernel_max: int = 3
    p_geom_group: float = 0.3
    p_elastic: float = 0.15
    elastic_alpha: float = 1.0
    elastic_sigma: float = 50.0
    p_grid: float = 0.15
    grid_steps: int = 5
    grid_distort_limit: float = 0.3
    p_optical: float = 0.15
    optical_distort_limit: float = 1.0
    optical_shift_limit: float = 0.5
    mean: tuple = IMAGENET_MEAN
    std: tuple = IMAGENET_STD

    def probability_fields(self):
        return [f for f in asdict(self) if f.startswith("p_")]

    def validate(self):
        for name in self.probability_fields():
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise AugmentError(f"{name}={p} is not a probability in [0, 1]")
        if len(self.target_size) != 2 or min(self.target_size) < 1:
            raise AugmentError(f"bad target_size {self.target_size}")
        for name in ("shift_limit", "scale_limit", "rotate_limit", "sat_shift",
                     "val_shift", "brightness_limit", "contrast_limit"):
            if getattr(self, name) < 0:
                raise AugmentError(f"{name} must be >= 0")
        lo, hi = self.gamma_range
        if not 0 < lo <= hi:
            raise AugmentError(f"bad gamma_range {self.gamma_range}")
        lo, hi = self.noise_var_range
        if not 0 <= lo <= hi:
            raise AugmentError(f"bad noise_var_range {self.noise_var_range}")
        if self.blur_kernel_max > 3 or self.blur_kernel_max < 1:
            raise AugmentError("blur kernel is limited to <= 3 px")
        if any(v <= 0 for v in self.std):
            raise AugmentError("std entries must be > 0")
        return self

    @classmethod
    def no_op(cls, **overrides):
        """All probabilities zero: pipeline reduces to resize + normalize."""
        zeros = {name: 0.0 for name in cls().probability_fields()}
        zeros.update(overrides)
        return cls(**zeros)

    @classmethod
    def from_dict(cls, data):
        known = set(asdict(cls()))
        unknown = set(data) - known
        if unknown:
            raise AugmentError(f"unknown augmentation config keys: {sorted(unknown)}")
        coerced = {
            k: tuple(v) if isinstance(getattr(cls(), k), tuple) else v
            for k, v in data.items()
        }
        return cls(**coerced).validate()


@dataclass
class AugmentedSample:
    image: np.ndarray                      # (3, H, W) float32, normalized
    masks: np.ndarray                      # (4, H, W) uint8 in {0, 1}
    applied_ops: list = field(default_factory=list)
    sample_id: str = ""


# ---------------------------------------------------------------------------
# individual transforms (image is HxWx3 uint8 RGB, masks CxHxW uint8)

def resize_pair(image, masks, target_size):
    h, w = target_size
    image = cv2.resize(image, (w, h), interpolation=cv2.INTER_LINEAR)
    masks = np.stack(
        [cv2.resize(m, (w, h), interpolation=cv2.INTER_NEAREST) for m in masks]
    )
    return image, masks


def hflip_pair(image, masks):
    return np.ascontiguousarray(image[:, ::-1]), np.ascontiguousarray(masks[:, :, ::-1])


def vflip_pair(image, masks):
    return np.ascontiguousarray(image[::-1]), np.ascontiguousarray(masks[:, ::-1])


def rot90_pair(image, masks, k):
    image = np.ascontiguousarray(np.rot90(image, k, axes=(0, 1)))
    masks = np.ascontiguousarray(np.rot90(masks, k, axes=(1, 2)))
    return image, masks


def shift_scale_rotate_pair(image, masks, shift_x, shift_y, scale, angle):
    """Single affine warp; shifts are fractions of width/height."""
    h, w = image.shape[:2]
    matrix = cv2.getRotationMatrix2D(((w - 1) / 2, (h - 1) / 2), angle, scale)
    matrix[0, 2] += shift_x * w
    matrix[1, 2] += shift_y * h
    image = cv2.warpAffine(
        image, matrix, (w, h), flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    )
    masks = np.stack([
        cv2.warpAffine(m, matrix, (w, h), flags=cv2.INTER_NEAREST,
                       borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        for m in masks
    ])
    return image, masks


def remap_pair(image, masks, map_x, map_y):
    image = cv2.remap(image, map_x, map_y, interpolation=cv2.INTER_LINEAR,
                      borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    masks = np.stack([
        cv2.remap(m, map_x, map_y, interpolation=cv2.INTER_NEAREST,
                  borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        for m in masks
    ])
    return image, masks


def apply_brightness_contrast(image, brightness, contrast):
    out = image.astype(np.float32) * (1.0 + contrast) + brightness * 255.0
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def apply_gamma(image, gamma):
    out = ((image.astype(np.float32) / 255.0) ** gamma) * 255.0
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def apply_hsv(image, hue_deg, sat_scale, val_scale):
    hsv = cv2.cvtColor(image, cv2.COLOR_RGB2HSV).astype(np.int32)
    hsv[..., 0] = (hsv[..., 0] + int(round(hue_deg / 2.0))) % 180  # cv2: 1 unit = 2 deg
    hsv[..., 1] = np.clip(np.rint(hsv[..., 1] * (1.0 + sat_scale)), 0, 255)
    hsv[..., 2] = np.clip(np.rint(hsv[..., 2] * (1.0 + val_scale)), 0, 255)
    return cv2.cvtColor(hsv.astype(np.uint8), cv2.COLOR_HSV2RGB)


def apply_gaussian_noise(image, variance, rng):
    # noise lives in 8-bit intensity units, variance in squared units
    noise = rng.normal(0.0, np.sqrt(variance), size=image.shape)
    return np.clip(np.rint(image.astype(np.float64) + noise), 0, 255).astype(np.uint8)


def apply_gaussian_blur(image, kernel_size):
    return cv2.GaussianBlur(image, (kernel_size, kernel_size), 0)


def elastic_maps(shape, alpha, sigma, rng):
    h, w = shape
    dx = gaussian_filter(rng.uniform(-1, 1, size=(h, w)), sigma, mode="constant") * alpha
    dy = gaussian_filter(rng.uniform(-1, 1, size=(h, w)), sigma, mode="constant") * alpha
    grid_y, grid_x = np.mgrid[0:h, 0:w].astype(np.float32)
    return (grid_x + dx).astype(np.float32), (grid_y + dy).astype(np.float32)


def grid_distortion_maps(shape, steps, cell_scales_x, cell_scales_y):
    """Piecewise-linear resampling of the axes, one scale factor per cell."""
    h, w = shape

    def axis_map(size, scales):
        cell = size // steps
        xs = np.zeros(size, dtype=np.float32)
        prev = 0.0
        start = 0
        for i, scale in enumerate(scales):
            end = size if i == steps - 1 else start + cell
            span = (end - start) * scale
            xs[start:end] = np.linspace(prev, prev + span, end - start, endpoint=False)
            prev += span
            start = end
        # renormalize so the map still covers the full axis
        return xs * ((size - 1) / max(xs[-1], 1e-6))

    map_x = np.tile(axis_map(w, cell_scales_x), (h, 1))
    map_y = np.tile(axis_map(h, cell_scales_y).reshape(-1, 1), (1, w))
    return map_x, map_y.astype(np.float32)


def optical_distortion_maps(shape, k, shift_x, shift_y):
    h, w = shape
    camera = np.array(
        [[w, 0, w / 2 + shift_x], [0, h, h / 2 + shift_y], [0, 0, 1]], dtype=np.float32
    )
    distortion = np.array([k, k, 0, 0, 0], dtype=np.float32)
    map_x, map_y = cv2.initUndistortRectifyMap(
        camera, distortion, None, None, (w, h), cv2.CV_32FC1
    )
    return map_x, map_y


def normalize_image(image, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """uint8 HxWx3 -> float32 3xHxW, scaled to [0,1] then standardized."""
    out = image.astype(np.float32) / 255.0
    out = (out - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return np.ascontiguousarray(out.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# pipeline

class Pipeline:
    """Deterministic-under-seed sampler of the training transform schedule.

    Immutable after construction; each call to apply_train advances the
    pipeline's own random stream unless an explicit generator is passed.
    Parallel workers should draw independent streams from rng_for().
    """

    def __init__(self, config, seed):
        config.validate()
        self.config = config
        self.seed = int(seed)
        self._rng = np.random.default_rng(self.seed)

    def rng_for(self, worker_id, draw_index):
        return np.random.default_rng(
            np.random.SeedSequence([self.seed, int(worker_id), int(draw_index)])
        )

    def _pick_one_of(self, rng, members):
        """members: list of (name, p).  Chance proportional to member p."""
        names = [n for n, p in members if p > 0]
        weights = np.array([p for _, p in members if p > 0], dtype=np.float64)
        if len(names) == 0:
            return None
        return names[rng.choice(len(names), p=weights / weights.sum())]

    def apply_train(self, sample, rng=None):
        cfg = self.config
        rng = rng if rng is not None else self._rng
        image, masks = resize_pair(sample.image, sample.masks, cfg.target_size)
        ops = [("resize", {"height": cfg.target_size[0], "width": cfg.target_size[1]})]

        if rng.random() < cfg.p_hflip:
            image, masks = hflip_pair(image, masks)
            ops.append(("hflip", {}))
        if rng.random() < cfg.p_vflip:
            image, masks = vflip_pair(image, masks)
            ops.append(("vflip", {}))
        if rng.random() < cfg.p_rot90:
            k = int(rng.integers(1, 4))
            image, masks = rot90_pair(image, masks, k)
            ops.append(("rot90", {"k": k}))
        if rng.random() < cfg.p_shift_scale_rotate:
            params = {
                "shift_x": rng.uniform(-cfg.shift_limit, cfg.shift_limit),
                "shift_y": rng.uniform(-cfg.shift_limit, cfg.shift_limit),
                "scale": 1.0 + rng.uniform(-cfg.scale_limit, cfg.scale_limit),
                "angle": rng.uniform(-cfg.rotate_limit, cfg.rotate_limit),
            }
            image, masks = shift_scale_rotate_pair(image, masks, **params)
            ops.append(("shift_scale_rotate", params))

        if rng.random() < cfg.p_color_group:
            member = self._pick_one_of(rng, [
                ("brightness_contrast", cfg.p_brightness_contrast),
                ("gamma", cfg.p_gamma),
                ("hsv", cfg.p_hsv),
            ])
            if member == "brightness_contrast":
                params = {
                    "brightness": rng.uniform(-cfg.brightness_limit, cfg.brightness_limit),
                    "contrast": rng.uniform(-cfg.contrast_limit, cfg.contrast_limit),
                }
                image = apply_brightness_contrast(image, **params)
                ops.append((member, params))
            elif member == "gamma":
                params = {"gamma": rng.uniform(*cfg.gamma_range)}
                image = apply_gamma(image, **params)
                ops.append((member, params))
            elif member == "hsv":
                params = {
                    "hue_deg": rng.uniform(-cfg.hue_shift_deg, cfg.hue_shift_deg),
                    "sat_scale": rng.uniform(-cfg.sat_shift, cfg.sat_shift),
                    "val_scale": rng.uniform(-cfg.val_shift, cfg.val_shift),
                }
                image = apply_hsv(image, **params)
                ops.append((member, params))

        if rng.random() < cfg.p_noise:
            params = {"variance": rng.uniform(*cfg.noise_var_range)}
            image = apply_gaussian_noise(image, params["variance"], rng)
            ops.append(("gaussian_noise", params))
        if rng.random() < cfg.p_blur:
            params = {"kernel_size": cfg.blur_kernel_max}
            image = apply_gaussian_blur(image, **params)
            ops.append(("gaussian_blur", params))

        if rng.random() < cfg.p_geom_group:
            member = self._pick_one_of(rng, [
                ("elastic", cfg.p_elastic),
                ("grid_distortion", cfg.p_grid),
                ("optical_distortion", cfg.p_optical),
            ])
            shape = image.shape[:2]
            if member == "elastic":
                params = {"alpha": cfg.elastic_alpha, "sigma": cfg.elastic_sigma}
                map_x, map_y = elastic_maps(shape, cfg.elastic_alpha, cfg.elastic_sigma, rng)
                image, masks = remap_pair(image, masks, map_x, map_y)
                ops.append((member, params))
            elif member == "grid_distortion":
                params = {
                    "steps": cfg.grid_steps,
                    "scales_x": (1.0 + rng.uniform(
                        -cfg.grid_distort_limit, cfg.grid_distort_limit, cfg.grid_steps
                    )).tolist(),
                    "scales_y": (1.0 + rng.uniform(
                        -cfg.grid_distort_limit, cfg.grid_distort_limit, cfg.grid_steps
                    )).tolist(),
                }
                map_x, map_y = grid_distortion_maps(
                    shape, cfg.grid_steps, params["scales_x"], params["scales_y"]
                )
                image, masks = remap_pair(image, masks, map_x, map_y)
                ops.append((member, params))
            elif member == "optical_distortion":
                params = {
                    "k": rng.uniform(-cfg.optical_distort_limit, cfg.optical_distort_limit),
                    "shift_x": rng.uniform(-cfg.optical_shift_limit, cfg.optical_shift_limit),
                    "shift_y": rng.uniform(-cfg.optical_shift_limit, cfg.optical_shift_limit),
                }
                map_x, map_y = optical_distortion_maps(
                    shape, params["k"], params["shift_x"], params["shift_y"]
                )
                image, masks = remap_pair(image, masks, map_x, map_y)
                ops.append((member, params))

        ops.append(("normalize", {"mean": cfg.mean, "std": cfg.std}))
        return AugmentedSample(
            image=normalize_image(image, cfg.mean, cfg.std),
            masks=masks,
            applied_ops=ops,
            sample_id=sample.sample_id,
        )

    def apply_eval(self, sample):
        """Resize + normalize only; fully deterministic."""
        cfg = self.config
        image, masks = resize_pair(sample.image, sample.masks, cfg.target_size)
        ops = [
            ("resize", {"height": cfg.target_size[0], "width": cfg.target_size[1]}),
            ("normalize", {"mean": cfg.mean, "std": cfg.std}),
        ]
        return AugmentedSample(
            image=normalize_image(image, cfg.mean, cfg.std),
            masks=masks,
            applied_ops=ops,
            sample_id=sample.sample_id,
        )


def build_pipeline(config, seed):
    return Pipeline(config, seed)


def apply_eval(sample, config=None):
    """Module-level eval transform with the reference configuration."""
    return Pipeline(config or AugmentationConfig(), seed=0).apply_eval(sample)
