"""Seeded pixel-space augmentation applied before both pathways.

Each training sample gets its own RNG stream derived from
(seed, epoch, sample index), so augmentation is reproducible and safe to
parallelize. Transforms run in policy order; geometric ones keep the image
dimensions (rotation fills exposed corners by edge replication) and the
result is clamped back to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError

CANONICAL_ORDER = (
    "horizontal_flip",
    "vertical_flip",
    "random_rotation",
    "color_jitter",
    "gaussian_blur",
)

POLICY_NAMES = {
    "none": (),
    "hflip": ("horizontal_flip",),
    "vflip": ("vertical_flip",),
    "rotation": ("random_rotation",),
    "jitter": ("color_jitter",),
    "blur": ("gaussian_blur",),
    "combined": CANONICAL_ORDER,
}

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class AugmentPolicy:
    transforms: tuple = ()
    flip_probability: float = 0.5
    rotation_max_degrees: float = 15.0
    jitter_low: float = 0.8
    jitter_high: float = 1.2
    blur_sigma_low: float = 0.1
    blur_sigma_high: float = 1.5
    blur_probability: float = 0.3

    def __post_init__(self):
        self.transforms = tuple(self.transforms)
        unknown = set(self.transforms) - set(CANONICAL_ORDER)
        if unknown:
            raise ValueError(f"unknown transform(s) {sorted(unknown)}")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError("flip_probability must lie in [0, 1]")
        if not 0.0 <= self.blur_probability <= 1.0:
            raise ValueError("blur_probability must lie in [0, 1]")
        if not 0.0 <= self.rotation_max_degrees <= 180.0:
            raise ValueError("rotation_max_degrees must lie in [0, 180]")
        if self.jitter_low <= 0.0 or self.jitter_low > self.jitter_high:
            raise ValueError("jitter factors must be positive and ordered")
        if self.blur_sigma_low <= 0.0 or self.blur_sigma_low > self.blur_sigma_high:
            raise ValueError("blur sigmas must be positive and ordered")


def policy_from_name(name):
    """One of {none, hflip, vflip, rotation, jitter, blur, combined}."""
    try:
        transforms = POLICY_NAMES[name]
    except KeyError:
        raise UsageError(
            f"unknown augmentation policy {name!r}; choose from "
            f"{sorted(POLICY_NAMES)}"
        ) from None
    return AugmentPolicy(transforms=transforms)


def _bilinear_sample(image, ys, xs):
    """Sample at fractional coords with clamping (edge replication)."""
    h, w = image.shape[:2]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = (ys - y0)[:, :, None]
    fx = (xs - x0)[:, :, None]
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    top = image[y0c, x0c] * (1 - fx) + image[y0c, x1c] * fx
    bottom = image[y1c, x0c] * (1 - fx) + image[y1c, x1c] * fx
    return top * (1 - fy) + bottom * fy


def _rotate(image, degrees):
    h, w = image.shape[:2]
    theta = np.deg2rad(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w]
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # inverse mapping: where each output pixel samples from
    ys = cos_t * (yy - cy) + sin_t * (xx - cx) + cy
    xs = -sin_t * (yy - cy) + cos_t * (xx - cx) + cx
    return _bilinear_sample(image, ys, xs)


def _gaussian_blur(image, sigma):
    radius = max(1, int(np.ceil(3.0 * sigma)))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(image, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    out = np.zeros_like(image)
    for i, kv in enumerate(kernel):
        out += kv * padded[i : i + image.shape[0]]
    padded = np.pad(out, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = np.zeros_like(image)
    for i, kv in enumerate(kernel):
        out += kv * padded[:, i : i + image.shape[1]]
    return out


def _color_jitter(image, brightness, contrast, saturation):
    out = image * brightness
    mean = out.mean()
    out = mean + (out - mean) * contrast
    gray = out @ LUMA
    return gray[:, :, None] + (out - gray[:, :, None]) * saturation


def augment(image, policy, stream):
    """Apply the policy's transforms to an HxWx3 raster using `stream`.

    Draw order per transform is fixed (trigger first, then parameters), so
    identical streams give identical outputs.
    """
    out = np.asarray(image, dtype=np.float64)
    for transform in policy.transforms:
        if transform == "horizontal_flip":
            if stream.random() < policy.flip_probability:
                out = out[:, ::-1]
        elif transform == "vertical_flip":
            if stream.random() < policy.flip_probability:
                out = out[::-1]
        elif transform == "random_rotation":
            degrees = stream.uniform(
                -policy.rotation_max_degrees, policy.rotation_max_degrees
            )
            if out.shape[0] > 1 or out.shape[1] > 1:
                out = _rotate(out, degrees)
        elif transform == "color_jitter":
            brightness = stream.uniform(policy.jitter_low, policy.jitter_high)
            contrast = stream.uniform(policy.jitter_low, policy.jitter_high)
            saturation = stream.uniform(policy.jitter_low, policy.jitter_high)
            out = _color_jitter(out, brightness, contrast, saturation)
        elif transform == "gaussian_blur":
            if stream.random() < policy.blur_probability:
                sigma = stream.uniform(
                    policy.blur_sigma_low, policy.blur_sigma_high
                )
                out = _gaussian_blur(out, sigma)
        else:
            raise ValueError(f"unknown transform {transform!r}")
    return np.clip(out, 0.0, 1.0)
