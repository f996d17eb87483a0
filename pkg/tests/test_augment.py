"""Augmentation tests: identity, involutions, determinism, distributions."""

import numpy as np
import pytest

from spyglass.augment import (
    CANONICAL_ORDER,
    AugmentPolicy,
    augment,
    policy_from_name,
)
from spyglass.errors import UsageError


def sample_image(seed=0, side=12):
    rng = np.random.default_rng(seed)
    return rng.uniform(0, 1, size=(side, side, 3))


def test_empty_policy_is_identity():
    img = sample_image(1)
    out = augment(img, AugmentPolicy(), np.random.default_rng(0))
    np.testing.assert_array_equal(out, img)


def test_double_horizontal_flip_restores_image():
    img = sample_image(2)
    policy = AugmentPolicy(transforms=("horizontal_flip",), flip_probability=1.0)
    once = augment(img, policy, np.random.default_rng(0))
    twice = augment(once, policy, np.random.default_rng(1))
    np.testing.assert_array_equal(twice, img)


def test_double_vertical_flip_restores_image():
    img = sample_image(3)
    policy = AugmentPolicy(transforms=("vertical_flip",), flip_probability=1.0)
    once = augment(img, policy, np.random.default_rng(0))
    twice = augment(once, policy, np.random.default_rng(1))
    np.testing.assert_array_equal(twice, img)


def test_gaussian_blur_preserves_constant_image():
    img = np.full((9, 9, 3), 0.42)
    policy = AugmentPolicy(transforms=("gaussian_blur",), blur_probability=1.0)
    out = augment(img, policy, np.random.default_rng(5))
    np.testing.assert_allclose(out, 0.42, rtol=1e-12)


def test_rotation_preserves_dimensions_and_range():
    img = sample_image(4, side=15)
    policy = AugmentPolicy(transforms=("random_rotation",))
    out = augment(img, policy, np.random.default_rng(7))
    assert out.shape == img.shape
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert not np.array_equal(out, img)  # a nonzero angle actually rotated


def test_determinism_per_stream():
    img = sample_image(5)
    policy = policy_from_name("combined")
    seed_tuple = [11, 3, 217]  # (seed, epoch, sample index)
    a = augment(img, policy, np.random.default_rng(seed_tuple))
    b = augment(img, policy, np.random.default_rng(seed_tuple))
    assert np.array_equal(a, b)
    c = augment(img, policy, np.random.default_rng([11, 3, 218]))
    assert not np.array_equal(a, c)


def test_all_transforms_preserve_range_and_shape():
    img = sample_image(6)
    for name in CANONICAL_ORDER:
        policy = AugmentPolicy(
            transforms=(name,), flip_probability=1.0, blur_probability=1.0
        )
        out = augment(img, policy, np.random.default_rng(13))
        assert out.shape == img.shape, name
        assert out.min() >= 0.0 and out.max() <= 1.0, name


def test_one_pixel_image_passes_through_geometry():
    img = np.array([[[0.2, 0.5, 0.8]]])
    policy = AugmentPolicy(transforms=("random_rotation", "gaussian_blur"),
                           blur_probability=1.0)
    out = augment(img, policy, np.random.default_rng(17))
    np.testing.assert_allclose(out, img, rtol=1e-12)


def test_flip_trigger_frequency():
    policy = AugmentPolicy(transforms=("horizontal_flip",))
    marker = np.zeros((1, 2, 3))
    marker[0, 0, :] = 1.0  # asymmetric: flipping moves the bright pixel
    flips = 0
    draws = 10_000
    for i in range(draws):
        out = augment(marker, policy, np.random.default_rng([99, i]))
        flips += out[0, 1, 0] == 1.0
    assert abs(flips / draws - 0.5) < 0.02


def test_jitter_changes_values_but_not_shape():
    img = sample_image(7)
    policy = AugmentPolicy(transforms=("color_jitter",))
    out = augment(img, policy, np.random.default_rng(23))
    assert out.shape == img.shape
    assert not np.array_equal(out, img)


# ---------------------------------------------------------------------------
# policy_from_name


def test_policy_none_is_empty():
    assert policy_from_name("none").transforms == ()


def test_policy_combined_has_all_five_in_canonical_order():
    assert policy_from_name("combined").transforms == CANONICAL_ORDER


def test_policy_hflip_is_singleton():
    assert policy_from_name("hflip").transforms == ("horizontal_flip",)


def test_policy_unknown_name_rejected():
    with pytest.raises(UsageError, match="sparkle"):
        policy_from_name("sparkle")


def test_policy_validation():
    with pytest.raises(ValueError, match="flip_probability"):
        AugmentPolicy(flip_probability=1.5)
    with pytest.raises(ValueError, match="rotation"):
        AugmentPolicy(rotation_max_degrees=270)
    with pytest.raises(ValueError, match="unknown transform"):
        AugmentPolicy(transforms=("mixup",))
