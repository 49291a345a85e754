import numpy as np
import pytest

from hierseg.errors import ConfigurationError, ShapeError, ValidationError
from hierseg.interp import bilinear_resize, nearest_resize, resize


def test_same_size_is_identity():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 7))
    np.testing.assert_array_equal(bilinear_resize(a, 5, 7), a)


def test_constant_channel_stays_constant():
    a = np.full((3, 4, 2), 2.5)
    out = bilinear_resize(a, 9, 5)
    np.testing.assert_allclose(out, 2.5, atol=1e-12)


def test_2x2_to_4x4_hand_computed():
    # Corner pattern; bilinear-consistent so value = wx * 1 + wy * 2 where
    # (wy, wx) are the clamped source offsets [0, 0.25, 0.75, 1].
    a = np.array([[0.0, 1.0], [2.0, 3.0]])
    w = np.array([0.0, 0.25, 0.75, 1.0])
    expected = w[None, :] * 1.0 + w[:, None] * 2.0
    out = bilinear_resize(a, 4, 4)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_downsample_2x2_average():
    a = np.array([[1.0, 3.0], [5.0, 7.0]])
    out = bilinear_resize(a, 1, 1)
    np.testing.assert_allclose(out, [[4.0]])


def test_values_stay_in_input_range():
    rng = np.random.default_rng(1)
    a = rng.uniform(-3, 5, size=(6, 6))
    out = bilinear_resize(a, 17, 11)
    assert out.min() >= a.min() - 1e-12
    assert out.max() <= a.max() + 1e-12


def test_channels_resampled_independently():
    rng = np.random.default_rng(2)
    a = rng.standard_normal((4, 5, 3))
    out = bilinear_resize(a, 8, 9)
    for c in range(3):
        np.testing.assert_allclose(out[:, :, c], bilinear_resize(a[:, :, c], 8, 9))


def test_nearest_picks_closest_sample():
    a = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = nearest_resize(a, 4, 4)
    expected = np.array([
        [0, 0, 1, 1],
        [0, 0, 1, 1],
        [2, 2, 3, 3],
        [2, 2, 3, 3],
    ], dtype=float)
    np.testing.assert_array_equal(out, expected)


def test_bad_inputs():
    with pytest.raises(ShapeError):
        bilinear_resize(np.zeros(3), 2, 2)
    with pytest.raises(ValidationError):
        bilinear_resize(np.zeros((2, 2)), 0, 2)
    with pytest.raises(ConfigurationError):
        resize(np.zeros((2, 2)), 2, 2, mode="bicubic")
