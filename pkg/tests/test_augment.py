import numpy as np
import pytest

from mpunet.augment import ElasticParams, displacement_field, elastic_deform, warp


def _pair(rng, shape=(24, 20)):
    image = rng.normal(size=shape).astype(np.float32)
    label = rng.integers(0, 4, size=shape).astype(np.uint8)
    return image, label


def test_zero_multiplier_is_identity(rng):
    image, label = _pair(rng)
    p = ElasticParams(magnitude_range=(0.0, 0.0))
    out_i, out_l = elastic_deform(image, label, p, rng, force=True)
    assert np.array_equal(out_i, image) and np.array_equal(out_l, label)


def test_labels_keep_their_class_set(rng):
    image, label = _pair(rng)
    label[label == 2] = 3
    for _ in range(10):
        _, out = elastic_deform(image, label, ElasticParams(), rng, force=True)
        assert set(np.unique(out)) <= set(np.unique(label))


def test_deterministic_given_state(rng):
    image, label = _pair(rng)
    a = elastic_deform(image, label, ElasticParams(), np.random.default_rng(3), force=True)
    b = elastic_deform(image, label, ElasticParams(), np.random.default_rng(3), force=True)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_application_rate():
    rng = np.random.default_rng(0)
    image = np.arange(64, dtype=np.float32).reshape(8, 8)
    p = ElasticParams(magnitude_range=(50.0, 60.0))
    changed = sum(not np.array_equal(elastic_deform(image, None, p, rng)[0], image)
                  for _ in range(10_000))
    assert abs(changed / 10_000 - 1 / 3) <= 0.02


def test_field_peak_is_magnitude_over_width(rng):
    field = displacement_field((30, 40), 5.0, 200.0, rng)
    assert field.shape == (2, 30, 40)
    assert np.abs(field).max() == pytest.approx(200.0 / 40)


def test_constant_shift_warp():
    image = np.arange(100, dtype=np.float64).reshape(10, 10)
    field = np.zeros((2, 10, 10))
    field[1] = 2.0  # sample two columns to the right
    out, _ = warp(image, None, field)
    assert np.array_equal(out[:, :8], image[:, 2:])
    assert np.array_equal(out[:, 8:], np.repeat(image[:, 9:], 2, axis=1))


def test_half_pixel_shift_is_bilinear():
    image = np.arange(16, dtype=np.float64).reshape(4, 4)
    field = np.zeros((2, 4, 4))
    field[0] = 0.5
    out, _ = warp(image, None, field)
    assert np.allclose(out[:3], (image[:3] + image[1:]) / 2)


def test_params_validation():
    with pytest.raises(ValueError):
        ElasticParams(smoothing_range=(30, 20))
    with pytest.raises(ValueError):
        ElasticParams(magnitude_range=(-1, 5))
    with pytest.raises(ValueError):
        ElasticParams(probability=1.5)


def test_shape_mismatch(rng):
    with pytest.raises(ValueError):
        elastic_deform(np.zeros((4, 4)), np.zeros((4, 5)), ElasticParams(), rng)


def test_optional_rotation_keeps_centre(rng):
    image, label = _pair(rng, (9, 9))
    p = ElasticParams(magnitude_range=(0.0, 0.0), affine_degrees=30.0)
    out, lab = elastic_deform(image, label, p, rng, force=True)
    assert out[4, 4] == pytest.approx(image[4, 4])
    assert not np.array_equal(out, image)
