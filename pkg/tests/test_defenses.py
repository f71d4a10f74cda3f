import numpy as np
import pytest

from vlapatch.defenses import (SWEEP_GRID, DefenseSpec, bit_depth, gaussian_noise, jpeg, median_blur)

RNG = np.random.default_rng(0)
IMG = RNG.uniform(size=(21, 19, 3))


def test_jpeg_gray_is_stable():
    gray = np.full((16, 24, 3), 0.5)
    for q in (1, 10, 50, 95):
        assert np.max(np.abs(jpeg(gray, q) - 0.5)) <= 1 / 255


def test_jpeg_quality_ordering_on_checkerboard():
    board = np.indices((32, 32)).sum(axis=0) % 2
    img = np.repeat(board[..., None], 3, axis=2).astype(float)
    err10 = np.abs(jpeg(img, 10) - img).mean()
    err50 = np.abs(jpeg(img, 50) - img).mean()
    assert err10 >= err50


def test_jpeg_shape_and_range():
    out = jpeg(IMG, 30)
    assert out.shape == IMG.shape
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        jpeg(IMG, 0)


def test_gaussian():
    np.testing.assert_array_equal(gaussian_noise(IMG, 0.0), IMG)
    out = gaussian_noise(IMG, 0.1, seed=3)
    assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(out, gaussian_noise(IMG, 0.1, seed=3))


def test_gaussian_noise_is_centered():
    sigma = 0.05
    mid = np.full((1000, 1000, 1), 0.5)
    noise = gaussian_noise(mid, sigma, seed=1) - 0.5
    assert abs(noise.mean()) <= 3 * sigma / 1000


def test_median():
    const = np.full((9, 9, 3), 0.3)
    np.testing.assert_array_equal(median_blur(const, 5), const)
    np.testing.assert_array_equal(median_blur(median_blur(const, 3), 3), median_blur(const, 3))
    spike = const.copy()
    spike[4, 4, 1] = 1.0
    np.testing.assert_array_equal(median_blur(spike, 3), const)
    with pytest.raises(ValueError):
        median_blur(const, 4)
    with pytest.raises(ValueError):
        median_blur(const, 11)


def test_median_edges_replicate():
    img = np.zeros((5, 5, 1))
    img[0, :, 0] = 1.0
    img[1, :, 0] = 1.0
    # with replication the top rows see two "1" rows out of three
    assert median_blur(img, 3)[0, 2, 0] == 1.0


def test_bit_depth():
    assert bit_depth(np.array([0.0]), 4)[0] == 0.0
    assert bit_depth(np.array([1.0]), 4)[0] == 1.0
    assert bit_depth(np.array([0.5]), 3)[0] == pytest.approx(4 / 7, abs=1e-6)
    for b in (1, 3, 6):
        out = bit_depth(IMG, b)
        assert len(np.unique(out[..., 0])) <= 2 ** b
        np.testing.assert_array_equal(bit_depth(out, b), out)


@pytest.mark.parametrize("kind", list(SWEEP_GRID))
def test_every_setting_preserves_shape_and_range(kind):
    for param in SWEEP_GRID[kind]:
        out = DefenseSpec(kind, param, seed=1).apply(IMG)
        assert out.shape == IMG.shape
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_spec_ranges():
    for bad in [("jpeg", 60), ("gaussian", 0.2), ("median", 4), ("bitdepth", 2), ("blur", 3)]:
        with pytest.raises(ValueError):
            DefenseSpec(*bad)
    assert SWEEP_GRID["jpeg"] == (50, 40, 30, 20, 10)
    assert SWEEP_GRID["bitdepth"] == (6, 5, 4, 3)


def test_preprocessor_streams_are_per_episode():
    d = DefenseSpec("gaussian", 0.05, seed=2)
    a, b = d.preprocessor(1), d.preprocessor(1)
    np.testing.assert_array_equal(a(IMG), b(IMG))
    assert not np.array_equal(d.preprocessor(2)(IMG), d.preprocessor(1)(IMG))
