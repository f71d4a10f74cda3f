import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlapatch.actions import (DEFAULT_SPEC, NUM_DOF, ActionSpec, d_max, d_max_bins, detokenize,
                              l1_distance, nad, parse_dofs, soft_expectation, tokenize)

W = 0.0078125


def test_bin_width():
    assert np.all(DEFAULT_SPEC.width == W)


@pytest.mark.parametrize("y,b", [(-1.0, 0), (1.0, 255), (0.0, 128), (5.0, 255), (-7.0, 0)])
def test_tokenize_boundaries(y, b):
    assert tokenize(np.full(NUM_DOF, y))[0] == b


@pytest.mark.parametrize("b,y", [(0, -0.99609375), (255, 0.99609375), (128, 0.00390625)])
def test_detokenize_centers(b, y):
    assert detokenize(np.full(NUM_DOF, b))[3] == y


def test_detokenize_symmetry():
    j = np.arange(256)
    np.testing.assert_array_equal(detokenize(np.tile(j, (NUM_DOF, 1)).T),
                                  -detokenize(np.tile(255 - j, (NUM_DOF, 1)).T))


def test_round_trip_all_bins():
    bins = np.tile(np.arange(256)[:, None], (1, NUM_DOF))
    np.testing.assert_array_equal(tokenize(detokenize(bins)), bins)


def test_detokenize_rejects_bad_label():
    with pytest.raises(ValueError):
        detokenize(np.full(NUM_DOF, 256))


@given(st.floats(-1, 1))
def test_quantization_error_within_half_width(y):
    back = detokenize(tokenize(np.full(NUM_DOF, y)))
    assert np.all(np.abs(back - y) <= W / 2 + 1e-15)


def test_soft_expectation():
    one_hot = np.zeros(256)
    one_hot[37] = 1
    assert soft_expectation(one_hot) == 37.0
    assert soft_expectation(np.full(256, 1 / 256)) == pytest.approx(127.5, abs=1e-12)
    split = np.zeros(256)
    split[[0, 255]] = 0.5
    assert soft_expectation(split) == 127.5


@pytest.mark.parametrize("y,d", [(0.0, 1.0), (0.3, 1.3), (-1.0, 2.0)])
def test_d_max(y, d):
    assert d_max(y, dof=0) == pytest.approx(d)


@pytest.mark.parametrize("c,d", [(0, 255), (100, 155), (255, 255)])
def test_d_max_bins(c, d):
    assert d_max_bins(c, 256) == d


def test_nad_examples():
    z = np.zeros(NUM_DOF)
    assert nad(z, z, mask=[0]) == 0.0
    p = z.copy()
    p[0] = 1.0
    assert nad(p, z, mask=[0]) == 1.0
    p = np.array([0.5, 0.25, 0, 0, 0, 0, 0])
    assert nad(p, z, mask=[0, 1]) == pytest.approx(0.375)


@given(st.lists(st.floats(-1, 1), min_size=7, max_size=7), st.lists(st.floats(-1, 1), min_size=7, max_size=7),
       st.floats(0.1, 10))
def test_nad_bounded_and_scale_invariant(p, g, s):
    p, g = np.array(p), np.array(g)
    v = nad(p, g, mask=range(7))
    assert 0.0 <= v <= 1.0
    spec = ActionSpec(low=(-s,) * 7, high=(s,) * 7)
    assert nad(p * s, g * s, spec, mask=range(7)) == pytest.approx(v, abs=1e-12)


def test_l1_examples():
    z = np.zeros(NUM_DOF)
    assert l1_distance(z, z, [0]) == 0.0
    p = z.copy()
    p[0] = 0.3
    assert l1_distance(p, z, [0]) == pytest.approx(0.3)
    p[1] = 0.1
    assert l1_distance(p, z, [0, 1]) == pytest.approx(0.2)


def test_parse_dofs():
    assert parse_dofs("1") == (0,)
    assert parse_dofs("1-3") == (0, 1, 2)
    assert parse_dofs("7,2") == (1, 6)
    with pytest.raises(ValueError):
        parse_dofs("8")
    with pytest.raises(ValueError):
        parse_dofs("")


def test_spec_validation():
    with pytest.raises(ValueError):
        ActionSpec(low=(1.0,) * 7, high=(0.0,) * 7)
    with pytest.raises(ValueError):
        ActionSpec(bins=1)
