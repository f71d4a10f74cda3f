import math

import numpy as np
import pytest

from vlapatch.actions import NUM_DOF, tokenize
from vlapatch.autodiff import gradient_pair, relative_error
from vlapatch.objectives import (ObjectiveSpec, loss_plain_untargeted, loss_tma, loss_uada, loss_upa,
                                 tma_graph, uada_graph, untargeted_graph, upa_graph, upa_value)

J = 256
LN256 = math.log(256)


def one_hot(bins, big=1e9):
    logits = np.full((NUM_DOF, J), -big)
    logits[np.arange(NUM_DOF), bins] = 0.0
    return logits


def test_uada_hand_values():
    c = np.zeros(NUM_DOF, dtype=int)
    assert loss_uada(one_hot(c), c, mask=[0]) == pytest.approx(1e6, rel=1e-9)
    far = np.full(NUM_DOF, 255)
    assert loss_uada(one_hot(far), c, mask=[0]) == pytest.approx(1 / (1 + 1e-6), abs=1e-6)
    assert abs(loss_uada(np.zeros((NUM_DOF, J)), c, mask=[0]) - 2.0) <= 1e-6


def test_uada_lower_bound():
    rng = np.random.default_rng(0)
    for _ in range(20):
        logits = rng.normal(0, 3, size=(4, NUM_DOF, J))
        gt = rng.integers(0, J, size=(4, NUM_DOF))
        assert loss_uada(logits, gt, mask=[0, 1, 2]) >= 1 / (3 + 1e-6)


def _with_position(y):
    a = np.zeros(NUM_DOF)
    a[:3] = y
    return a


def test_upa_hand_values():
    y = np.array([1.0, 0.0, 0.0])
    assert abs(upa_value(-y, y) - (-0.7)) <= 1e-6
    assert upa_value(np.array([0.0, 1.0, 0.0]), y) == pytest.approx(0.2 / math.sqrt(2), abs=1e-9)
    # coincident prediction: cosine 1 plus the guarded inverse distance
    assert upa_value(y, y) == pytest.approx(0.8 + 0.2 / 1e-6, rel=1e-9)


def test_upa_zero_reference_keeps_distance_term_only():
    assert upa_value(np.array([0.6, 0.8, 0.0]), np.zeros(3)) == pytest.approx(0.2, abs=1e-12)


def test_upa_monotone_in_angle():
    y = np.array([1.0, 0.0, 0.0])
    vals = [upa_value(np.array([math.cos(a), math.sin(a), 0.0]), y, beta=0.0) for a in np.linspace(0.1, 3.0, 8)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_upa_uses_soft_position():
    # one-hot heads at the bin centers -> soft position equals those centers
    bins = np.array([255, 128, 0, 128, 128, 128, 128])
    y_adv = -0.99609375 * np.array([-1.0, 0.0, 1.0]) + np.array([0.0, 0.00390625, 0.0])
    gt = _with_position([1.0, 0.0, -1.0])
    assert loss_upa(one_hot(bins), gt) == pytest.approx(upa_value(y_adv, gt[:3]), abs=1e-12)


def test_tma_hand_values():
    targets = np.zeros(NUM_DOF)
    assert loss_tma(one_hot(tokenize(targets)), [0.0], mask=[0]) <= 1e-6
    assert abs(loss_tma(np.zeros((NUM_DOF, J)), [0.0], mask=[0]) - LN256) <= 1e-9
    assert abs(loss_tma(np.zeros((NUM_DOF, J)), [0.0, 0.5, -1.0], mask=[0, 1, 2]) - 3 * LN256) <= 1e-9


def test_tma_rejects_out_of_range_targets():
    with pytest.raises(ValueError):
        loss_tma(np.zeros((NUM_DOF, J)), [1.5], mask=[0])


def test_tma_shift_invariant():
    logits = np.random.default_rng(1).normal(size=(NUM_DOF, J))
    a = loss_tma(logits, [0.0, 1.0], mask=[0, 1])
    b = loss_tma(logits + np.arange(NUM_DOF)[:, None] * 3.0, [0.0, 1.0], mask=[0, 1])
    assert a == pytest.approx(b, abs=1e-10)


def test_plain_untargeted():
    gt = np.full(NUM_DOF, 40)
    assert loss_plain_untargeted(one_hot(gt), gt, mask=[0]) == pytest.approx(0.0, abs=1e-9)
    assert loss_plain_untargeted(np.zeros((NUM_DOF, J)), gt, mask=[0]) == pytest.approx(-LN256, abs=1e-12)
    logits = np.zeros((NUM_DOF, J))
    prev = None
    for drop in (0.0, 1.0, 2.0, 4.0):
        logits[0, 40] = -drop
        v = loss_plain_untargeted(logits, gt, mask=[0])
        if prev is not None:
            assert v < prev
        prev = v


def test_spec_validation():
    with pytest.raises(ValueError):
        ObjectiveSpec(kind="tma", mask=(0,))
    with pytest.raises(ValueError):
        ObjectiveSpec(kind="upa", mask=(0,))
    with pytest.raises(ValueError):
        ObjectiveSpec(kind="nope")
    assert ObjectiveSpec(kind="TMA", mask=(0, 1), targets=0.0).targets == (0.0, 0.0)


@pytest.mark.parametrize("kind", ["uada", "upa", "tma", "untargeted"])
def test_losses_match_central_differences(kind):
    # Central differences at step 1e-5 resolve about 1e-11 absolute, so
    # coordinates whose true derivative is below 1e-7 (e.g. the bin sitting on
    # the soft expectation) are judged on absolute error instead.
    rng = np.random.default_rng(7)
    for _ in range(10):
        n = 2
        gt = rng.uniform(-0.9, 0.9, size=(n, NUM_DOF))
        bins = tokenize(gt)
        graphs = {
            "uada": lambda t, x: uada_graph(t, x, bins, (0, 1, 2)),
            "upa": lambda t, x: upa_graph(t, x, gt),
            "tma": lambda t, x: tma_graph(t, x, [0.0, 0.5], (0, 2)),
            "untargeted": lambda t, x: untargeted_graph(t, x, bins, (0, 1)),
        }
        analytic, numeric = gradient_pair(graphs[kind], rng.normal(size=(n, NUM_DOF, J)), 1e-5)
        resolved = np.abs(numeric) >= 1e-7
        assert relative_error(analytic[resolved], numeric[resolved]) < 1e-4
        assert np.max(np.abs(analytic - numeric)) < 1e-9
