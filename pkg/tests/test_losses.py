import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feataug.errors import ConfigError, DataError
from feataug.gradcheck import check_loss
from feataug.losses import (LossConfig, class_balanced_weights, compute_loss, cross_entropy,
                            focal_loss)


def test_uniform_logits_give_log_c():
    loss, _ = cross_entropy(np.zeros((3, 10)), np.array([0, 4, 9]))
    assert loss == pytest.approx(math.log(10), abs=1e-12)


def test_saturated_margin_gives_zero_loss():
    logits = np.array([[60.0, 0.0, 0.0]])
    assert cross_entropy(logits, [0])[0] < 1e-20
    assert focal_loss(logits, [0], 2.0)[0] < 1e-20


def test_weights_two_zero_is_twice_unit_weight(rng):
    logits = rng.normal(size=(2, 4))
    y = np.array([1, 3])
    l20, _ = cross_entropy(logits, y, [2.0, 0.0])
    l10, _ = cross_entropy(logits, y, [1.0, 0.0])
    alone, _ = cross_entropy(logits[:1], y[:1])
    assert l20 == pytest.approx(2 * l10, rel=1e-12)
    # normalised by the batch size, so [2, 0] over two samples is sample 1 on its own
    assert l20 == pytest.approx(alone, rel=1e-12)


def test_focal_closed_form():
    # p(correct) = 0.5 with exponent 2 -> 0.25 ln 2
    logits = np.array([[0.0, 0.0]])
    loss, _ = focal_loss(logits, [0], 2.0)
    assert loss == pytest.approx(0.25 * math.log(2), abs=1e-9)
    assert loss == pytest.approx(0.173287, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.integers(2, 7))
def test_focal_zero_is_cross_entropy(seed, n, c):
    r = np.random.default_rng(seed)
    logits = r.normal(scale=3, size=(n, c))
    y = r.integers(0, c, size=n)
    a, ga = focal_loss(logits, y, 0.0)
    b, gb = cross_entropy(logits, y)
    assert a == pytest.approx(b, abs=1e-6)
    np.testing.assert_allclose(ga, gb, atol=1e-6)


def test_cb_weights_examples():
    np.testing.assert_allclose(class_balanced_weights([1, 50, 500], 0.0), [1, 1, 1])
    np.testing.assert_allclose(class_balanced_weights([7, 7, 7, 7], 0.99), [1, 1, 1, 1])
    np.testing.assert_allclose(class_balanced_weights([1, 2], 0.9), [1.3103448, 0.6896552], atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 1000), min_size=2, max_size=8), st.floats(0.01, 0.9999),
       st.integers(0, 1000))
def test_cb_weights_permutation_equivariant_and_decreasing(counts, beta, seed):
    w = class_balanced_weights(counts, beta)
    assert w.sum() == pytest.approx(len(counts))
    perm = np.random.default_rng(seed).permutation(len(counts))
    np.testing.assert_allclose(class_balanced_weights(np.asarray(counts)[perm], beta), w[perm],
                               rtol=1e-12)
    order = np.argsort(counts, kind="stable")
    sorted_w = w[order]
    assert np.all(np.diff(sorted_w) <= 1e-12)


def test_cb_rejects_bad_input():
    with pytest.raises(ConfigError):
        class_balanced_weights([1, 2], 1.0)
    with pytest.raises(DataError):
        class_balanced_weights([0, 2], 0.5)
    with pytest.raises(ConfigError):
        LossConfig("class_balanced")
    with pytest.raises(ConfigError):
        LossConfig("hinge")


@pytest.mark.parametrize("cfg", [
    LossConfig(),
    LossConfig("focal", 0.5),
    LossConfig("focal", 1.0),
    LossConfig("focal", 2.0),
    LossConfig("class_balanced", cb_beta=0.9, per_class_counts=[50, 10, 3, 1]),
    LossConfig("class_balanced", cb_beta=0.999, per_class_counts=[50, 10, 3, 1]),
    LossConfig("class_balanced", 1.0, 0.99, [50, 10, 3, 1]),
])
def test_loss_gradients_match_finite_differences(cfg, rng):
    for _ in range(3):
        logits = rng.normal(scale=2, size=(5, 4))
        y = rng.integers(0, 4, size=5)
        w = rng.uniform(0.2, 2, size=5)
        res = check_loss(cfg, logits, y, w)
        assert res.passed, res


def test_bad_inputs_rejected():
    with pytest.raises(DataError):
        cross_entropy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(DataError):
        cross_entropy(np.array([[np.nan, 0.0]]), [0])
    with pytest.raises(DataError):
        cross_entropy(np.zeros((2, 3)), [0, 1], [1.0, -1.0])
    with pytest.raises(ConfigError):
        focal_loss(np.zeros((1, 2)), [0], -1.0)


def test_compute_loss_dispatch(rng):
    logits = rng.normal(size=(4, 3))
    y = np.array([0, 1, 2, 2])
    cb = LossConfig("class_balanced", cb_beta=0.9, per_class_counts=[10, 5, 1])
    w = class_balanced_weights([10, 5, 1], 0.9)[y]
    assert compute_loss(logits, y, cb)[0] == pytest.approx(cross_entropy(logits, y, w)[0])
    assert compute_loss(logits, y, LossConfig("focal", 1.0))[0] == pytest.approx(
        focal_loss(logits, y, 1.0)[0])
