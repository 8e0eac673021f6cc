import numpy as np

from feataug import gradcheck
from feataug.losses import LossConfig
from feataug.nn import init_params


def test_layer_checks_pass(rng):
    for check in (gradcheck.check_conv, gradcheck.check_relu, gradcheck.check_pool,
                  gradcheck.check_gap, gradcheck.check_fc):
        res = check(rng)
        assert res.passed, res


def test_network_check_passes(rng):
    params = init_params(3, 2, (3, 4), seed=0)
    x = rng.normal(size=(4, 2, 8, 8))
    y = np.array([0, 1, 2, 1])
    results = gradcheck.check_network(params, x, y, LossConfig("focal", 1.0), max_coords=20, rng=rng)
    assert set(results) == {"conv0.weight", "conv0.bias", "conv1.weight", "conv1.bias",
                            "fc.weight", "fc.bias"}
    for res in results.values():
        assert res.passed, res


def test_check_detects_a_wrong_gradient(rng):
    x = rng.normal(size=5)
    # claims d tanh / dx = 1 everywhere
    res = gradcheck._linear_check("broken", lambda: np.tanh(x), lambda up: (up,), x, 1e-3, rng)
    assert not res.passed
