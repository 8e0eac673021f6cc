import numpy as np
import pytest

from feataug.cam import FeatureCache, compute_cam, decompose, normalize_cam, softmax


def random_cache(rng, counts, k=6, h=3, w=3, tau_s=0.5, tau_g=0.5, sparsity=0.3):
    """A feature cache built from random non-negative (ReLU-like) feature maps."""
    labels = np.repeat(np.arange(len(counts)), counts)
    n = len(labels)
    feats = rng.uniform(0, 1, size=(n, k, h, w))
    feats[rng.uniform(size=feats.shape) < sparsity] = 0.0
    weight = rng.normal(size=(len(counts), k))
    raw = compute_cam(feats, weight[labels])
    norm = normalize_cam(raw)
    spec, gen = decompose(norm, tau_s, tau_g)
    probs = softmax(feats.mean(axis=(2, 3)) @ weight.T)
    return FeatureCache(feats, raw, norm, spec, gen, probs, labels, tau_s, tau_g, "test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cache(rng):
    return random_cache(rng, [40, 25, 12, 6, 3])


ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
