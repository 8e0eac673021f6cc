from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feataug import augmentation as aug
from feataug.errors import ConfigError, DataError

from conftest import random_cache


def brute_split(counts, target):
    """Try every h from 1 upwards with exact rational arithmetic."""
    order = sorted(range(len(counts)), key=lambda c: (-counts[c], c))
    total = sum(counts)
    for h in range(1, len(counts) + 1):
        if Fraction(sum(counts[c] for c in order[:h]), total) >= Fraction(str(target)):
            return h, order[:h], order[h:]
    return None


def test_split_examples():
    s = aug.split_head_tail([500, 100, 50, 10], 0.9)
    assert (s.h, s.head_class_ids, s.tail_class_ids) == (2, [0, 1], [2, 3])
    assert s.head_ratio == pytest.approx(600 / 660)
    assert aug.split_head_tail([10, 10], 0.4).h == 1
    with pytest.raises(DataError):
        aug.split_head_tail([5, 5], 0.99)
    with pytest.raises(ConfigError):
        aug.split_head_tail([5, 5], 1.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 60), min_size=2, max_size=10), st.sampled_from([0.5, 0.7, 0.8, 0.9, 0.95]))
def test_split_matches_brute_force(counts, target):
    ref = brute_split(counts, target)
    if ref[0] == len(counts):
        with pytest.raises(DataError):
            aug.split_head_tail(counts, target)
        return
    s = aug.split_head_tail(counts, target)
    assert (s.h, s.head_class_ids, s.tail_class_ids) == ref


def test_rank_example():
    probs = np.array([[0.1, 0.6, 0.2, 0.1], [0.1, 0.2, 0.5, 0.2]])
    labels = np.array([3, 3])
    split = aug.HeadTailSplit(3, 0.9, [0, 1, 2], [3], 0.9)
    ranked = aug.rank_confusing(probs, labels, split, 3, 2)
    assert [u for u, _ in ranked] == [1, 2]
    assert [s for _, s in ranked] == pytest.approx([0.40, 0.35])


def test_rank_ties_and_short_lists():
    probs = np.array([[0.25, 0.25, 0.1, 0.4]])
    split = aug.HeadTailSplit(3, 0.9, [2, 1, 0], [3], 0.9)
    assert [u for u, _ in aug.rank_confusing(probs, np.array([3]), split, 3, 5)] == [0, 1, 2]
    with pytest.raises(DataError):
        aug.rank_confusing(probs, np.array([0]), split, 3, 1)
    with pytest.raises(DataError):
        aug.rank_confusing(probs, np.array([3]), split, 0, 1)


@pytest.mark.parametrize("gamma,L,n_s", [(0.5, 4, 2), (0.3, 4, 1), (0.01, 16, 1), (0.99, 16, 15)])
def test_n_specific(gamma, L, n_s):
    assert aug.n_specific(gamma, L) == n_s


def test_synthesize_is_mean_of_drawn_vectors(rng):
    tail = rng.normal(size=(5, 4))
    conf = rng.normal(size=(5, 4))
    pooled, si, gi = aug.synthesize_sample(tail, np.array([0, 2]), conf, np.array([1, 3]), 0.5, rng)
    assert len(si) == 2 and len(gi) == 2
    assert set(si) <= {0, 2} and set(gi) <= {1, 3}
    np.testing.assert_allclose(pooled, np.concatenate([tail[:, si], conf[:, gi]], axis=1).mean(axis=1))
    with pytest.raises(ConfigError):
        aug.synthesize_sample(tail, np.array([0]), conf, np.array([1]), 1.0, rng)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.001, 0.999))
def test_synthesized_sample_in_convex_hull_and_mixed(seed, gamma):
    r = np.random.default_rng(seed)
    L = int(r.integers(2, 20))
    tail, conf = r.normal(size=(2, 3, L))
    pooled, si, gi = aug.synthesize_sample(tail, np.arange(L), conf, np.arange(L), gamma, r)
    assert len(si) >= 1 and len(gi) >= 1 and len(si) + len(gi) == L
    drawn = np.concatenate([tail[:, si], conf[:, gi]], axis=1)
    assert np.all(pooled <= drawn.max(axis=1) + 1e-12)
    assert np.all(pooled >= drawn.min(axis=1) - 1e-12)


def _sampler(cache, n_f=2, gamma=(0.3, 0.7)):
    counts = np.bincount(cache.labels).tolist()
    split = aug.split_head_tail(counts, 0.7)
    ranking = aug.rank_all(cache, split, n_f)
    return aug.AugmentationSampler(cache, split, ranking, gamma), split, ranking


def test_batch_composition_and_provenance(small_cache, rng):
    sampler, split, ranking = _sampler(small_cache)
    b = sampler.build_batch(2, 3, rng)
    assert len(b) == 16
    assert b.counts() == {"tail_real": 2, "augmented": 6, "head_real": 8}
    head = set(split.head_class_ids)
    assert sum(l in head for l in b.labels) == 8
    for i, p in enumerate(b.provenance):
        if p == "augmented":
            t, s = b.tail_source[i], b.confusing_source[i]
            assert small_cache.labels[t] == b.labels[i]
            assert small_cache.labels[s] in ranking[b.labels[i]]
            assert 0.3 <= b.gamma[i] <= 0.7
        else:
            np.testing.assert_allclose(b.features[i], small_cache.pooled[b.sample_index[i]])
    lines = b.to_jsonl().splitlines()
    assert len(lines) == 16


def test_confusing_classes_cycle(small_cache):
    sampler, split, ranking = _sampler(small_cache, n_f=2)
    b = sampler.build_batch(1, 4, np.random.default_rng(0))
    c = b.labels[0]
    used = [small_cache.labels[s] for s, p in zip(b.confusing_source, b.provenance) if p == "augmented"]
    assert used == [ranking[c][j % 2] for j in range(4)]


def test_no_aug_batch(small_cache, rng):
    sampler, _, _ = _sampler(small_cache)
    b = sampler.build_batch(1, 0, rng)
    assert b.counts() == {"tail_real": 1, "augmented": 0, "head_real": 1}


def test_batches_are_seed_deterministic(small_cache):
    a = _sampler(small_cache)[0]
    b = _sampler(small_cache)[0]
    ra, rb = np.random.default_rng(9), np.random.default_rng(9)
    for _ in range(3):
        x, y = a.build_batch(3, 2, ra), b.build_batch(3, 2, rb)
        np.testing.assert_array_equal(x.features, y.features)
        np.testing.assert_array_equal(x.labels, y.labels)


def test_empty_supports_fall_back_to_nonzero_locations(rng):
    cache = random_cache(rng, [20, 10, 3], tau_s=0.5, tau_g=0.5)
    cache.specific_masks[:] = 0  # no specific support anywhere
    sampler, _, _ = _sampler(cache)
    b = sampler.build_batch(2, 2, rng)
    assert sampler.fallbacks > 0
    assert b.counts()["augmented"] == 4


def test_all_zero_sources_are_skipped_and_counted(rng):
    cache = random_cache(rng, [20, 10, 3])
    cache.features[cache.labels != 2] = 0.0  # head samples carry no features at all
    sampler, _, _ = _sampler(cache)
    b = sampler.build_batch(1, 1, rng)
    assert sampler.skipped > 0
    aug_row = b.provenance.index("augmented")
    np.testing.assert_allclose(b.features[aug_row], cache.pooled[b.tail_source[aug_row]])


def test_sampler_rejects_bad_arguments(small_cache, rng):
    sampler, split, ranking = _sampler(small_cache)
    with pytest.raises(ConfigError):
        sampler.build_batch(0, 1, rng)
    with pytest.raises(ConfigError):
        aug.AugmentationSampler(small_cache, split, ranking, (0.0, 0.5))
