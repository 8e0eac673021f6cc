"""Head/tail split, confusing-class ranking and online synthesis of
augmented tail samples for classifier fine-tuning.

An augmented sample for tail class ``c`` is built from one real sample of
``c`` and one sample of a confusing head class ``u``: ``floor(gamma * L)``
feature vectors are drawn (with replacement) from the class-specific
locations of the tail sample, the remaining ones from the class-generic
locations of the head sample, and the ``L`` drawn vectors are averaged.
Because the classifier sits after global average pooling, the spatial
arrangement of the drawn vectors does not matter, so the pooled vector is
all that is kept.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from feataug.cam import FeatureCache
from feataug.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

TAIL_REAL, AUGMENTED, HEAD_REAL = "tail_real", "augmented", "head_real"


@dataclass
class HeadTailSplit:
    h: int
    h_r_target: float
    head_class_ids: list[int]
    tail_class_ids: list[int]
    head_ratio: float


def split_head_tail(counts: Sequence[int], h_r_target: float = 0.9) -> HeadTailSplit:
    """Smallest head set (largest classes first) holding ``h_r_target`` of the data.

    Classes with equal counts keep ascending id order.
    """
    counts = [int(c) for c in counts]
    if not 0 < h_r_target < 1:
        raise ConfigError(f"h_r_target must be in (0, 1), got {h_r_target}")
    if len(counts) < 2:
        raise DataError("a head/tail split needs at least two classes")
    order = sorted(range(len(counts)), key=lambda c: (-counts[c], c))
    total = float(sum(counts))
    cum = 0
    for h, c in enumerate(order, start=1):
        cum += counts[c]
        if cum / total >= h_r_target:
            break
    if h >= len(counts):
        raise DataError(f"no tail classes under h_r_target={h_r_target}")
    return HeadTailSplit(h, h_r_target, order[:h], order[h:], cum / total)


def class_mean_scores(probs: np.ndarray, labels: np.ndarray, c: int) -> np.ndarray:
    rows = probs[labels == c].astype(np.float64)
    if len(rows) == 0:
        raise DataError(f"tail class {c} has no samples in the cache")
    return rows.sum(axis=0) / len(rows)


def rank_confusing(probs: np.ndarray, labels: np.ndarray, split: HeadTailSplit,
                   c: int, n_f: int) -> list[tuple[int, float]]:
    """Top ``n_f`` head classes by mean softmax score over the samples of ``c``.

    Returns ``(class_id, mean_score)`` pairs, best first, ties to the lower id.
    """
    if c not in split.tail_class_ids:
        raise DataError(f"class {c} is not a tail class")
    means = class_mean_scores(probs, np.asarray(labels), c)
    candidates = sorted(split.head_class_ids, key=lambda u: (-means[u], u))
    return [(u, float(means[u])) for u in candidates[:n_f]]


def rank_all(cache: FeatureCache, split: HeadTailSplit, n_f: int) -> dict[int, list[int]]:
    return {
        c: [u for u, _ in rank_confusing(cache.probs, cache.labels, split, c, n_f)]
        for c in split.tail_class_ids
    }


def n_specific(gamma: float, n_locations: int) -> int:
    """Number of class-specific vectors; at least one of each kind is kept."""
    return int(min(max(np.floor(gamma * n_locations), 1), n_locations - 1))


def synthesize_sample(tail_features, tail_locations, confusing_features, generic_locations,
                      gamma: float, rng: np.random.Generator):
    """Pooled augmented feature from flattened ``[K, L]`` feature maps.

    ``tail_locations`` / ``generic_locations`` are the candidate location
    indices (already restricted to non-zero vectors). Returns the pooled
    ``[K]`` vector and the drawn location indices of each side.
    """
    if not 0 < gamma < 1:
        raise ConfigError(f"gamma must be in (0, 1), got {gamma}")
    L = tail_features.shape[1]
    if L < 2:
        raise DataError("need at least two spatial locations to mix features")
    n_s = n_specific(gamma, L)
    spec_idx = rng.choice(tail_locations, size=n_s, replace=True)
    gen_idx = rng.choice(generic_locations, size=L - n_s, replace=True)
    pooled = (tail_features[:, spec_idx].sum(axis=1)
              + confusing_features[:, gen_idx].sum(axis=1)) / L
    return pooled, spec_idx, gen_idx


@dataclass
class Phase2Batch:
    features: np.ndarray  # [B, K] pooled
    labels: np.ndarray  # [B]
    provenance: list[str]
    tail_source: np.ndarray  # [B] sample index of the tail sample, -1 otherwise
    confusing_source: np.ndarray  # [B] sample index of the head sample used, -1 otherwise
    gamma: np.ndarray  # [B], nan for real samples
    sample_index: np.ndarray  # [B] cache row for real samples, -1 for augmented

    def __len__(self) -> int:
        return len(self.labels)

    def counts(self) -> dict[str, int]:
        return {k: self.provenance.count(k) for k in (TAIL_REAL, AUGMENTED, HEAD_REAL)}

    def to_jsonl(self) -> str:
        lines = []
        for i in range(len(self)):
            rec = {
                "label": int(self.labels[i]),
                "provenance": self.provenance[i],
                "sample": int(self.sample_index[i]),
            }
            if self.provenance[i] == AUGMENTED:
                rec.update(
                    tail_source=int(self.tail_source[i]),
                    confusing_source=int(self.confusing_source[i]),
                    gamma=float(self.gamma[i]),
                )
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"


def _support(mask_flat: np.ndarray, nonzero: np.ndarray) -> np.ndarray:
    return np.flatnonzero(mask_flat.astype(bool) & nonzero)


@dataclass
class AugmentationSampler:
    """Draws `Phase2Batch` es from a feature cache.

    Candidate locations are precomputed per sample: the mask support minus
    all-zero vectors, falling back to every non-zero location when the mask
    support is empty.
    """

    cache: FeatureCache
    split: HeadTailSplit
    ranking: dict[int, list[int]]
    gamma_range: tuple[float, float] = (0.3, 0.7)
    fallbacks: int = 0
    skipped: int = 0
    _by_class: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        lo, hi = self.gamma_range
        if not 0 < lo <= hi < 1:
            raise ConfigError(f"gamma range must satisfy 0 < min <= max < 1, got {self.gamma_range}")
        if not self.split.head_class_ids or not self.split.tail_class_ids:
            raise DataError("both head and tail sides of the split must be non-empty")
        n, k, h, w = self.cache.features.shape
        self.flat = self.cache.features.reshape(n, k, h * w)
        self.pooled = self.cache.pooled
        labels = self.cache.labels
        for c in set(self.split.head_class_ids) | set(self.split.tail_class_ids):
            idx = np.flatnonzero(labels == c)
            if len(idx) == 0:
                raise DataError(f"class {c} has no samples in the cache")
            self._by_class[c] = idx
        nonzero = np.any(self.flat != 0, axis=1)  # [N, L]
        spec = self.cache.specific_masks.reshape(n, -1)
        gen = self.cache.generic_masks.reshape(n, -1)
        self._spec_locs: dict[int, np.ndarray] = {}
        self._gen_locs: dict[int, np.ndarray] = {}
        self._nonzero = nonzero
        self._spec = spec
        self._gen = gen

    def _locations(self, i: int, kind: str) -> np.ndarray:
        store = self._spec_locs if kind == "specific" else self._gen_locs
        if i not in store:
            mask = self._spec[i] if kind == "specific" else self._gen[i]
            locs = _support(mask, self._nonzero[i])
            if len(locs) == 0:
                locs = np.flatnonzero(self._nonzero[i])
                self.fallbacks += 1
                logger.debug("sample %d: empty %s support, using all non-zero locations", i, kind)
            store[i] = locs
        return store[i]

    def _draw_from(self, c: int, rng: np.random.Generator) -> int:
        idx = self._by_class[c]
        return int(idx[rng.integers(len(idx))])

    def _augment(self, t: int, u_cls: int, rng, max_tries: int = 10):
        spec_locs = self._locations(t, "specific")
        for _ in range(max_tries):
            s = self._draw_from(u_cls, rng)
            gamma = float(rng.uniform(*self.gamma_range))
            gen_locs = self._locations(s, "generic")
            if len(spec_locs) and len(gen_locs):
                pooled, _, _ = synthesize_sample(
                    self.flat[t], spec_locs, self.flat[s], gen_locs, gamma, rng
                )
                return pooled, s, gamma
            self.skipped += 1
            logger.warning("skipped augmentation of sample %d with %d: empty support", t, s)
        # every source was degenerate; fall back to the real tail feature
        return self.pooled[t], -1, float("nan")

    def build_batch(self, n_t: int, n_a: int, rng: np.random.Generator) -> Phase2Batch:
        """``n_t`` tail samples, ``n_t * n_a`` augmented ones, ``n_t * (1 + n_a)`` head ones."""
        if n_t < 1 or n_a < 0:
            raise ConfigError(f"need n_t >= 1 and n_a >= 0, got n_t={n_t}, n_a={n_a}")
        tail = self.split.tail_class_ids
        head = self.split.head_class_ids
        feats, labels, prov, tsrc, csrc, gammas, sidx = [], [], [], [], [], [], []

        def add(f, y, p, ts=-1, cs=-1, g=float("nan"), si=-1):
            feats.append(f)
            labels.append(y)
            prov.append(p)
            tsrc.append(ts)
            csrc.append(cs)
            gammas.append(g)
            sidx.append(si)

        for _ in range(n_t):
            c = tail[rng.integers(len(tail))]
            t = self._draw_from(c, rng)
            add(self.pooled[t], c, TAIL_REAL, si=t)
            confusing = self.ranking[c]
            for j in range(n_a):
                u = confusing[j % len(confusing)]
                pooled, s, gamma = self._augment(t, u, rng)
                add(pooled, c, AUGMENTED, ts=t, cs=s, g=gamma)
        for _ in range(n_t * (1 + n_a)):
            c = head[rng.integers(len(head))]
            s = self._draw_from(c, rng)
            add(self.pooled[s], c, HEAD_REAL, si=s)

        return Phase2Batch(
            np.stack(feats).astype(self.cache.features.dtype),
            np.asarray(labels, dtype=np.int64),
            prov,
            np.asarray(tsrc, dtype=np.int64),
            np.asarray(csrc, dtype=np.int64),
            np.asarray(gammas, dtype=np.float64),
            np.asarray(sidx, dtype=np.int64),
        )


def build_batch(cache: FeatureCache, split: HeadTailSplit, ranking: dict[int, list[int]],
                n_t: int, n_a: int, rng: np.random.Generator,
                gamma_range: tuple[float, float] = (0.3, 0.7)) -> Phase2Batch:
    return AugmentationSampler(cache, split, ranking, gamma_range).build_batch(n_t, n_a, rng)
