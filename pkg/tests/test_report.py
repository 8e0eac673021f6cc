import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feataug.errors import DataError
from feataug.report import (Metrics, canonical_json, class_spread, compute_metrics, diff_confusion,
                            emit_report, feature_scatter, group_of, groups_csv, learning_curve_svg,
                            masked_pooled, pca_scatter, per_class_csv, summary_dict)

COUNTS = [500, 120, 60, 20, 5]


def _metrics(rng, n_per=10, phase="p"):
    y = np.repeat(np.arange(5), n_per)
    pred = np.where(rng.uniform(size=len(y)) < 0.6, y, rng.integers(0, 5, size=len(y)))
    return compute_metrics(y, pred, 5, COUNTS, phase)


def test_groups():
    assert [group_of(n) for n in (101, 100, 21, 20, 1)] == ["many", "medium", "medium", "few", "few"]


def test_perfect_and_constant_predictors():
    y = np.array([0, 0, 1, 2, 2, 2])
    m = compute_metrics(y, y, 3, [200, 50, 5])
    assert m.overall == 1.0
    np.testing.assert_array_equal(np.diag(m.confusion), [2, 1, 3])
    m = compute_metrics(y, np.zeros_like(y), 3)
    assert m.overall == pytest.approx(2 / 6)


def test_absent_class_group_is_none():
    y = np.array([0, 0, 1])
    m = compute_metrics(y, y, 3, [200, 50, 5])
    assert m.groups["few"] is None and m.groups["many"] == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metric_invariants(seed):
    r = np.random.default_rng(seed)
    y = r.integers(0, 4, size=50)
    pred = r.integers(0, 4, size=50)
    m = compute_metrics(y, pred, 4, [300, 80, 10, 2])
    np.testing.assert_array_equal(m.confusion.sum(axis=1), np.bincount(y, minlength=4))
    tc = m.test_counts
    acc = [a for a in m.per_class]
    weighted = sum(a * n for a, n in zip(acc, tc) if n) / tc.sum()
    assert m.overall == pytest.approx(weighted)
    m2 = compute_metrics(y, r.integers(0, 4, size=50), 4, [300, 80, 10, 2])
    d = diff_confusion(m, m2)
    assert np.all(d.sum(axis=1) == 0)


def test_diff_examples(rng):
    m = _metrics(rng)
    assert not diff_confusion(m, m).any()
    # one few-class sample moves from an off-diagonal cell to the diagonal
    conf = m.confusion.copy()
    j = int(np.flatnonzero(np.arange(5) != 4)[np.argmax(conf[4, :4])])
    conf[4, j] -= 1
    conf[4, 4] += 1
    d = diff_confusion(m, Metrics(0.0, m.per_class, conf, {}))
    assert d[4, 4] == 1 and d[4].sum() == 0 and d[4, j] == -1
    with pytest.raises(DataError):
        diff_confusion(m, Metrics(m.overall, m.per_class, np.zeros((3, 3), int), {}))


def test_pca_axis_aligned():
    r = np.random.default_rng(0)
    x = r.normal(size=(2000, 2)) * [2.0, 1.0]
    e = pca_scatter(x, np.zeros(2000), ["specific"] * 2000)
    assert abs(e.basis[0, 0]) == pytest.approx(1.0, abs=0.01)
    assert e.eigenvalues[0] == pytest.approx(4.0, rel=0.1)


def test_pca_degenerate():
    e = pca_scatter(np.ones((5, 3)), np.zeros(5), ["generic"] * 5)
    assert e.degenerate and not e.points.any()
    with pytest.raises(DataError):
        pca_scatter(np.ones((1, 3)), [0], ["generic"])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 8))
def test_pca_against_brute_force(seed, k):
    r = np.random.default_rng(seed)
    x = r.normal(size=(30, k)) @ r.normal(size=(k, k))
    e = pca_scatter(x, np.zeros(30), ["specific"] * 30)
    np.testing.assert_allclose(e.basis @ e.basis.T, np.eye(2), atol=1e-6)
    assert np.all(np.diff(e.eigenvalues) <= 1e-9)
    centred = x - x.mean(axis=0)
    cov = np.cov(centred.T, bias=True)
    ref = np.sort(np.linalg.eigvalsh(cov))[::-1]
    np.testing.assert_allclose(e.eigenvalues, ref, atol=1e-8)
    recon = e.points @ e.basis
    err = ((centred - recon) ** 2).sum(axis=1).mean()
    assert err == pytest.approx(ref.sum() - ref[:2].sum(), abs=1e-8)


def test_masked_pooled_and_spread(small_cache):
    v, empty = masked_pooled(small_cache.features, small_cache.specific_masks)
    i = int(np.flatnonzero(~empty)[0])
    m = small_cache.specific_masks[i].astype(bool)
    np.testing.assert_allclose(v[i], small_cache.features[i][:, m].mean(axis=1))
    e = feature_scatter(small_cache, max_per_class=5)
    assert set(e.kinds) <= {"specific", "generic"}
    assert class_spread(e, "specific") >= 0


def test_tables_reparse_exactly(rng):
    m = _metrics(rng)
    rows = list(csv.DictReader(io.StringIO(per_class_csv(m))))
    assert len(rows) == 5
    assert [float(r["accuracy"]) for r in rows] == m.per_class
    assert [int(r["correct"]) for r in rows] == np.diag(m.confusion).tolist()
    g = list(csv.DictReader(io.StringIO(groups_csv({"p": m}))))
    assert float(g[0]["overall"]) == m.overall
    assert float(g[0]["few"]) == m.groups["few"]
    back = Metrics.from_dict(json.loads(canonical_json(m.to_dict())))
    assert back.overall == m.overall and back.per_class == m.per_class
    np.testing.assert_array_equal(back.confusion, m.confusion)


def test_learning_curve_one_polyline_per_curve():
    svg = learning_curve_svg({"phase1": [(1, 0.2), (2, 0.4)], "phase2_augmented": [(3, 0.5)],
                              "phase2_no_aug": [(3, 0.45)]})
    assert svg.count("<polyline") == 3


def test_emit_report(tmp_path, rng, small_cache):
    a, b = _metrics(rng, phase="phase1"), _metrics(rng, phase="phase2")
    written = emit_report(tmp_path, {"phase1": a, "phase2": b}, {"phase1": [(1, 0.5)]},
                          {"seed": 0}, feature_scatter(small_cache))
    names = {p.name for p in written}
    assert {"groups.csv", "summary.json", "learning_curve.svg", "confusion_diff.svg",
            "per_class_phase1.csv", "scatter.csv"} <= names
    text = (tmp_path / "summary.json").read_text()
    assert canonical_json(json.loads(text)) == text
    assert json.loads(text)["phases"]["phase1"] == json.loads(canonical_json(summary_dict(a)))
    assert len((tmp_path / "per_class_phase1.csv").read_text().splitlines()) == 6
