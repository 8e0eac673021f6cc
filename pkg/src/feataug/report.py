"""Metrics, confusion-matrix diffs, PCA feature scatters and report files."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from feataug.errors import DataError
from feataug.tensor_io import atomic_write_bytes

GROUPS = ("many", "medium", "few")


def group_of(train_count: int) -> str:
    """many: > 100, medium: 21..100, few: <= 20 training samples."""
    if train_count > 100:
        return "many"
    if train_count > 20:
        return "medium"
    return "few"


@dataclass
class Metrics:
    overall: float
    per_class: list[float]
    confusion: np.ndarray  # [C, C] int, rows = true class
    groups: dict[str, float | None]
    train_counts: list[int] = field(default_factory=list)
    phase: str = ""

    @property
    def test_counts(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    def group_accuracy(self, names: Sequence[str]) -> float | None:
        """Macro accuracy over the classes belonging to any of ``names``."""
        ids = [c for c, n in enumerate(self.train_counts) if group_of(n) in names]
        vals = [self.per_class[c] for c in ids if self.test_counts[c] > 0]
        return float(np.mean(vals)) if vals else None

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "overall": self.overall,
            "per_class": list(self.per_class),
            "groups": dict(self.groups),
            "confusion": self.confusion.tolist(),
            "train_counts": list(self.train_counts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(d["overall"], d["per_class"], np.asarray(d["confusion"], dtype=np.int64),
                   d["groups"], d.get("train_counts", []), d.get("phase", ""))


def compute_metrics(y_true, y_pred, n_classes: int, train_counts: Sequence[int] | None = None,
                    phase: str = "") -> Metrics:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (y_true, y_pred), 1)
    rows = conf.sum(axis=1)
    per_class = [float(conf[c, c] / rows[c]) if rows[c] else float("nan") for c in range(n_classes)]
    overall = float(np.trace(conf) / max(rows.sum(), 1))
    train_counts = list(train_counts) if train_counts is not None else []
    m = Metrics(overall, per_class, conf, {}, train_counts, phase)
    m.groups = {g: m.group_accuracy([g]) for g in GROUPS} if train_counts else {}
    return m


def diff_confusion(before: Metrics, after: Metrics) -> np.ndarray:
    if before.confusion.shape != after.confusion.shape:
        raise DataError(
            f"confusion shapes differ: {before.confusion.shape} vs {after.confusion.shape}"
        )
    if not np.array_equal(before.test_counts, after.test_counts):
        raise DataError("confusion matrices were computed on different test counts")
    return after.confusion - before.confusion


# --- feature scatter ---------------------------------------------------------


def masked_pooled(features: np.ndarray, masks: np.ndarray):
    """Mean feature vector over each sample's mask support.

    Returns ``(vectors [N, K], empty [N] bool)``; empty supports give zeros.
    """
    m = masks.reshape(len(masks), 1, -1).astype(features.dtype)
    f = features.reshape(features.shape[0], features.shape[1], -1)
    support = m.sum(axis=2)
    empty = support[:, 0] == 0
    vec = (f * m).sum(axis=2) / np.where(support > 0, support, 1)
    return vec, empty


@dataclass
class ScatterExport:
    points: np.ndarray  # [N, 2]
    labels: np.ndarray  # [N]
    kinds: list[str]  # "specific" / "generic" per point
    basis: np.ndarray  # [2, K], orthonormal rows
    eigenvalues: np.ndarray  # all covariance eigenvalues, descending
    degenerate: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "label", "kind"])
        for (x, y), lab, kind in zip(self.points, self.labels, self.kinds):
            w.writerow([repr(float(x)), repr(float(y)), int(lab), kind])
        return buf.getvalue()


def pca_scatter(vectors: np.ndarray, labels, kinds: Sequence[str]) -> ScatterExport:
    """Project onto the top two principal components of ``vectors``."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2 or x.shape[1] < 2:
        raise DataError(f"pca_scatter needs >= 2 samples of dimension >= 2, got {x.shape}")
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred / len(x)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0, None)
    basis = evecs[:, order[:2]].T
    # deterministic sign: largest-magnitude entry of each component is positive
    for i in range(2):
        if basis[i, np.argmax(np.abs(basis[i]))] < 0:
            basis[i] = -basis[i]
    degenerate = bool(evals[0] <= 1e-12 * max(1.0, np.abs(x).max() ** 2))
    points = np.zeros((len(x), 2)) if degenerate else centred @ basis.T
    return ScatterExport(points, np.asarray(labels), list(kinds), basis, evals, degenerate)


def feature_scatter(cache, max_per_class: int | None = None) -> ScatterExport:
    """Specific and generic masked means of every cached sample, jointly projected."""
    idx = np.arange(len(cache))
    if max_per_class is not None:
        idx = np.concatenate(
            [np.flatnonzero(cache.labels == c)[:max_per_class] for c in np.unique(cache.labels)]
        )
    feats = cache.features[idx]
    spec, spec_empty = masked_pooled(feats, cache.specific_masks[idx])
    gen, gen_empty = masked_pooled(feats, cache.generic_masks[idx])
    keep_s, keep_g = ~spec_empty, ~gen_empty
    vectors = np.concatenate([spec[keep_s], gen[keep_g]])
    labels = np.concatenate([cache.labels[idx][keep_s], cache.labels[idx][keep_g]])
    kinds = ["specific"] * int(keep_s.sum()) + ["generic"] * int(keep_g.sum())
    return pca_scatter(vectors, labels, kinds)


def class_spread(export: ScatterExport, kind: str) -> float:
    """Between-class over within-class scatter of the 2-D points of one kind."""
    sel = np.array([k == kind for k in export.kinds])
    pts, labs = export.points[sel], export.labels[sel]
    centre = pts.mean(axis=0)
    between = within = 0.0
    for c in np.unique(labs):
        p = pts[labs == c]
        mu = p.mean(axis=0)
        between += len(p) * float(((mu - centre) ** 2).sum())
        within += float(((p - mu) ** 2).sum())
    return between / within if within > 0 else float("inf")


# --- file output -------------------------------------------------------------


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _clean(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def per_class_csv(metrics: Metrics) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "train_count", "group", "test_count", "correct", "accuracy"])
    for c, acc in enumerate(metrics.per_class):
        n = metrics.train_counts[c] if metrics.train_counts else ""
        w.writerow([c, n, group_of(n) if n != "" else "", int(metrics.test_counts[c]),
                    int(metrics.confusion[c, c]), repr(float(acc))])
    return buf.getvalue()


def groups_csv(metrics_by_phase: dict[str, Metrics]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase", "overall", *GROUPS])
    for phase, m in metrics_by_phase.items():
        w.writerow([phase, repr(m.overall)] + ["" if m.groups.get(g) is None else repr(m.groups[g]) for g in GROUPS])
    return buf.getvalue()


def summary_dict(metrics: Metrics) -> dict:
    return {
        "phase": metrics.phase,
        "overall": metrics.overall,
        "per_class": [_clean(v) for v in metrics.per_class],
        "groups": {g: _clean(metrics.groups.get(g)) for g in GROUPS},
    }


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"]


def learning_curve_svg(curves: dict[str, list[tuple[float, float]]], width=640, height=360) -> str:
    """One polyline per named curve; x is a global step, y an accuracy in [0, 1]."""
    pad = 40
    xs = [x for pts in curves.values() for x, _ in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    span = (x1 - x0) or 1.0

    def sx(x):
        return pad + (x - x0) / span * (width - 2 * pad)

    def sy(y):
        return height - pad - y * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
    ]
    for i, (name, pts) in enumerate(curves.items()):
        colour = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{coords}">'
                     f"<title>{escape(name)}</title></polyline>")
        parts.append(f'<text x="{width - pad - 150}" y="{pad + 14 * i}" fill="{colour}" '
                     f'font-size="11">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def heatmap_svg(matrix: np.ndarray, title: str, cell=28, signed=False) -> str:
    m = np.asarray(matrix, dtype=np.float64)
    n = m.shape[0]
    pad = 30
    size = pad + n * cell + 10
    scale = np.abs(m).max() or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{size}" height="{size}">',
             f'<text x="{pad}" y="18" font-size="12">{escape(title)}</text>']
    for i in range(n):
        for j in range(m.shape[1]):
            v = m[i, j] / scale
            if signed:
                r, g, b = (255, int(255 * (1 - v)), int(255 * (1 - v))) if v >= 0 else \
                    (int(255 * (1 + v)), int(255 * (1 + v)), 255)
            else:
                shade = int(255 * (1 - max(v, 0)))
                r, g, b = shade, shade, 255
            parts.append(f'<rect x="{pad + j * cell}" y="{pad + i * cell}" width="{cell}" '
                         f'height="{cell}" fill="rgb({r},{g},{b})"><title>{int(m[i, j])}</title></rect>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def scatter_svg(export: ScatterExport, width=640, height=320) -> str:
    """Two panels: class-specific points left, class-generic points right."""
    pts = export.points
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    half = width // 2
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}">']
    for panel, kind in enumerate(("specific", "generic")):
        parts.append(f'<text x="{panel * half + 10}" y="16" font-size="12">class-{kind}</text>')
        for (x, y), lab, k in zip(pts, export.labels, export.kinds):
            if k != kind:
                continue
            cx = panel * half + 15 + (x - lo[0]) / span[0] * (half - 30)
            cy = height - 15 - (y - lo[1]) / span[1] * (height - 45)
            parts.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="2" '
                         f'fill="{_PALETTE[int(lab) % len(_PALETTE)]}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(out_dir: str | os.PathLike, metrics_by_phase: dict[str, Metrics],
                curves: dict[str, list[tuple[float, float]]], extra: dict | None = None,
                scatter: ScatterExport | None = None) -> list[Path]:
    """Write CSV tables, the JSON summary and SVG figures; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        atomic_write_bytes(out / name, text.encode("utf-8"))
        written.append(out / name)

    for phase, m in metrics_by_phase.items():
        put(f"per_class_{phase}.csv", per_class_csv(m))
        put(f"confusion_{phase}.svg", heatmap_svg(m.confusion, f"confusion ({phase})"))
    put("groups.csv", groups_csv(metrics_by_phase))
    phases = list(metrics_by_phase)
    if len(phases) >= 2:
        d = diff_confusion(metrics_by_phase[phases[0]], metrics_by_phase[phases[-1]])
        put("confusion_diff.svg", heatmap_svg(d, f"{phases[-1]} - {phases[0]}", signed=True))
    put("learning_curve.svg", learning_curve_svg(curves))
    summary = {"phases": {p: summary_dict(m) for p, m in metrics_by_phase.items()}}
    if extra:
        summary.update(extra)
    put("summary.json", canonical_json(summary))
    if scatter is not None:
        put("scatter.csv", scatter.to_csv())
        put("scatter.svg", scatter_svg(scatter))
    return written
