"""Class activation maps and their split into class-specific and
class-generic support masks.

A CAM for class ``c`` is the classifier row ``w_c`` applied as a 1x1
convolution over the pre-pooling feature maps. After per-map min-max
normalisation, locations scoring above ``tau_s`` are class-specific and
locations scoring below ``tau_g`` are class-generic (both strict).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from feataug import tensor_io
from feataug.errors import DataError
from feataug.nn import ModelParams, extract_features


@dataclass
class CamRecord:
    raw: np.ndarray
    normalized: np.ndarray
    specific_mask: np.ndarray
    generic_mask: np.ndarray
    class_id: int
    tau_s: float
    tau_g: float


def compute_cam(features: np.ndarray, fc_weight_row: np.ndarray) -> np.ndarray:
    """``raw[x, y] = sum_k w[k] * features[k, x, y]``.

    Also accepts a batch ``[N, K, h, w]`` with one row per sample ``[N, K]``.
    """
    features = np.asarray(features)
    w = np.asarray(fc_weight_row)
    if features.shape[-3] != w.shape[-1]:
        raise DataError(
            f"features have {features.shape[-3]} channels, classifier row has {w.shape[-1]}"
        )
    if features.ndim == 3:
        return np.tensordot(w, features, axes=(0, 0))
    if features.ndim == 4 and w.ndim == 2 and len(w) == len(features):
        return np.einsum("nk,nkhw->nhw", w, features)
    raise DataError(f"unsupported shapes features={features.shape} weights={w.shape}")


def normalize_cam(raw: np.ndarray) -> np.ndarray:
    """Min-max scale each map to [0, 1]; a constant map becomes all zeros.

    The last two axes are the spatial ones; leading axes are a batch.
    """
    raw = np.asarray(raw)
    if np.isnan(raw).any():
        raise DataError("NaN in class activation map")
    lo = raw.min(axis=(-2, -1), keepdims=True) if raw.ndim >= 2 else raw.min()
    hi = raw.max(axis=(-2, -1), keepdims=True) if raw.ndim >= 2 else raw.max()
    span = hi - lo
    safe = np.where(span > 0, span, 1)
    return np.where(span > 0, (raw - lo) / safe, 0).astype(raw.dtype)


def _check_thresholds(tau_s: float, tau_g: float) -> None:
    for name, t in (("tau_s", tau_s), ("tau_g", tau_g)):
        if not 0 < t < 1:
            raise DataError(f"{name} must lie strictly inside (0, 1), got {t}")


def decompose(normalized: np.ndarray, tau_s: float = 0.5, tau_g: float = 0.5):
    """Binary ``(specific, generic)`` masks: ``m > tau_s`` and ``m < tau_g``."""
    _check_thresholds(tau_s, tau_g)
    normalized = np.asarray(normalized)
    return (normalized > tau_s).astype(np.uint8), (normalized < tau_g).astype(np.uint8)


def cam_record(features, params: ModelParams, class_id: int, tau_s=0.5, tau_g=0.5) -> CamRecord:
    raw = compute_cam(features, params.fc_weight[class_id])
    norm = normalize_cam(raw)
    spec, gen = decompose(norm, tau_s, tau_g)
    return CamRecord(raw, norm, spec, gen, int(class_id), tau_s, tau_g)


def params_fingerprint(params: ModelParams) -> str:
    h = hashlib.sha256()
    for name, arr in params.named():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return h.hexdigest()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class FeatureCache:
    """Pre-pooling features, ground-truth CAMs and softmax outputs of a split."""

    features: np.ndarray  # [N, K, h, w]
    raw_cams: np.ndarray  # [N, h, w]
    normalized: np.ndarray  # [N, h, w]
    specific_masks: np.ndarray  # [N, h, w] uint8
    generic_masks: np.ndarray  # [N, h, w] uint8
    probs: np.ndarray  # [N, C]
    labels: np.ndarray  # [N]
    tau_s: float
    tau_g: float
    fingerprint: str

    @property
    def pooled(self) -> np.ndarray:
        return self.features.mean(axis=(2, 3))

    def __len__(self) -> int:
        return len(self.labels)

    def record(self, i: int) -> CamRecord:
        return CamRecord(
            self.raw_cams[i],
            self.normalized[i],
            self.specific_masks[i],
            self.generic_masks[i],
            int(self.labels[i]),
            self.tau_s,
            self.tau_g,
        )

    def with_thresholds(self, tau_s: float, tau_g: float) -> "FeatureCache":
        spec, gen = decompose(self.normalized, tau_s, tau_g)
        return FeatureCache(
            self.features, self.raw_cams, self.normalized, spec, gen,
            self.probs, self.labels, tau_s, tau_g, self.fingerprint,
        )


def cache_all(params: ModelParams, images: np.ndarray, labels: np.ndarray,
              tau_s: float = 0.5, tau_g: float = 0.5, batch_size: int = 256) -> FeatureCache:
    """Features, ground-truth-class CAM records and softmax for every sample."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    if len(labels) and labels.max() >= params.n_classes:
        raise DataError(
            f"label {labels.max()} out of range for a {params.n_classes}-class checkpoint"
        )
    _check_thresholds(tau_s, tau_g)
    feats, _, logits = extract_features(params, images, batch_size)
    raw = compute_cam(feats, params.fc_weight[labels])
    norm = normalize_cam(raw)
    spec, gen = decompose(norm, tau_s, tau_g)
    return FeatureCache(
        feats, raw, norm, spec, gen, softmax(logits), labels, tau_s, tau_g,
        params_fingerprint(params),
    )


_ARRAYS = {
    "features": "features.tnsr",
    "cams": "cams.tnsr",
    "probs": "probs.tnsr",
}


def save_cache(directory: str | os.PathLike, cache: FeatureCache) -> None:
    """Stacked tensor files plus ``index.json``.

    Each index entry names the files holding the sample and its row in them.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensor_io.save_tensor(directory / _ARRAYS["features"], cache.features)
    tensor_io.save_tensor(directory / _ARRAYS["cams"], cache.raw_cams)
    tensor_io.save_tensor(directory / _ARRAYS["probs"], cache.probs)
    samples = {
        str(i): {
            "feature_file": _ARRAYS["features"],
            "cam_file": _ARRAYS["cams"],
            "probs_file": _ARRAYS["probs"],
            "row": i,
            "class_id": int(c),
        }
        for i, c in enumerate(cache.labels)
    }
    index = {
        "fingerprint": cache.fingerprint,
        "tau_s": cache.tau_s,
        "tau_g": cache.tau_g,
        "samples": samples,
    }
    tensor_io.atomic_write_bytes(
        directory / "index.json", json.dumps(index, sort_keys=True).encode()
    )


def load_cache(directory: str | os.PathLike, expected_fingerprint: str | None = None) -> FeatureCache:
    directory = Path(directory)
    path = directory / "index.json"
    if not path.exists():
        raise DataError(f"no feature cache at {directory}; run `feataug cache-features` first")
    index = json.loads(path.read_text())
    if expected_fingerprint is not None and index["fingerprint"] != expected_fingerprint:
        raise DataError(f"feature cache at {directory} was built from a different checkpoint; "
                        "rerun `feataug cache-features`")
    feats = tensor_io.load_tensor(directory / _ARRAYS["features"])
    raw = tensor_io.load_tensor(directory / _ARRAYS["cams"])
    probs = tensor_io.load_tensor(directory / _ARRAYS["probs"])
    entries = index["samples"]
    labels = np.array([entries[str(i)]["class_id"] for i in range(len(entries))], dtype=np.int64)
    norm = normalize_cam(raw)
    spec, gen = decompose(norm, index["tau_s"], index["tau_g"])
    return FeatureCache(feats, raw, norm, spec, gen, probs, labels,
                        index["tau_s"], index["tau_g"], index["fingerprint"])
