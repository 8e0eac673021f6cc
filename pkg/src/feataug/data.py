"""Long-tailed datasets: class-size profiles, a synthetic image generator and
a CIFAR binary ingester with per-class truncation.

On disk a dataset is a directory holding ``manifest.json`` and one tensor
file per split for images and one for labels (labels stored as float32,
the only dtype of the tensor format).
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from feataug import tensor_io
from feataug.errors import DataError

logger = logging.getLogger(__name__)

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


def make_profile(n_classes: int, im: float, n_max: int) -> list[int]:
    """Exponentially decaying class sizes ``head * im ** (-i / (n - 1))``, rounded half-up.

    The smallest class gets ``m = floor(n_max / im)`` samples and the largest
    ``head = round(m * im)``, which never exceeds ``n_max``. When ``n_max / im``
    is an integer, ``head == n_max``; otherwise rounding the tail count alone
    could move the measured imbalance factor far from ``im`` (500 / 200 = 2.5),
    so the head count gives way instead.
    """
    if n_classes < 1:
        raise DataError("n_classes must be >= 1")
    if im < 1:
        raise DataError(f"imbalance factor must be >= 1, got {im}")
    m = math.floor(n_max / im + 1e-9)
    if m < 1:
        raise DataError(f"n_max={n_max} with imbalance factor {im} leaves a class with 0 samples")
    head = min(int(math.floor(m * im + 0.5)), int(n_max))
    if n_classes == 1:
        return [head]
    counts = [int(math.floor(head * im ** (-i / (n_classes - 1)) + 0.5)) for i in range(n_classes)]
    counts[-1] = m
    return counts


def imbalance_factor(counts: Sequence[int]) -> float:
    if len(counts) == 0:
        raise DataError("imbalance factor of an empty profile is undefined")
    if min(counts) < 1:
        raise DataError("every class count must be >= 1")
    return float(max(counts)) / float(min(counts))


@dataclass
class DatasetManifest:
    class_names: list[str]
    counts: list[int]
    test_counts: list[int]
    source: str
    seed: int
    files: dict[str, str] = field(default_factory=dict)
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.counts) != len(self.class_names):
            raise DataError("counts and class_names differ in length")
        if self.counts and min(self.counts) < 1:
            raise DataError("every class needs at least one training sample")
        if self.source not in ("synthetic", "cifar_binary"):
            raise DataError(f"unknown dataset source {self.source!r}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))


@dataclass
class Dataset:
    manifest: DatasetManifest
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray


def save_dataset(directory: str | os.PathLike, ds: Dataset) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        "train_images": "train_images.tnsr",
        "train_labels": "train_labels.tnsr",
        "test_images": "test_images.tnsr",
        "test_labels": "test_labels.tnsr",
    }
    for key, fname in files.items():
        tensor_io.save_tensor(directory / fname, getattr(ds, key).astype(np.float32))
    ds.manifest.files = files
    path = directory / "manifest.json"
    tensor_io.atomic_write_bytes(path, ds.manifest.to_json().encode())
    return path


def load_dataset(directory: str | os.PathLike) -> Dataset:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest at {path}; run `feataug gen-data` first")
    manifest = DatasetManifest.from_json(path.read_text())
    arrays = {}
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        arrays[key] = tensor_io.load_tensor(directory / manifest.files[key])
    ds = Dataset(
        manifest,
        arrays["train_images"],
        arrays["train_labels"].astype(np.int64),
        arrays["test_images"],
        arrays["test_labels"].astype(np.int64),
    )
    got = np.bincount(ds.train_labels, minlength=manifest.n_classes).tolist()
    if got != list(manifest.counts):
        raise DataError(f"train labels give class counts {got}, manifest says {manifest.counts}")
    return ds


# --- synthetic generator -----------------------------------------------------


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic long-tail benchmark.

    Each class owns a coloured Gaussian blob (position, scale, hue). Every
    image, whatever its class, is drawn on top of a random mixture of the
    same shared background gratings plus a few clutter blobs of random hue,
    so the background carries no class information.
    """

    n_classes: int = 10
    image_size: int = 32
    channels: int = 3
    noise: float = 0.2
    blob_gain: float = 0.6
    position_jitter: float = 3.0
    blob_scale: tuple[float, float] = (0.12, 0.2)
    n_textures: int = 6
    background_gain: float = 1.0
    random_phase: bool = True
    n_distractors: int = 2
    distractor_gain: float = 0.3
    test_per_class: int = 100
    seed: int = 0

    def class_params(self) -> dict[str, np.ndarray]:
        rng = np.random.default_rng([self.seed, 1])
        lo, hi = 0.3 * self.image_size, 0.7 * self.image_size
        # hues evenly spaced, positions/scales random but fixed per class
        hues = (np.arange(self.n_classes) + rng.uniform(0, 0.5)) / self.n_classes
        return {
            "center": rng.uniform(lo, hi, size=(self.n_classes, 2)),
            "scale": rng.uniform(*self.blob_scale, size=self.n_classes) * self.image_size,
            "hue": hues % 1.0,
        }

    def texture_params(self) -> dict[str, np.ndarray]:
        """Shared grating frequencies, phases and colours (one row per texture)."""
        rng = np.random.default_rng([self.seed, 2])
        t = self.n_textures
        return {
            "freq": rng.uniform(0.15, 0.6, size=(t, 2)) * rng.choice([-1, 1], size=(t, 2)),
            "phase": rng.uniform(0, 2 * np.pi, size=t),
            "colour": rng.uniform(0.2, 0.6, size=(t, self.channels)),
        }

    def textures(self, phase_shift: np.ndarray | None = None) -> np.ndarray:
        """Background gratings, [n_textures, channels, H, W]."""
        tp = self.texture_params()
        s = self.image_size
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        phase = tp["phase"] if phase_shift is None else tp["phase"] + phase_shift
        arg = (tp["freq"][:, 0, None, None] * xx + tp["freq"][:, 1, None, None] * yy
               + phase[:, None, None])
        return tp["colour"][:, :, None, None] * np.sin(arg)[:, None, :, :]


def _hue_to_rgb(hue: float) -> np.ndarray:
    k = (np.array([5.0, 3.0, 1.0]) + hue * 6.0) % 6.0
    return 1.0 - np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)


def _render(spec: SyntheticSpec, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cp = spec.class_params()
    tex = spec.textures()
    s = spec.image_size
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    images = np.empty((len(labels), spec.channels, s, s), dtype=np.float32)
    for n, c in enumerate(labels):
        mix = rng.dirichlet(np.ones(spec.n_textures))
        if spec.random_phase:
            tex = spec.textures(rng.uniform(0, 2 * np.pi, size=spec.n_textures))
        img = np.tensordot(mix * spec.background_gain, tex, axes=1)
        cy, cx = cp["center"][c] + rng.normal(0, spec.position_jitter, size=2)
        scale = cp["scale"][c] * rng.uniform(0.85, 1.15)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * scale**2))
        rgb = _hue_to_rgb(cp["hue"][c])[: spec.channels] - 0.5
        img += spec.blob_gain * 2 * rgb[:, None, None] * blob
        # clutter: blobs of random hue, position and size, same for every class
        for _ in range(spec.n_distractors):
            dy, dx = rng.uniform(0, s, size=2)
            ds = rng.uniform(*spec.blob_scale) * s
            d = np.exp(-((yy - dy) ** 2 + (xx - dx) ** 2) / (2 * ds**2))
            drgb = _hue_to_rgb(rng.uniform()) - 0.5
            img += spec.distractor_gain * 2 * drgb[: spec.channels, None, None] * d
        img += rng.normal(0, spec.noise, size=img.shape)
        images[n] = img
    return images


def generate_synthetic(spec: SyntheticSpec, counts: Sequence[int]) -> Dataset:
    """Render a long-tailed training split and a balanced test split."""
    counts = [int(c) for c in counts]
    if len(counts) != spec.n_classes:
        raise DataError(f"{len(counts)} counts given for {spec.n_classes} classes")
    if min(counts) < 1:
        raise DataError("every class needs at least one training sample")
    train_labels = np.repeat(np.arange(spec.n_classes), counts)
    test_labels = np.repeat(np.arange(spec.n_classes), spec.test_per_class)
    rng = np.random.default_rng([spec.seed, 3])
    train = _render(spec, train_labels, rng)
    test = _render(spec, test_labels, rng)
    manifest = DatasetManifest(
        class_names=[f"class_{i}" for i in range(spec.n_classes)],
        counts=counts,
        test_counts=[spec.test_per_class] * spec.n_classes,
        source="synthetic",
        seed=spec.seed,
        notes={"synthetic_spec": asdict(spec)},
    )
    return Dataset(manifest, train, train_labels, test, test_labels)


def background_patch_means(images: np.ndarray, patch: int = 4) -> np.ndarray:
    """Mean intensity of the four corner patches of each image."""
    corners = [
        images[:, :, :patch, :patch],
        images[:, :, :patch, -patch:],
        images[:, :, -patch:, :patch],
        images[:, :, -patch:, -patch:],
    ]
    return np.mean([c.mean(axis=(1, 2, 3)) for c in corners], axis=0)


# --- CIFAR binary -------------------------------------------------------------


def read_cifar_records(buf: bytes, n_classes: int = 10, offset_base: int = 0):
    """Parse 3073-byte records (label byte + planar RGB 32x32).

    Returns ``(labels [N] int64, pixels [N, 3, 32, 32] uint8)``.
    """
    if len(buf) % CIFAR_RECORD:
        whole = len(buf) // CIFAR_RECORD
        raise DataError(
            f"truncated record at byte offset {offset_base + whole * CIFAR_RECORD}: "
            f"{len(buf) % CIFAR_RECORD} trailing bytes, records are {CIFAR_RECORD} bytes"
        )
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        i = int(bad[0])
        raise DataError(
            f"label {labels[i]} >= n_classes={n_classes} at byte offset "
            f"{offset_base + i * CIFAR_RECORD}"
        )
    pixels = raw[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    return labels, pixels


def encode_cifar_record(label: int, pixels: np.ndarray) -> bytes:
    return bytes([int(label)]) + np.asarray(pixels, dtype=np.uint8).tobytes()


def _read_files(paths: Sequence[str | os.PathLike], n_classes: int):
    labels, pixels = [], []
    for path in paths:
        buf = Path(path).read_bytes()
        try:
            lab, pix = read_cifar_records(buf, n_classes)
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from None
        labels.append(lab)
        pixels.append(pix)
    if not labels:
        raise DataError("no CIFAR files given")
    return np.concatenate(labels), np.concatenate(pixels)


def subsample_indices(labels: np.ndarray, counts: Sequence[int], shuffle: bool, seed: int):
    """Indices keeping the first ``counts[c]`` records of each class.

    With ``shuffle`` the per-class order is a seeded permutation of file
    order. The result is sorted by class, then by position in that order.
    """
    keep = []
    rng = np.random.default_rng(seed)
    for c, need in enumerate(counts):
        idx = np.flatnonzero(labels == c)
        if shuffle:
            idx = idx[rng.permutation(len(idx))]
        if len(idx) < need:
            raise DataError(f"class {c} has {len(idx)} records, profile asks for {need}")
        keep.append(idx[:need])
    return np.concatenate(keep)


def ingest_cifar(
    train_files: Sequence[str | os.PathLike],
    test_files: Sequence[str | os.PathLike],
    counts: Sequence[int],
    *,
    shuffle: bool = True,
    seed: int = 0,
    class_names: Sequence[str] | None = None,
) -> Dataset:
    """Build a long-tailed split of CIFAR binary batches.

    The test files are passed through untouched.
    """
    counts = [int(c) for c in counts]
    if not counts or min(counts) < 1:
        raise DataError(f"invalid profile {counts}: every class needs at least one sample")
    n_classes = len(counts)
    labels, pixels = _read_files(train_files, n_classes)
    test_labels, test_pixels = _read_files(test_files, n_classes)
    keep = subsample_indices(labels, counts, shuffle, seed)
    manifest = DatasetManifest(
        class_names=list(class_names) if class_names else [f"class_{i}" for i in range(n_classes)],
        counts=counts,
        test_counts=np.bincount(test_labels, minlength=n_classes).tolist(),
        source="cifar_binary",
        seed=seed,
        notes={
            "subsample": "seeded_shuffle" if shuffle else "file_order",
            "train_sources": [str(p) for p in train_files],
            "test_sources": [str(p) for p in test_files],
            "kept_record_indices": keep.tolist(),
        },
    )
    return Dataset(
        manifest,
        pixels[keep].astype(np.float32) / 255.0,
        labels[keep],
        test_pixels.astype(np.float32) / 255.0,
        test_labels,
    )


def random_flip_crop(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip plus zero-pad-and-crop, per image."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out
