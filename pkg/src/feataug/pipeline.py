"""Two-phase training: full-network training on the long-tailed data, then
classifier-only fine-tuning on online class-balanced, augmented batches.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from feataug import augmentation as aug
from feataug import tensor_io
from feataug.cam import FeatureCache, cache_all, params_fingerprint
from feataug.config import ExperimentConfig
from feataug.data import (Dataset, SyntheticSpec, generate_synthetic, ingest_cifar, make_profile,
                          random_flip_crop)
from feataug.errors import DataError, NumericalError
from feataug.losses import LossConfig
from feataug.nn import (ModelParams, OptimState, backward, extract_features, fc_backward,
                        fc_logits, init_params, lr_schedule, sgd_step)
from feataug.report import Metrics, compute_metrics

logger = logging.getLogger(__name__)

FC_NAMES = ("fc.weight", "fc.bias")

# independent RNG streams derived from the run seed
STREAM_INIT, STREAM_PHASE1, STREAM_PHASE2 = 1, 2, 3


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


@dataclass
class Standardizer:
    """Per-channel input standardisation fitted on the training images."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, images: np.ndarray) -> "Standardizer":
        mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
        std = images.std(axis=(0, 2, 3), dtype=np.float64)
        return cls(mean.astype(np.float32), np.where(std > 0, std, 1).astype(np.float32))

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return ((images - self.mean[:, None, None]) / self.std[:, None, None]).astype(np.float32)


@dataclass
class RunRecord:
    """Event log of a run: losses, learning rates and validation accuracies."""

    events: list[dict] = field(default_factory=list)

    def log(self, phase: str, step: int, **values) -> None:
        # no wall-clock stamps, so identical runs give identical files
        self.events.append({"phase": phase, "step": int(step), **values})

    def series(self, phase: str, key: str) -> list[tuple[int, float]]:
        return [(e["step"], e[key]) for e in self.events if e["phase"] == phase and key in e]

    def extend(self, other: "RunRecord") -> None:
        self.events.extend(other.events)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)


# --- checkpoints ---------------------------------------------------------------


def save_model(directory: str | os.PathLike, params: ModelParams, std: Standardizer) -> None:
    """Write a checkpoint directory atomically (build aside, then rename)."""
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tensors = params.to_dict()
    tensors["input.mean"] = std.mean
    tensors["input.std"] = std.std
    tensor_io.save_checkpoint(tmp, tensors)
    if directory.exists():
        shutil.rmtree(directory)
    os.replace(tmp, directory)


def load_model(directory: str | os.PathLike) -> tuple[ModelParams, Standardizer]:
    tensors = tensor_io.load_checkpoint(directory)
    std = Standardizer(tensors.pop("input.mean"), tensors.pop("input.std"))
    return ModelParams.from_dict(tensors), std


# --- evaluation ----------------------------------------------------------------


def predict(params: ModelParams, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    _, _, logits = extract_features(params, images, batch_size)
    return logits.argmax(axis=1)


def evaluate(params: ModelParams, images: np.ndarray, labels, train_counts=None,
             phase: str = "") -> Metrics:
    """Overall, per-class and group accuracies plus the confusion matrix."""
    return compute_metrics(labels, predict(params, images), params.n_classes, train_counts, phase)


def evaluate_pooled(params: ModelParams, pooled: np.ndarray, labels, train_counts=None,
                    phase: str = "") -> Metrics:
    pred = fc_logits(params, pooled).argmax(axis=1)
    return compute_metrics(labels, pred, params.n_classes, train_counts, phase)


# --- Phase-I -------------------------------------------------------------------


def loss_config(cfg: ExperimentConfig, counts) -> LossConfig:
    return LossConfig(
        kind=cfg.loss.kind,
        focal_exponent=cfg.loss.focal_exponent,
        cb_beta=cfg.loss.cb_beta,
        per_class_counts=list(counts) if cfg.loss.kind == "class_balanced" else None,
    )


def clip_gradients(grads: ModelParams, max_norm: float) -> ModelParams:
    """Rescale all gradients together so their global L2 norm is <= max_norm."""
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for _, g in grads.named())))
    if not np.isfinite(norm) or norm <= max_norm:
        return grads
    scale = np.float32(max_norm / norm)
    return grads.replace_named({n: g * scale for n, g in grads.named()})


def train_phase1(train_x: np.ndarray, train_y: np.ndarray, cfg: ExperimentConfig, *,
                 eval_set: tuple[np.ndarray, np.ndarray] | None = None,
                 checkpoint_dir: str | os.PathLike | None = None,
                 standardizer: Standardizer | None = None,
                 record: RunRecord | None = None):
    """Train every parameter on the (standardised) long-tailed data.

    ``train_x`` and the eval images must already be standardised. With a
    ``checkpoint_dir`` the parameters (and ``standardizer``) are written there
    after each epoch, so a divergence leaves the last good epoch on disk.
    """
    p1 = cfg.phase1
    n_classes = cfg.data.n_classes
    train_y = np.asarray(train_y, dtype=np.int64)
    if train_y.max() >= n_classes:
        raise DataError(f"label {train_y.max()} >= data.n_classes={n_classes}")
    counts = np.bincount(train_y, minlength=n_classes)
    loss_cfg = loss_config(cfg, counts)
    params = init_params(n_classes, train_x.shape[1], cfg.model.channel_list(),
                         rng_for(cfg.seed, STREAM_INIT))
    state = OptimState(p1.base_lr, p1.momentum, p1.weight_decay)
    rng = rng_for(cfg.seed, STREAM_PHASE1)
    record = record if record is not None else RunRecord()
    last_good = params
    for epoch in range(p1.epochs):
        state.learning_rate = lr_schedule(epoch, p1.base_lr, p1.decay_every, p1.factor)
        order = rng.permutation(len(train_y))
        total, seen = 0.0, 0
        for start in range(0, len(order), p1.batch_size):
            idx = order[start : start + p1.batch_size]
            xb = train_x[idx]
            if p1.augment:
                xb = random_flip_crop(xb, rng)
            try:
                loss, grads = backward(params, xb, train_y[idx], loss_cfg)
            except DataError as exc:
                raise NumericalError(f"phase1 diverged at epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss):
                raise NumericalError(f"phase1 diverged at epoch {epoch}: loss={loss}")
            if p1.clip_norm > 0:
                grads = clip_gradients(grads, p1.clip_norm)
            params = sgd_step(params, grads, state)
            total += loss * len(idx)
            seen += len(idx)
        event = {"loss": total / seen, "lr": state.learning_rate}
        if eval_set is not None and ((epoch + 1) % p1.eval_every == 0 or epoch + 1 == p1.epochs):
            event["val_acc"] = evaluate(params, *eval_set).overall
        record.log("phase1", epoch, **event)
        logger.info("phase1 epoch %d %s", epoch, event)
        last_good = params
        if checkpoint_dir is not None:
            if standardizer is None:
                raise DataError("checkpointing needs the input standardizer")
            save_model(checkpoint_dir, params, standardizer)
    return last_good, record


# --- Phase-II ------------------------------------------------------------------


@dataclass
class Phase2Plan:
    split: aug.HeadTailSplit
    ranking: dict[int, list[int]]
    sampler: aug.AugmentationSampler


def plan_phase2(cache: FeatureCache, cfg: ExperimentConfig) -> Phase2Plan:
    p2 = cfg.phase2
    counts = np.bincount(cache.labels, minlength=cache.probs.shape[1])
    split = aug.split_head_tail(counts.tolist(), p2.h_r_target)
    ranking = aug.rank_all(cache, split, p2.n_f)
    sampler = aug.AugmentationSampler(cache, split, ranking, (p2.gamma_min, p2.gamma_max))
    return Phase2Plan(split, ranking, sampler)


def finetune_phase2(params: ModelParams, cache: FeatureCache, cfg: ExperimentConfig, *,
                    eval_set: tuple[np.ndarray, np.ndarray] | None = None,
                    train_counts=None, record: RunRecord | None = None,
                    tag: str = "phase2", batch_dump: str | os.PathLike | None = None):
    """Fine-tune only the classifier on online augmented batches.

    ``eval_set`` holds pooled test features and labels (the extractor is
    frozen, so they are computed once). Returns ``(last, best, record)``
    where ``best`` is the parameters at the best validation accuracy.
    """
    if cache.fingerprint != params_fingerprint(params):
        raise DataError("feature cache was not built from this checkpoint")
    p2 = cfg.phase2
    plan = plan_phase2(cache, cfg)
    rng = rng_for(cfg.seed, STREAM_PHASE2)
    state = OptimState(p2.lr, p2.momentum)
    record = record if record is not None else RunRecord()
    dump = open(batch_dump, "w") if batch_dump else None
    best, best_acc = params, -1.0
    try:
        if eval_set is not None:
            best_acc = evaluate_pooled(params, *eval_set).overall
            record.log(tag, 0, val_acc=best_acc)
        for it in range(1, p2.iterations + 1):
            batch = plan.sampler.build_batch(p2.n_t, p2.n_a, rng)
            if dump is not None:
                dump.write(batch.to_jsonl())
            try:
                loss, dw, db = fc_backward(params, batch.features, batch.labels)
            except DataError as exc:
                raise NumericalError(f"{tag} diverged at iteration {it}: {exc}") from exc
            if not np.isfinite(loss):
                raise NumericalError(f"{tag} diverged at iteration {it}: loss={loss}")
            grads = params.replace_named({"fc.weight": dw, "fc.bias": db})
            params = sgd_step(params, grads, state, only=FC_NAMES)
            event = {"loss": loss}
            if eval_set is not None and (it % p2.eval_every == 0 or it == p2.iterations):
                acc = evaluate_pooled(params, *eval_set).overall
                event["val_acc"] = acc
                if acc > best_acc:
                    best, best_acc = params, acc
            if "val_acc" in event or it % p2.eval_every == 0:
                record.log(tag, it, **event)
    finally:
        if dump is not None:
            dump.close()
    if plan.sampler.skipped:
        logger.warning("%s: %d augmentation draws skipped", tag, plan.sampler.skipped)
    return params, best, record


# --- whole experiment ------------------------------------------------------------


@dataclass
class ExperimentResult:
    metrics: dict[str, Metrics]
    record: RunRecord
    phase1_params: ModelParams
    params: dict[str, ModelParams]
    standardizer: Standardizer
    split: aug.HeadTailSplit
    ranking: dict[int, list[int]]
    cache: FeatureCache


def run_experiment(ds: Dataset, cfg: ExperimentConfig, *, arms=("augmented", "no_aug"),
                   checkpoint_dir: str | os.PathLike | None = None) -> ExperimentResult:
    """Phase-I, feature cache, then one Phase-II run per arm from the same checkpoint.

    ``augmented`` uses the configured ``n_a``; ``no_aug`` uses ``n_a = 0`` with
    ``n_t`` scaled so that the batch size matches.
    """
    std = Standardizer.fit(ds.train_images)
    train_x = std(ds.train_images)
    test_x = std(ds.test_images)
    counts = list(ds.manifest.counts)
    record = RunRecord()
    params, _ = train_phase1(train_x, ds.train_labels, cfg, eval_set=(test_x, ds.test_labels),
                             checkpoint_dir=checkpoint_dir, standardizer=std, record=record)
    metrics = {"phase1": evaluate(params, test_x, ds.test_labels, counts, "phase1")}
    cache = cache_all(params, train_x, ds.train_labels, cfg.phase2.tau_s, cfg.phase2.tau_g)
    _, test_pooled, _ = extract_features(params, test_x)
    eval_set = (test_pooled, ds.test_labels)
    out_params = {}
    plan = plan_phase2(cache, cfg)
    for arm in arms:
        arm_cfg = arm_config(cfg, arm)
        last, _, _ = finetune_phase2(params, cache, arm_cfg, eval_set=eval_set,
                                     record=record, tag=f"phase2_{arm}")
        out_params[arm] = last
        metrics[f"phase2_{arm}"] = evaluate_pooled(last, test_pooled, ds.test_labels, counts,
                                                   f"phase2_{arm}")
    return ExperimentResult(metrics, record, params, out_params, std, plan.split, plan.ranking, cache)


def arm_config(cfg: ExperimentConfig, arm: str) -> ExperimentConfig:
    out = copy.deepcopy(cfg)
    if arm == "no_aug":
        batch = 2 * cfg.phase2.n_t * (1 + cfg.phase2.n_a)
        out.phase2.n_t = max(1, batch // 2)
        out.phase2.n_a = 0
    elif arm != "augmented":
        raise DataError(f"unknown phase2 arm {arm!r}")
    return out


def dataset_from_config(cfg: ExperimentConfig) -> Dataset:
    """Build the long-tailed dataset described by ``cfg.data``."""
    d = cfg.data
    counts = make_profile(d.n_classes, d.im, d.n_max)
    if d.source == "synthetic":
        spec = SyntheticSpec(n_classes=d.n_classes, image_size=d.image_size, noise=d.noise,
                             n_distractors=d.n_distractors, test_per_class=d.test_per_class,
                             seed=cfg.seed)
        return generate_synthetic(spec, counts)
    if not d.cifar_train or not d.cifar_test:
        raise DataError("data.source=cifar_binary needs data.cifar_train and data.cifar_test")
    return ingest_cifar([f for f in d.cifar_train.split(",") if f],
                        [f for f in d.cifar_test.split(",") if f],
                        counts, shuffle=d.shuffle, seed=cfg.seed)
