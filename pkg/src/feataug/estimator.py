"""scikit-learn style wrapper around the two-phase training pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from feataug.cam import cache_all, softmax
from feataug.config import ExperimentConfig
from feataug.errors import DataError
from feataug.nn import extract_features, fc_logits
from feataug.pipeline import RunRecord, Standardizer, finetune_phase2, plan_phase2, train_phase1


def check_images(X, *, n_channels: int | None = None) -> np.ndarray:
    """Validate an image batch ``[N, C, H, W]`` and return it as float32."""
    X = np.asarray(X)
    if X.ndim != 4:
        raise DataError(f"expected images of shape [N, C, H, W], got ndim={X.ndim}")
    if X.shape[0] == 0:
        raise DataError("need at least one image")
    if not np.issubdtype(X.dtype, np.number):
        raise DataError(f"images must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise DataError("images contain NaN or inf")
    if n_channels is not None and X.shape[1] != n_channels:
        raise DataError(f"images have {X.shape[1]} channels, model expects {n_channels}")
    if min(X.shape[2:]) < 8:
        raise DataError(f"images are too small for three 2x2 poolings: {X.shape[2:]}")
    return X


def check_images_labels(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = check_images(X)
    y = np.asarray(y)
    if y.ndim != 1:
        raise DataError(f"labels must be 1-D, got shape {y.shape}")
    if len(y) != len(X):
        raise DataError(f"{len(X)} images but {len(y)} labels")
    check_classification_targets(y)
    return X, y


class FeatureAugmentedClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Small CNN trained in two phases for long-tailed data.

    ``fit`` trains the whole network on the imbalanced data, then fine-tunes
    only the linear classifier on class-balanced batches in which each tail
    sample is joined by synthetic samples that mix its class-specific
    features with class-generic features of its most confusing head classes.
    ``transform`` returns the pooled features of the frozen extractor.

    Parameters
    ----------
    epochs, batch_size, base_lr, decay_every, clip_norm : Phase-I schedule.
    phase2_lr, iterations : Phase-II schedule.
    n_t, n_a, n_f : tail samples per batch, augmented samples per tail
        sample, confusing classes per tail class. ``n_a=0`` gives plain
        balanced re-sampling.
    h_r_target : fraction of training samples covered by head classes.
    tau_s, tau_g : CAM thresholds for class-specific / class-generic parts.
    gamma_range : range of the specific-feature share of an augmented sample.
    loss, focal_exponent, cb_beta : Phase-I loss.
    channels : conv widths.
    random_state : int seed; all randomness derives from it.
    """

    def __init__(self, epochs=30, batch_size=32, base_lr=0.1, decay_every=15, clip_norm=1.0,
                 phase2_lr=0.01, iterations=800, n_t=8, n_a=3, n_f=3, h_r_target=0.9,
                 tau_s=0.3, tau_g=0.3, gamma_range=(0.1, 0.7), loss="cross_entropy",
                 focal_exponent=0.0, cb_beta=0.999, channels=(16, 32, 64), random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.decay_every = decay_every
        self.clip_norm = clip_norm
        self.phase2_lr = phase2_lr
        self.iterations = iterations
        self.n_t = n_t
        self.n_a = n_a
        self.n_f = n_f
        self.h_r_target = h_r_target
        self.tau_s = tau_s
        self.tau_g = tau_g
        self.gamma_range = gamma_range
        self.loss = loss
        self.focal_exponent = focal_exponent
        self.cb_beta = cb_beta
        self.channels = channels
        self.random_state = random_state

    def _config(self, n_classes: int) -> ExperimentConfig:
        cfg = ExperimentConfig()
        cfg.seed = int(self.random_state)
        cfg.data.n_classes = n_classes
        cfg.model.channels = ",".join(str(int(c)) for c in self.channels)
        cfg.loss.kind = self.loss
        cfg.loss.focal_exponent = float(self.focal_exponent)
        cfg.loss.cb_beta = float(self.cb_beta)
        p1 = cfg.phase1
        p1.epochs, p1.batch_size, p1.base_lr = int(self.epochs), int(self.batch_size), float(self.base_lr)
        p1.decay_every, p1.clip_norm = int(self.decay_every), float(self.clip_norm)
        p2 = cfg.phase2
        p2.lr, p2.iterations = float(self.phase2_lr), int(self.iterations)
        p2.n_t, p2.n_a, p2.n_f = int(self.n_t), int(self.n_a), int(self.n_f)
        p2.h_r_target, p2.tau_s, p2.tau_g = float(self.h_r_target), float(self.tau_s), float(self.tau_g)
        p2.gamma_min, p2.gamma_max = (float(g) for g in self.gamma_range)
        return cfg.validate()

    def fit(self, X, y, eval_set=None):
        """Run Phase-I, build the feature cache and run Phase-II.

        ``eval_set=(X_val, y_val)`` is only used for the logged validation
        accuracies in ``history_``; the returned model is the last iterate.
        """
        X, y = check_images_labels(X, y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise DataError("need at least two classes")
        cfg = self._config(len(self.classes_))
        self.standardizer_ = Standardizer.fit(X)
        train_x = self.standardizer_(X)
        p1_eval = p2_eval = None
        if eval_set is not None:
            Xv, yv = check_images_labels(*eval_set)
            yv_enc = self._encode(yv)
            xv = self.standardizer_(Xv)
            p1_eval = (xv, yv_enc)
        record = RunRecord()
        params, _ = train_phase1(train_x, y_enc, cfg, eval_set=p1_eval, record=record)
        self.phase1_params_ = params
        cache = cache_all(params, train_x, y_enc, cfg.phase2.tau_s, cfg.phase2.tau_g)
        plan = plan_phase2(cache, cfg)
        self.split_ = plan.split
        self.ranking_ = plan.ranking
        if p1_eval is not None:
            _, pooled, _ = extract_features(params, p1_eval[0])
            p2_eval = (pooled, p1_eval[1])
        last, _, _ = finetune_phase2(params, cache, cfg, eval_set=p2_eval, record=record)
        self.params_ = last
        self.history_ = record
        self.n_features_out_ = params.n_channels
        return self

    def _encode(self, y) -> np.ndarray:
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        if not np.all(self.classes_[idx] == y):
            raise DataError("labels contain classes not seen during fit")
        return idx

    def _prepare(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return self.standardizer_(check_images(X, n_channels=self.params_.in_channels))

    def transform(self, X) -> np.ndarray:
        """Pooled features ``[N, K]`` of the (frozen) extractor."""
        x = self._prepare(X)
        _, pooled, _ = extract_features(self.params_, x)
        return pooled

    def decision_function(self, X) -> np.ndarray:
        pooled = self.transform(X)
        return fc_logits(self.params_, pooled)

    def predict_proba(self, X) -> np.ndarray:
        return softmax(self.decision_function(X))

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
