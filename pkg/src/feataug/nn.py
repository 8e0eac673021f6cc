"""A small numpy CNN with hand-written backward passes.

The network is fixed: ``n`` blocks of (3x3 conv, pad 1) -> ReLU -> 2x2 max-pool,
then global average pooling (GAP) and a single fully connected classifier.
The activations right before GAP are the feature maps that class activation
maps are computed from.

Batches enter as NCHW arrays and feature maps leave as NKhw, but internally
everything runs channels-last so that the convolutions are plain matmuls over
im2col patches.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from feataug.errors import DataError, NumericalError

DEFAULT_CHANNELS = (16, 32, 64)


@dataclass
class ModelParams:
    """Parameters of the conv extractor and the linear classifier.

    ``conv_layers`` holds ``(kernel [out, in, 3, 3], bias [out])`` pairs;
    ``fc_weight`` is ``[n_classes, n_channels]`` with one row per class.
    """

    conv_layers: list[tuple[np.ndarray, np.ndarray]]
    fc_weight: np.ndarray
    fc_bias: np.ndarray

    def __post_init__(self):
        in_ch = None
        for i, (kernel, bias) in enumerate(self.conv_layers):
            if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
                raise DataError(f"conv{i}.weight must be [out, in, 3, 3], got {kernel.shape}")
            if bias.shape != (kernel.shape[0],):
                raise DataError(f"conv{i}.bias shape {bias.shape} != ({kernel.shape[0]},)")
            if in_ch is not None and kernel.shape[1] != in_ch:
                raise DataError(
                    f"conv{i}.weight in_channels={kernel.shape[1]} but previous layer "
                    f"emits {in_ch} channels"
                )
            in_ch = kernel.shape[0]
        if self.fc_weight.ndim != 2:
            raise DataError(f"fc.weight must be 2-D, got {self.fc_weight.shape}")
        if in_ch is not None and self.fc_weight.shape[1] != in_ch:
            raise DataError(
                f"fc.weight has {self.fc_weight.shape[1]} columns but the conv chain "
                f"emits {in_ch} channels"
            )
        if self.fc_bias.shape != (self.fc_weight.shape[0],):
            raise DataError(
                f"fc.bias shape {self.fc_bias.shape} != ({self.fc_weight.shape[0]},)"
            )

    @property
    def n_classes(self) -> int:
        return self.fc_weight.shape[0]

    @property
    def n_channels(self) -> int:
        return self.fc_weight.shape[1]

    @property
    def in_channels(self) -> int:
        return self.conv_layers[0][0].shape[1] if self.conv_layers else self.n_channels

    @property
    def dtype(self) -> np.dtype:
        return self.fc_weight.dtype

    def named(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, (kernel, bias) in enumerate(self.conv_layers):
            yield f"conv{i}.weight", kernel
            yield f"conv{i}.bias", bias
        yield "fc.weight", self.fc_weight
        yield "fc.bias", self.fc_bias

    def to_dict(self) -> dict[str, np.ndarray]:
        return dict(self.named())

    @classmethod
    def from_dict(cls, tensors: dict[str, np.ndarray]) -> "ModelParams":
        n_conv = sum(1 for k in tensors if k.startswith("conv") and k.endswith(".weight"))
        try:
            conv = [(tensors[f"conv{i}.weight"], tensors[f"conv{i}.bias"]) for i in range(n_conv)]
            return cls(conv, tensors["fc.weight"], tensors["fc.bias"])
        except KeyError as exc:
            raise DataError(f"checkpoint is missing tensor {exc.args[0]}") from None

    def copy(self) -> "ModelParams":
        return ModelParams(
            [(k.copy(), b.copy()) for k, b in self.conv_layers],
            self.fc_weight.copy(),
            self.fc_bias.copy(),
        )

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            [(k.astype(dtype), b.astype(dtype)) for k, b in self.conv_layers],
            self.fc_weight.astype(dtype),
            self.fc_bias.astype(dtype),
        )

    def replace_named(self, values: dict[str, np.ndarray]) -> "ModelParams":
        merged = {**self.to_dict(), **values}
        return ModelParams.from_dict(merged)


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def init_params(
    n_classes: int,
    in_channels: int = 3,
    channels: Sequence[int] = DEFAULT_CHANNELS,
    seed: int | np.random.Generator = 0,
) -> ModelParams:
    rng = np.random.default_rng(seed)
    conv = []
    prev = in_channels
    for out in channels:
        kernel = glorot_uniform(rng, (out, prev, 3, 3), prev * 9, out * 9)
        conv.append((kernel, np.zeros(out, dtype=np.float32)))
        prev = out
    fc_w = glorot_uniform(rng, (n_classes, prev), prev, n_classes)
    return ModelParams(conv, fc_w, np.zeros(n_classes, dtype=np.float32))


# --- layers (channels-last) -------------------------------------------------


def _conv_forward(x, kernel, bias):
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    # patch columns ordered (kh, kw, c) to keep the copies contiguous
    cols = np.concatenate(
        [xp[:, i : i + h, j : j + w, :] for i in range(3) for j in range(3)], axis=-1
    ).reshape(n * h * w, 9 * c)
    kmat = kernel.transpose(0, 2, 3, 1).reshape(kernel.shape[0], -1)
    out = cols @ kmat.T
    out += bias
    return out.reshape(n, h, w, -1), cols


def _conv_backward(dout, cols, kernel, in_shape):
    n, h, w, c = in_shape
    o = kernel.shape[0]
    dy = dout.reshape(-1, o)
    kmat = kernel.transpose(0, 2, 3, 1).reshape(o, -1)
    dkernel = (dy.T @ cols).reshape(o, 3, 3, c).transpose(0, 3, 1, 2)
    dbias = dy.sum(axis=0)
    dcols = (dy @ kmat).reshape(n, h, w, 9, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + h, j : j + w, :] += dcols[:, :, :, 3 * i + j, :]
    return dxp[:, 1:-1, 1:-1, :], np.ascontiguousarray(dkernel), dbias


_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _pool_forward(x, with_masks=True):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DataError(f"max-pool needs even spatial size, got {h}x{w}")
    parts = [x[:, i::2, j::2, :] for i, j in _POOL_OFFSETS]
    out = np.maximum(np.maximum(parts[0], parts[1]), np.maximum(parts[2], parts[3]))
    if not with_masks:
        return out, None
    # first maximal entry of each window wins ties
    masks = []
    taken = np.zeros(out.shape, dtype=bool)
    for part in parts:
        m = (part == out) & ~taken
        taken |= m
        masks.append(m)
    return out, masks


def _pool_backward(dout, masks, in_shape):
    d = np.zeros(in_shape, dtype=dout.dtype)
    for (i, j), m in zip(_POOL_OFFSETS, masks):
        d[:, i::2, j::2, :] = dout * m
    return d


# --- whole network -----------------------------------------------------------


@dataclass
class _Cache:
    shapes: list = field(default_factory=list)
    cols: list = field(default_factory=list)
    relu_masks: list = field(default_factory=list)
    pool_idx: list = field(default_factory=list)
    feat_nhwc: np.ndarray | None = None
    pooled: np.ndarray | None = None


def check_batch(params: ModelParams, batch: np.ndarray) -> None:
    if batch.ndim != 4:
        raise DataError(f"batch must be [N, C, H, W], got ndim={batch.ndim}")
    n, c, h, w = batch.shape
    if c != params.in_channels:
        raise DataError(f"batch dimension 1 (channels) is {c}, network expects {params.in_channels}")
    div = 2 ** len(params.conv_layers)
    if h % div or h == 0:
        raise DataError(f"batch dimension 2 (height) is {h}, must be a positive multiple of {div}")
    if w % div or w == 0:
        raise DataError(f"batch dimension 3 (width) is {w}, must be a positive multiple of {div}")


def _forward(params: ModelParams, batch: np.ndarray, keep: bool):
    check_batch(params, batch)
    dtype = params.dtype
    x = np.ascontiguousarray(batch.transpose(0, 2, 3, 1), dtype=dtype)
    cache = _Cache()
    for kernel, bias in params.conv_layers:
        in_shape = x.shape
        z, cols = _conv_forward(x, kernel, bias)
        mask = z > 0
        a = z * mask
        pooled, idx = _pool_forward(a, keep)
        if keep:
            cache.shapes.append(in_shape)
            cache.cols.append(cols)
            cache.relu_masks.append(mask)
            cache.pool_idx.append(idx)
        x = pooled
    cache.feat_nhwc = x
    cache.pooled = x.mean(axis=(1, 2))
    logits = cache.pooled @ params.fc_weight.T + params.fc_bias
    return logits, cache


def forward(params: ModelParams, batch: np.ndarray):
    """Run the network on an NCHW batch.

    Returns
    -------
    features : ndarray [N, K, h, w]
        Activations immediately before global average pooling.
    pooled : ndarray [N, K]
    logits : ndarray [N, n_classes]
    """
    logits, cache = _forward(params, batch, keep=False)
    return cache.feat_nhwc.transpose(0, 3, 1, 2), cache.pooled, logits


def extract_features(params: ModelParams, images: np.ndarray, batch_size: int = 256):
    """`forward` over a large array in chunks; returns (features, pooled, logits)."""
    feats, pooled, logits = [], [], []
    for start in range(0, len(images), batch_size):
        f, p, z = forward(params, images[start : start + batch_size])
        feats.append(f)
        pooled.append(p)
        logits.append(z)
    return np.concatenate(feats), np.concatenate(pooled), np.concatenate(logits)


def fc_logits(params: ModelParams, pooled: np.ndarray) -> np.ndarray:
    return pooled @ params.fc_weight.T + params.fc_bias


def backward(params: ModelParams, batch, labels, loss_cfg=None, weights=None):
    """Loss and gradients of every parameter.

    Returns ``(loss, grads)`` where ``grads`` is a `ModelParams` holding the
    gradient of each tensor at the same position.
    """
    from feataug.losses import LossConfig, compute_loss

    loss_cfg = loss_cfg if loss_cfg is not None else LossConfig()
    logits, cache = _forward(params, batch, keep=True)
    loss, dlogits = compute_loss(logits, labels, loss_cfg, weights)

    dfc_w = dlogits.T @ cache.pooled
    dfc_b = dlogits.sum(axis=0)
    dpooled = dlogits @ params.fc_weight
    n, h, w, k = cache.feat_nhwc.shape
    dx = np.broadcast_to(dpooled[:, None, None, :] / (h * w), (n, h, w, k))

    conv_grads = []
    for i in reversed(range(len(params.conv_layers))):
        kernel, _ = params.conv_layers[i]
        in_shape = cache.shapes[i]
        conv_out_shape = in_shape[:3] + (kernel.shape[0],)
        da = _pool_backward(np.ascontiguousarray(dx), cache.pool_idx[i], conv_out_shape)
        dz = da * cache.relu_masks[i]
        dx, dk, db = _conv_backward(dz, cache.cols[i], kernel, in_shape)
        conv_grads.append((dk, db))
    conv_grads.reverse()
    return loss, ModelParams(conv_grads, dfc_w, dfc_b)


def fc_backward(params: ModelParams, pooled, labels, loss_cfg=None, weights=None):
    """Loss and (fc_weight, fc_bias) gradients for the classifier alone."""
    from feataug.losses import LossConfig, compute_loss

    loss_cfg = loss_cfg if loss_cfg is not None else LossConfig()
    pooled = np.asarray(pooled, dtype=params.dtype)
    loss, dlogits = compute_loss(fc_logits(params, pooled), labels, loss_cfg, weights)
    return loss, dlogits.T @ pooled, dlogits.sum(axis=0)


# --- optimisation ------------------------------------------------------------


@dataclass
class OptimState:
    """SGD hyper-parameters plus one velocity buffer per parameter tensor."""

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(params: ModelParams, gradients: ModelParams, state: OptimState,
             only: Sequence[str] | None = None) -> ModelParams:
    """One SGD-with-momentum update: ``v <- m v + g + wd p``; ``p <- p - lr v``.

    ``only`` restricts the update to the named tensors; the rest are passed
    through as the very same array objects. Raises `NumericalError` before
    touching anything if a gradient is not finite.
    """
    grads = dict(gradients.named())
    current = params.to_dict()
    names = list(current) if only is None else list(only)
    for name in names:
        if name not in grads:
            raise DataError(f"no gradient for parameter {name}")
        if grads[name].shape != current[name].shape:
            raise DataError(
                f"gradient for {name} has shape {grads[name].shape}, "
                f"parameter has {current[name].shape}"
            )
        if not np.all(np.isfinite(grads[name])):
            raise NumericalError(f"non-finite gradient in layer {name}; step refused")
    updated = {}
    for name in names:
        p, g = current[name], grads[name]
        if state.weight_decay:
            g = g + state.weight_decay * p
        v = state.velocity.get(name)
        v = g.copy() if v is None else state.momentum * v + g
        if state.momentum:
            state.velocity[name] = v
        updated[name] = (p - state.learning_rate * v).astype(p.dtype)
    return params.replace_named(updated)


def lr_schedule(epoch: int, base_lr: float, decay_every: int, factor: float) -> float:
    """Step decay: ``base_lr * factor ** (epoch // decay_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if decay_every < 1:
        raise ValueError("decay_every must be >= 1")
    return base_lr * factor ** (epoch // decay_every)
