"""Central finite-difference checks of the analytic gradients.

ReLU and max-pool are piecewise linear, so a perturbation of size ``eps``
can cross a kink and make the finite difference meaningless. The network
check therefore compares the activation pattern (ReLU signs and pool
winners) at ``x - eps`` and ``x + eps`` and leaves out coordinates where it
changes; the number left out is reported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from feataug import nn
from feataug.losses import LossConfig, compute_loss


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    skipped: int = 0

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < 1e-3


def rel_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f, x: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def check_loss(cfg: LossConfig, logits: np.ndarray, labels, weights=None, eps=1e-3) -> GradCheckResult:
    logits = np.array(logits, dtype=np.float64)
    _, analytic = compute_loss(logits, labels, cfg, weights)
    numeric = numeric_grad(lambda: compute_loss(logits, labels, cfg, weights)[0], logits, eps)
    err = rel_error(analytic, numeric)
    return GradCheckResult(f"loss:{cfg.kind}", float(err.max()), err.size)


def _linear_check(name, fwd, bwd, x, eps, rng, params=()):
    """Check ``bwd(upstream) -> grads`` against ``sum(fwd() * upstream)``.

    ``params`` are the arrays (``x`` first) whose gradients ``bwd`` returns,
    in the same order.
    """
    targets = (x,) + tuple(params)
    out = fwd()
    up = rng.normal(size=out.shape)
    analytic = bwd(up)
    worst, n = 0.0, 0
    for arr, ga in zip(targets, analytic):
        num = numeric_grad(lambda: float(np.sum(fwd() * up)), arr, eps)
        err = rel_error(ga, num)
        worst = max(worst, float(err.max()))
        n += err.size
    return GradCheckResult(name, worst, n)


def check_conv(rng, eps=1e-3) -> GradCheckResult:
    x = rng.normal(size=(2, 4, 4, 3))
    k = rng.normal(size=(5, 3, 3, 3))
    b = rng.normal(size=5)
    cache = {}

    def fwd():
        out, cols = nn._conv_forward(x, k, b)
        cache["cols"] = cols
        return out

    def bwd(up):
        fwd()
        return nn._conv_backward(up, cache["cols"], k, x.shape)

    return _linear_check("layer:conv3x3", fwd, bwd, x, eps, rng, (k, b))


def check_relu(rng, eps=1e-3) -> GradCheckResult:
    # keep inputs at least 10 eps away from the kink
    x = rng.normal(size=(2, 4, 4, 3))
    x = np.where(np.abs(x) < 10 * eps, np.sign(x + 1e-12) * 10 * eps, x)
    return _linear_check("layer:relu", lambda: np.maximum(x, 0),
                         lambda up: (up * (x > 0),), x, eps, rng)


def check_pool(rng, eps=1e-3) -> GradCheckResult:
    # distinct values spaced 10 eps apart so no window winner can flip
    x = (rng.permutation(2 * 4 * 4 * 3) * 10 * eps).reshape(2, 4, 4, 3).astype(np.float64)

    def bwd(up):
        _, masks = nn._pool_forward(x)
        return (nn._pool_backward(up, masks, x.shape),)

    return _linear_check("layer:maxpool2x2", lambda: nn._pool_forward(x, False)[0], bwd, x, eps, rng)


def check_gap(rng, eps=1e-3) -> GradCheckResult:
    x = rng.normal(size=(2, 4, 4, 3))

    def bwd(up):
        return (np.broadcast_to(up[:, None, None, :] / 16, x.shape),)

    return _linear_check("layer:gap", lambda: x.mean(axis=(1, 2)), bwd, x, eps, rng)


def check_fc(rng, eps=1e-3) -> GradCheckResult:
    x = rng.normal(size=(3, 6))
    w = rng.normal(size=(4, 6))
    b = rng.normal(size=4)

    def bwd(up):
        return up @ w, up.T @ x, up.sum(axis=0)

    return _linear_check("layer:fc", lambda: x @ w.T + b, bwd, x, eps, rng, (w, b))


def _pattern(params: nn.ModelParams, batch: np.ndarray):
    _, cache = nn._forward(params, batch, keep=True)
    return [m.tobytes() for m in cache.relu_masks] + [
        m.tobytes() for masks in cache.pool_idx for m in masks
    ]


def check_network(params: nn.ModelParams, batch, labels, cfg: LossConfig | None = None,
                  eps: float = 1e-3, max_coords: int | None = None,
                  rng: np.random.Generator | None = None) -> dict[str, GradCheckResult]:
    """Per-parameter-tensor check of `nn.backward` in float64.

    ``max_coords`` caps the number of coordinates checked per tensor (chosen
    at random with ``rng``) to bound the runtime.
    """
    cfg = cfg if cfg is not None else LossConfig()
    params = params.astype(np.float64)
    batch = np.asarray(batch, dtype=np.float64)
    _, grads = nn.backward(params, batch, labels, cfg)
    analytic = dict(grads.named())
    rng = rng if rng is not None else np.random.default_rng(0)
    results = {}
    for name, arr in params.named():
        coords = list(np.ndindex(arr.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        worst, checked, skipped = 0.0, 0, 0
        for idx in coords:
            old = arr[idx]
            arr[idx] = old + eps
            lp, _ = nn.backward(params, batch, labels, cfg)
            pat_p = _pattern(params, batch)
            arr[idx] = old - eps
            lm, _ = nn.backward(params, batch, labels, cfg)
            pat_m = _pattern(params, batch)
            arr[idx] = old
            if pat_p != pat_m:
                skipped += 1
                continue
            num = (lp - lm) / (2 * eps)
            worst = max(worst, float(rel_error(analytic[name][idx], num)))
            checked += 1
        results[name] = GradCheckResult(name, worst, checked, skipped)
    return results
