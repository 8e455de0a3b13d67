"""Loss functions. Each returns the batch-mean loss and the gradient of that
mean with respect to the loss input."""

from __future__ import annotations

import numpy as np

CE_EPS = 1e-12
BCE_CLAMP = 1e-7


def loss_categorical_ce(probs, class_index, fused=True):
    """Categorical cross-entropy ``-log(p[class] + 1e-12)``.

    With ``fused=True`` the gradient is taken with respect to the logits that
    fed the softmax (``p - onehot``), which avoids dividing by tiny
    probabilities. With ``fused=False`` it is the gradient with respect to
    ``probs`` itself.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    idx = np.atleast_1d(np.asarray(class_index))
    n, k = probs.shape
    if idx.shape != (n,):
        raise ValueError("need one class index per row of probs")
    if (idx < 0).any() or (idx >= k).any():
        raise IndexError(f"class index out of range for {k} classes")
    rows = np.arange(n)
    picked = probs[rows, idx]
    loss = float(-np.log(picked + CE_EPS).mean())
    if fused:
        grad = probs.copy()
        grad[rows, idx] -= 1.0
    else:
        grad = np.zeros_like(probs)
        grad[rows, idx] = -1.0 / (picked + CE_EPS)
    return loss, grad / n


def loss_binary_ce(p, y):
    """Binary cross-entropy on probabilities clamped to ``[1e-7, 1 - 1e-7]``.

    Scalars in, scalars out; arrays are averaged.
    """
    scalar = np.ndim(p) == 0
    p = np.clip(np.asarray(p, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    losses = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    grad = -y / p + (1.0 - y) / (1.0 - p)
    if scalar:
        return float(losses), float(grad)
    return float(losses.mean()), grad / p.size


def loss_contrastive(f_a, f_b, y, m=1.0):
    """``y * d2 + (1 - y) * max(0, m - d2)`` with ``d2`` the squared Euclidean
    distance between descriptors. Returns ``(loss, grad_a, grad_b)``.

    The margin acts on the squared distance. Batched inputs (rows) are averaged.
    """
    f_a = np.asarray(f_a, dtype=np.float64)
    f_b = np.asarray(f_b, dtype=np.float64)
    if f_a.shape != f_b.shape:
        raise ValueError(f"descriptor shapes differ: {f_a.shape} vs {f_b.shape}")
    if not m > 0:
        raise ValueError("margin must be positive")
    single = f_a.ndim == 1
    a, b = np.atleast_2d(f_a), np.atleast_2d(f_b)
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    diff = a - b
    d2 = (diff**2).sum(axis=1)
    hinge = m - d2
    active = (y == 0) & (hinge > 0)
    losses = y * d2 + (1.0 - y) * np.maximum(0.0, hinge)
    coef = 2.0 * (y - active)  # +2 for positives, -2 for active negatives
    grad_a = coef[:, None] * diff / len(a)
    if single:
        return float(losses[0]), grad_a[0], -grad_a[0]
    return float(losses.mean()), grad_a, -grad_a
