from __future__ import annotations

import numpy as np


def relative_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def gradient_check(stack, loss_fn, x, h=1e-3, max_params=200, seed=0, include_input=False):
    """Compare backprop gradients against central finite differences.

    ``loss_fn(output) -> (loss, grad_wrt_output)``. Every parameter is checked
    when the stack has at most ``max_params`` of them, otherwise a seeded
    sample of ``max_params``. Dropout must be disabled (rate 0) for the
    comparison to be meaningful. Returns the largest relative error.
    """
    x = np.asarray(x, dtype=stack.dtype)
    out = stack.forward(x, mode="train")
    _, g = loss_fn(out)
    gx = stack.backward(g, need_input_grad=include_input)

    entries = [(p, stack.layers[i].grads[name]) for i, name, p in stack.parameters()]
    flat = [(k, j) for k, (p, _) in enumerate(entries) for j in range(p.size)]
    if len(flat) > max_params:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(flat), size=max_params, replace=False)
        flat = [flat[i] for i in sorted(pick)]

    def loss_at():
        return loss_fn(stack.forward(x, mode="train"))[0]

    worst = 0.0
    for k, j in flat:
        p, grad = entries[k]
        pv, gv = p.reshape(-1), grad.reshape(-1)
        orig = pv[j]
        pv[j] = orig + h
        up = loss_at()
        pv[j] = orig - h
        down = loss_at()
        pv[j] = orig
        worst = max(worst, float(relative_error(gv[j], (up - down) / (2 * h))))

    if include_input:
        xv = x.reshape(-1)
        idx = np.random.default_rng(seed + 1).choice(xv.size, size=min(xv.size, max_params // 4 or 1), replace=False)
        for j in idx:
            orig = xv[j]
            xv[j] = orig + h
            up = loss_at()
            xv[j] = orig - h
            down = loss_at()
            xv[j] = orig
            worst = max(worst, float(relative_error(gx.reshape(-1)[j], (up - down) / (2 * h))))
    return worst


def _loss_only_error(fn, x, h=1e-6):
    """Finite-difference check of a loss ``fn(x) -> (loss, grad)`` w.r.t. ``x``."""
    x = np.array(x, dtype=np.float64)
    _, g = fn(x)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    xv = x.reshape(-1)
    worst = 0.0
    for j in range(xv.size):
        orig = xv[j]
        xv[j] = orig + h
        up = fn(x)[0]
        xv[j] = orig - h
        down = fn(x)[0]
        xv[j] = orig
        worst = max(worst, float(relative_error(g[j], (up - down) / (2 * h))))
    return worst


def gradcheck_suite(seed=0):
    """Run the standard set of gradient checks.

    Returns ``{name: (max_relative_error, tolerance)}``. Stacks cover conv,
    max-pool, dense, relu, sigmoid, softmax and unit-length layers; the
    ``loss/*`` entries check each loss against its own input alone.
    """
    from .layers import Conv3D, Dense, Flatten, L2Normalize, MaxPool3D, ReLU, Sigmoid, Softmax
    from .losses import loss_binary_ce, loss_categorical_ce, loss_contrastive
    from .stack import LayerStack

    rng = np.random.default_rng(seed)
    out = {}

    labels = rng.integers(0, 3, size=3)
    x = rng.normal(size=(3, 6, 6, 5, 1))
    stack = LayerStack([Conv3D(2, 3), ReLU(), MaxPool3D(2), Flatten(), Dense(3), Softmax()], (6, 6, 5, 1), seed=seed)
    out["stack/conv-relu-pool-dense-softmax+ce"] = (
        gradient_check(stack, lambda p: loss_categorical_ce(p, labels, fused=False), x, h=1e-5, seed=seed,
                       include_input=True), 1e-4)

    y = rng.integers(0, 2, size=4).astype(float)
    x = rng.normal(size=(4, 5, 5, 5, 2))
    stack = LayerStack([Conv3D(2, 2), Sigmoid(), Flatten(), Dense(4), ReLU(), Dense(1), Sigmoid()], (5, 5, 5, 2),
                       seed=seed)
    out["stack/conv-sigmoid-dense-relu-sigmoid+bce"] = (
        gradient_check(stack, lambda p: loss_binary_ce(p[:, 0], y)[:1] + (loss_binary_ce(p[:, 0], y)[1][:, None],),
                       x, h=1e-5, seed=seed, include_input=True), 1e-4)

    ya = np.array([1.0, 0.0, 0.0])
    x = rng.normal(size=(6, 4, 4, 4, 1))
    stack = LayerStack([Conv3D(2, 3), ReLU(), Flatten(), Dense(3), L2Normalize()], (4, 4, 4, 1), seed=seed)

    def pair_loss(f):
        loss, ga, gb = loss_contrastive(f[:3], f[3:], ya, m=4.0)  # unit vectors: every negative stays active
        return loss, np.concatenate([ga, gb])

    out["stack/conv-relu-dense-l2norm+contrastive"] = (
        gradient_check(stack, pair_loss, x, h=1e-5, seed=seed, include_input=True), 1e-4)

    logits = rng.normal(size=(4, 5))
    probs = np.exp(logits) / np.exp(logits).sum(1, keepdims=True)
    cls = rng.integers(0, 5, size=4)
    out["loss/categorical_ce"] = (_loss_only_error(lambda p: loss_categorical_ce(p, cls, fused=False), probs), 1e-6)

    def fused(z):
        p = np.exp(z - z.max(1, keepdims=True))
        return loss_categorical_ce(p / p.sum(1, keepdims=True), cls, fused=True)

    out["loss/categorical_ce_fused"] = (_loss_only_error(fused, logits), 1e-6)
    p = rng.uniform(0.05, 0.95, size=6)
    yb = rng.integers(0, 2, size=6).astype(float)
    out["loss/binary_ce"] = (_loss_only_error(lambda q: loss_binary_ce(q, yb), p), 1e-6)
    fa, fb = rng.normal(scale=0.4, size=(2, 5, 3))
    yc = np.array([1.0, 0.0, 0.0, 1.0, 0.0])
    out["loss/contrastive_a"] = (_loss_only_error(lambda a: loss_contrastive(a, fb, yc)[:2], fa), 1e-6)
    out["loss/contrastive_b"] = (_loss_only_error(lambda b: loss_contrastive(fa, b, yc)[::2], fb), 1e-6)
    return out
