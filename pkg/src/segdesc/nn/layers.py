"""Layers with explicit forward/backward passes.

Activations are channels-last: a batch of volumes has shape
``(batch, d1, d2, d3, channels)``. Every layer caches what its backward pass
needs during a training-mode forward.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ShapeError


def _triple(v):
    if np.isscalar(v):
        return (int(v),) * 3
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ValueError(f"expected 3 values, got {v}")
    return v


class AffineOccupancy:
    """Batch of volumes of the form ``offset + occ * scale`` with binary
    ``occ`` and per-cell ``offset``/``scale`` shared across the batch.

    Normalized occupancy grids have exactly this form. A :class:`Conv3D` that
    receives one splits the convolution into a single dense pass over
    ``offset`` and a sparse pass over the occupied cells, which is much cheaper
    than the dense equivalent. Shape is reported channels-last with one
    channel so it passes the stack's input check.
    """

    def __init__(self, occ, offset, scale):
        self.occ = np.asarray(occ)
        self.offset = np.asarray(offset, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        if self.occ.shape[1:] != self.offset.shape or self.offset.shape != self.scale.shape:
            raise ShapeError(f"occupancy {self.occ.shape} does not match offset/scale {self.offset.shape}")
        if not (np.isfinite(self.offset).all() and np.isfinite(self.scale).all()):
            raise ValueError("offset and scale must be finite")

    @property
    def shape(self):
        return (*self.occ.shape, 1)

    @property
    def ndim(self):
        return len(self.shape)

    def __len__(self):
        return len(self.occ)

    def __getitem__(self, idx):
        return AffineOccupancy(self.occ[idx], self.offset, self.scale)

    def dense(self, dtype=np.float64):
        return (self.offset + self.occ * self.scale).astype(dtype)[..., None]


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.input_shape = None
        self.output_shape = None
        self._cache = None

    def hyperparameters(self) -> dict:
        return {}

    def build(self, input_shape, rng, dtype):
        self.input_shape = tuple(input_shape)
        self.output_shape = self.compute_output_shape(self.input_shape)
        self.init_params(rng, dtype)
        return self.output_shape

    def compute_output_shape(self, input_shape):
        return input_shape

    def init_params(self, rng, dtype):
        pass

    def forward(self, x, train=False, rng=None):
        raise NotImplementedError

    def backward(self, grad, need_input_grad=True):
        raise NotImplementedError

    def _require_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.kind}: backward called without a preceding training forward pass")
        return self._cache

    def __repr__(self):
        hp = ", ".join(f"{k}={v}" for k, v in self.hyperparameters().items())
        return f"{type(self).__name__}({hp})"


class Conv3D(Layer):
    """Valid-padding 3D convolution, weights shaped ``(filters, in_channels, k1, k2, k3)``."""

    kind = "conv3d"

    def __init__(self, filters, kernel=3, stride=1):
        super().__init__()
        self.filters = int(filters)
        self.kernel = _triple(kernel)
        self.stride = _triple(stride)

    def hyperparameters(self):
        return {"filters": self.filters, "kernel": list(self.kernel), "stride": list(self.stride)}

    def compute_output_shape(self, input_shape):
        if len(input_shape) != 4:
            raise ShapeError(f"conv3d expects (d1, d2, d3, channels) input, got {input_shape}")
        out = []
        for n, k, s in zip(input_shape[:3], self.kernel, self.stride):
            if n < k:
                raise ShapeError(f"conv3d kernel {self.kernel} larger than input {input_shape[:3]}")
            out.append((n - k) // s + 1)
        return (*out, self.filters)

    def init_params(self, rng, dtype):
        fan_in = self.input_shape[3] * int(np.prod(self.kernel))
        limit = np.sqrt(6.0 / fan_in)
        shape = (self.filters, self.input_shape[3], *self.kernel)
        self.params["W"] = rng.uniform(-limit, limit, size=shape).astype(dtype)
        self.params["b"] = np.zeros(self.filters, dtype=dtype)

    def _columns(self, x):
        win = sliding_window_view(x, self.kernel, axis=(1, 2, 3))
        s1, s2, s3 = self.stride
        o1, o2, o3 = self.output_shape[:3]
        win = win[:, : o1 * s1 : s1, : o2 * s2 : s2, : o3 * s3 : s3]
        # (B, o1, o2, o3, C, k1, k2, k3) -> rows of patches
        return win.reshape(-1, win.shape[4] * int(np.prod(self.kernel)))

    def _sparse_columns(self, x: AffineOccupancy):
        """im2col of ``occ * scale`` as a CSR matrix with one row per output
        position and one column per kernel offset."""
        b, i, j, l = np.nonzero(x.occ)
        v = x.scale[i, j, l]
        o1, o2, o3 = self.output_shape[:3]
        s1, s2, s3 = self.stride
        n_out = o1 * o2 * o3

        def axis_hits(coord, k, s, o):
            d = coord[:, None] - np.arange(k)[None, :]
            ok = (d >= 0) & (d % s == 0) & (d // s < o)
            return d // s, ok

        p1, ok1 = axis_hits(i, self.kernel[0], s1, o1)
        p2, ok2 = axis_hits(j, self.kernel[1], s2, o2)
        p3, ok3 = axis_hits(l, self.kernel[2], s3, o3)
        ok = ok1[:, :, None, None] & ok2[:, None, :, None] & ok3[:, None, None, :]
        rows = (b[:, None, None, None] * n_out
                + (p1[:, :, None, None] * o2 + p2[:, None, :, None]) * o3 + p3[:, None, None, :])
        cols = np.broadcast_to(np.arange(int(np.prod(self.kernel))).reshape(self.kernel), ok.shape)
        vals = np.broadcast_to(v[:, None, None, None], ok.shape)
        return sp.csr_matrix(
            (vals[ok], (rows[ok], cols[ok])), shape=(len(x) * n_out, int(np.prod(self.kernel)))
        )

    def _forward_occupancy(self, x: AffineOccupancy, train):
        if self.input_shape[3] != 1:
            raise ShapeError("occupancy input needs a single-channel conv3d")
        Wm = self.params["W"].reshape(self.filters, -1)
        S = self._sparse_columns(x)
        base = self._columns(x.offset[None, ..., None].astype(Wm.dtype))
        out = np.asarray(S @ Wm.T).astype(Wm.dtype, copy=False).reshape(len(x), -1, self.filters)
        out += base @ Wm.T + self.params["b"]
        if train:
            self._cache = ("occupancy", S, base, len(x))
        return out.reshape(len(x), *self.output_shape)

    def forward(self, x, train=False, rng=None):
        if isinstance(x, AffineOccupancy):
            return self._forward_occupancy(x, train)
        W, b = self.params["W"], self.params["b"]
        cols = self._columns(x)
        out = cols @ W.reshape(self.filters, -1).T
        out += b
        if train:
            self._cache = x
        return out.reshape(x.shape[0], *self.output_shape)

    def backward(self, grad, need_input_grad=True):
        x = self._require_cache()
        W = self.params["W"]
        g = grad.reshape(-1, self.filters)
        if isinstance(x, tuple):
            _, S, base, n = x
            dW = np.asarray(S.T @ g).T + (base.T @ g.reshape(n, -1, self.filters).sum(axis=0)).T
            self.grads["W"] = dW.reshape(W.shape).astype(W.dtype, copy=False)
            self.grads["b"] = g.sum(axis=0)
            if need_input_grad:
                raise ShapeError("no input gradient for occupancy input")
            return None
        cols = self._columns(x)
        self.grads["W"] = (g.T @ cols).reshape(W.shape)
        self.grads["b"] = g.sum(axis=0)
        if not need_input_grad:
            return None
        dcols = (g @ W.reshape(self.filters, -1)).reshape(
            x.shape[0], *self.output_shape[:3], x.shape[4], *self.kernel
        )
        dx = np.zeros_like(x)
        s1, s2, s3 = self.stride
        o1, o2, o3 = self.output_shape[:3]
        k1, k2, k3 = self.kernel
        for i in range(k1):
            for j in range(k2):
                for l in range(k3):
                    dx[:, i : i + o1 * s1 : s1, j : j + o2 * s2 : s2, l : l + o3 * s3 : s3, :] += dcols[
                        ..., i, j, l
                    ]
        return dx


class MaxPool3D(Layer):
    """Non-overlapping max pooling; trailing cells that do not fill a window are dropped."""

    kind = "maxpool3d"

    def __init__(self, pool=2):
        super().__init__()
        self.pool = _triple(pool)

    def hyperparameters(self):
        return {"pool": list(self.pool)}

    def compute_output_shape(self, input_shape):
        if len(input_shape) != 4:
            raise ShapeError(f"maxpool3d expects (d1, d2, d3, channels) input, got {input_shape}")
        out = tuple(n // p for n, p in zip(input_shape[:3], self.pool))
        if min(out) < 1:
            raise ShapeError(f"maxpool3d pool {self.pool} larger than input {input_shape[:3]}")
        return (*out, input_shape[3])

    def _windows(self, x):
        (o1, o2, o3, c), (p1, p2, p3) = self.output_shape, self.pool
        xc = x[:, : o1 * p1, : o2 * p2, : o3 * p3, :]
        xr = xc.reshape(x.shape[0], o1, p1, o2, p2, o3, p3, c).transpose(0, 1, 3, 5, 7, 2, 4, 6)
        return xr.reshape(x.shape[0], o1, o2, o3, c, p1 * p2 * p3)

    def forward(self, x, train=False, rng=None):
        w = self._windows(x)
        arg = w.argmax(axis=-1)
        out = np.take_along_axis(w, arg[..., None], axis=-1)[..., 0]
        if train:
            self._cache = (x.shape, arg)
        return out

    def backward(self, grad, need_input_grad=True):
        shape, arg = self._require_cache()
        (o1, o2, o3, c), (p1, p2, p3) = self.output_shape, self.pool
        gw = np.zeros((*grad.shape, p1 * p2 * p3), dtype=grad.dtype)
        np.put_along_axis(gw, arg[..., None], grad[..., None], axis=-1)
        gw = gw.reshape(shape[0], o1, o2, o3, c, p1, p2, p3).transpose(0, 1, 5, 2, 6, 3, 7, 4)
        dx = np.zeros(shape, dtype=grad.dtype)
        dx[:, : o1 * p1, : o2 * p2, : o3 * p3, :] = gw.reshape(shape[0], o1 * p1, o2 * p2, o3 * p3, c)
        return dx


class Dense(Layer):
    """Fully connected layer ``y = x @ W + b`` with ``W`` shaped ``(fan_in, units)``."""

    kind = "dense"

    def __init__(self, units):
        super().__init__()
        self.units = int(units)

    def hyperparameters(self):
        return {"units": self.units}

    def compute_output_shape(self, input_shape):
        if len(input_shape) != 1:
            raise ShapeError(f"dense expects flat input, got {input_shape}")
        return (self.units,)

    def init_params(self, rng, dtype):
        fan_in = self.input_shape[0]
        limit = np.sqrt(6.0 / fan_in)
        self.params["W"] = rng.uniform(-limit, limit, size=(fan_in, self.units)).astype(dtype)
        self.params["b"] = np.zeros(self.units, dtype=dtype)

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, grad, need_input_grad=True):
        x = self._require_cache()
        self.grads["W"] = x.T @ grad
        self.grads["b"] = grad.sum(axis=0)
        if need_input_grad:
            return grad @ self.params["W"].T
        return None


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False, rng=None):
        if train:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, grad, need_input_grad=True):
        return grad * self._require_cache()


class Sigmoid(Layer):
    kind = "sigmoid"

    def forward(self, x, train=False, rng=None):
        # split by sign to avoid overflow in exp
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        if train:
            self._cache = out
        return out

    def backward(self, grad, need_input_grad=True):
        y = self._require_cache()
        return grad * y * (1.0 - y)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, x, train=False, rng=None):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=-1, keepdims=True)
        if train:
            self._cache = out
        return out

    def backward(self, grad, need_input_grad=True):
        y = self._require_cache()
        return y * (grad - (grad * y).sum(axis=-1, keepdims=True))


class Dropout(Layer):
    """Inverted dropout: surviving activations are scaled by ``1 / (1 - rate)``."""

    kind = "dropout"

    def __init__(self, rate=0.0):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def hyperparameters(self):
        return {"rate": self.rate}

    def forward(self, x, train=False, rng=None):
        if not train:
            return x
        if self.rate == 0.0:
            self._cache = None
            self._identity = True
            return x
        self._identity = False
        mask = (rng.random(x.shape) >= self.rate).astype(x.dtype) / (1.0 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, grad, need_input_grad=True):
        if getattr(self, "_identity", False):
            return grad
        return grad * self._require_cache()


class L2Normalize(Layer):
    """Scale each row to unit Euclidean length."""

    kind = "l2norm"

    def __init__(self, eps=1e-12):
        super().__init__()
        self.eps = float(eps)

    def hyperparameters(self):
        return {"eps": self.eps}

    def forward(self, x, train=False, rng=None):
        norm = np.sqrt((x * x).sum(axis=-1, keepdims=True) + self.eps)
        y = x / norm
        if train:
            self._cache = (y, norm)
        return y

    def backward(self, grad, need_input_grad=True):
        y, norm = self._require_cache()
        return (grad - y * (grad * y).sum(axis=-1, keepdims=True)) / norm


class Flatten(Layer):
    kind = "flatten"

    def compute_output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x, train=False, rng=None):
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, need_input_grad=True):
        return grad.reshape(grad.shape[0], *self.input_shape)


LAYER_KINDS = {
    cls.kind: cls for cls in (Conv3D, MaxPool3D, Dense, ReLU, Sigmoid, Softmax, Dropout, Flatten, L2Normalize)
}


def layer_from_config(kind: str, hyper: dict) -> Layer:
    try:
        cls = LAYER_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown layer kind {kind!r}") from None
    return cls(**hyper)
