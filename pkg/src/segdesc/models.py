"""Voxel CNN descriptors and their three training regimes.

All three estimators share one descriptor network layout and differ only in
what sits on top of it during training:

* :class:`GroupClassifierDescriptor` - softmax over groups, descriptor is the
  layer feeding the classifier;
* :class:`SiameseDescriptor` - twin branches with one parameter set and a
  merge head predicting whether two segments match;
* :class:`ContrastiveDescriptor` - contrastive loss on descriptor pairs with
  hard pairs re-mined after every epoch.

Inputs ``X`` are normalized voxel grids shaped ``(n, nx, ny, nz)``; ``y`` holds
group labels.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .evaluation import DescriptorIndex, candidate_match_accuracy
from .exceptions import NumericError, ShapeError
from .nn import (
    SGD, AffineOccupancy, Conv3D, Dense, Dropout, Flatten, L2Normalize, LayerStack, MaxPool3D, ReLU, SgdConfig, Sigmoid, Softmax,
    loss_binary_ce, loss_categorical_ce, loss_contrastive,
)
from .pairs import LabeledPair, groups_from_labels, mine_hard_pairs, pairs_to_arrays, sample_pairs

PRESETS = {
    "default": {"filters": (16, 32), "kernels": (5, 3), "dense_units": 256},
    "small": {"filters": (8, 16), "kernels": (5, 3), "dense_units": 128},
}

# published full-scale figures, kept in training reports for context only
KITTI_REFERENCE = {
    "group": "KITTI drive 18, ~500 classes: ~0.80 classification accuracy",
    "siamese": "KITTI drive 18: ~0.85 validation pair accuracy",
    "contrastive": "KITTI drive 18: best candidate-match accuracy 0.52 train / 0.65 validation",
}


def build_descriptor_stack(input_dims, preset="default", descriptor_dim=64, dropout=0.2, seed=0,
                           dtype=np.float64, architecture=None, unit_length=False) -> LayerStack:
    """conv-relu-pool blocks, then dense-relu-dropout and a linear descriptor
    layer, optionally scaled to unit length."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    arch = {**PRESETS[preset], **(architecture or {})}
    layers = []
    for f, k in zip(arch["filters"], arch["kernels"]):
        layers += [Conv3D(f, k), ReLU(), MaxPool3D(2)]
    layers += [Flatten(), Dense(arch["dense_units"]), ReLU(), Dropout(dropout), Dense(descriptor_dim)]
    if unit_length:
        layers.append(L2Normalize())
    return LayerStack(layers, (*input_dims, 1), seed=seed, dtype=dtype)


@dataclass
class DescriptorNet:
    stack: LayerStack
    preset: str = "default"

    @property
    def input_dims(self):
        return self.stack.input_shape[:3]

    @property
    def descriptor_dim(self) -> int:
        return self.stack.output_shape[0]

    def _batch(self, X):
        if isinstance(X, AffineOccupancy):
            dims = X.occ.shape[1:]
        else:
            X = np.asarray(X)
            dims = X.shape[1:]
        if dims != tuple(self.input_dims):
            raise ShapeError(f"expected grids of dims {tuple(self.input_dims)}, got {dims}")
        return X if isinstance(X, AffineOccupancy) else X[..., None]

    def describe(self, X, batch_size=64) -> np.ndarray:
        """Inference-mode descriptors for a stack of normalized grids."""
        X = self._batch(X)
        out = np.empty((len(X), self.descriptor_dim), dtype=self.stack.dtype)
        for s in range(0, len(X), batch_size):
            out[s : s + batch_size] = self.stack.forward(X[s : s + batch_size], mode="infer")
        return out

    def forward_train(self, X):
        return self.stack.forward(self._batch(X), mode="train")

    def backward(self, grad):
        self.stack.backward(grad, need_input_grad=False)


def extract_descriptor(net: DescriptorNet, voxelized) -> np.ndarray:
    if voxelized.stage != "normalized":
        raise ValueError("descriptors are extracted from normalized grids")
    return net.describe(voxelized.grid[None])[0]


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_metric: float
    val_metric: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.train_loss):
            raise NumericError(f"training loss became {self.train_loss} at epoch {self.epoch}")


@dataclass
class TrainReport:
    regime: str
    metric: str
    epochs: list[EpochRecord] = field(default_factory=list)
    seconds: float = 0.0
    notes: list[str] = field(default_factory=list)
    reference: str = ""


def _check_X(X):
    """Accept a dense ``(n, nx, ny, nz)`` array or an :class:`AffineOccupancy`."""
    if isinstance(X, AffineOccupancy):
        return X
    X = np.asarray(X)
    if X.ndim != 4:
        raise ShapeError(f"expected (n, nx, ny, nz) grids, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("input grids contain non-finite values")
    return X


def _candidate_accuracy(desc, labels):
    try:
        return candidate_match_accuracy(DescriptorIndex(np.arange(len(desc)), labels, desc))
    except ValueError:
        return None


class _VoxelDescriptor(BaseEstimator, TransformerMixin):
    regime = ""

    def _make_net(self, dims):
        stack = build_descriptor_stack(
            dims, self.preset, self.descriptor_dim, self.dropout, seed=self.random_state,
            dtype=np.dtype(self.dtype), architecture=self.architecture,
            unit_length=getattr(self, "unit_length", False),
        )
        return DescriptorNet(stack, self.preset)

    def _sgd_config(self):
        return SgdConfig(self.learning_rate, self.momentum, self.batch_size, self.epochs, self.random_state)

    def transform(self, X):
        check_is_fitted(self, "net_")
        return self.net_.describe(_check_X(X))

    def _start_report(self, metric):
        return TrainReport(self.regime, metric, reference=KITTI_REFERENCE[self.regime])

    def _pair_epoch(self, X, pairs, opt, rng, step):
        """One pass over ``pairs`` in shuffled mini-batches. Each batch runs the
        shared network once over its distinct segments; branch gradients are
        summed back onto those rows. ``step(da, db, y)`` returns
        ``(loss, grad_da, grad_db, n_correct)``."""
        a, b, y = pairs_to_arrays(pairs)
        perm = rng.permutation(len(y))
        total, correct = 0.0, 0
        for s in range(0, len(perm), self.batch_size):
            idx = perm[s : s + self.batch_size]
            n = len(idx)
            rows, inv = np.unique(np.r_[a[idx], b[idx]], return_inverse=True)
            D = self.net_.forward_train(X[rows])
            loss, ga, gb, ok = step(D[inv[:n]], D[inv[n:]], y[idx])
            gD = np.zeros_like(D)
            np.add.at(gD, inv[:n], ga)
            np.add.at(gD, inv[n:], gb)
            self.net_.backward(gD)
            opt.step(*self._trainable())
            total += loss * n
            correct += ok
        return total / len(y), correct / len(y)


class GroupClassifierDescriptor(_VoxelDescriptor):
    """Train a softmax classifier whose classes are the groups, then use the
    layer before the classifier as the descriptor. Groups with fewer than
    ``min_group_size`` members are removed before training."""

    regime = "group"

    def __init__(self, preset="default", descriptor_dim=64, dropout=0.2, min_group_size=8,
                 learning_rate=0.01, momentum=0.9, batch_size=32, epochs=10, random_state=0,
                 dtype="float64", architecture=None):
        self.preset = preset
        self.descriptor_dim = descriptor_dim
        self.dropout = dropout
        self.min_group_size = min_group_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state
        self.dtype = dtype
        self.architecture = architecture

    def _trainable(self):
        return self.net_.stack, self.head_

    def fit(self, X, y, validation_data=None):
        X = _check_X(X)
        y = np.asarray(y)
        labels, counts = np.unique(y, return_counts=True)
        keep = labels[counts >= self.min_group_size]
        if len(keep) < 2:
            raise ValueError(
                f"only {len(keep)} groups have at least {self.min_group_size} members; need 2 classes"
            )
        mask = np.isin(y, keep)
        X, y = X[mask], y[mask]
        self.classes_ = keep
        target = np.searchsorted(keep, y)

        t0 = time.perf_counter()
        self.net_ = self._make_net(X.shape[1:4])
        self.head_ = LayerStack(
            [Dense(len(keep)), Softmax()], (self.descriptor_dim,), seed=self.random_state + 1,
            dtype=np.dtype(self.dtype),
        )
        opt = SGD(self.learning_rate, self.momentum)
        rng = np.random.default_rng([self.random_state, 2])
        self.report_ = self._start_report("classification_accuracy")
        self.report_.notes.append(f"{len(keep)} classes, {int(mask.sum())} segments after size filter")
        for epoch in range(self.epochs):
            perm = rng.permutation(len(X))
            total, correct = 0.0, 0
            for s in range(0, len(perm), self.batch_size):
                idx = perm[s : s + self.batch_size]
                desc = self.net_.forward_train(X[idx])
                probs = self.head_.forward(desc, mode="train")
                loss, g = loss_categorical_ce(probs, target[idx], fused=True)
                self.net_.backward(self.head_.backward(g, skip_last=1))
                opt.step(*self._trainable())
                total += loss * len(idx)
                correct += int((probs.argmax(axis=1) == target[idx]).sum())
            self.report_.epochs.append(
                EpochRecord(epoch, total / len(X), correct / len(X), self._validate(validation_data))
            )
        self.report_.seconds = time.perf_counter() - t0
        return self

    def _validate(self, validation_data):
        if validation_data is None:
            return None
        Xv, yv = validation_data
        Xv, yv = _check_X(Xv), np.asarray(yv)
        if np.isin(yv, self.classes_).all():
            return float((self.predict(Xv) == yv).mean())
        return _candidate_accuracy(self.transform(Xv), yv)

    def decision_function(self, X):
        """Class scores ``descriptor @ W + b`` of the classification layer."""
        dense = self.head_.layers[0]
        return self.transform(X) @ dense.params["W"] + dense.params["b"]

    def predict_proba(self, X):
        check_is_fitted(self, "head_")
        return self.head_.forward(self.transform(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


class SiameseDescriptor(_VoxelDescriptor):
    """Twin descriptor branches with a single parameter set. The merge head
    takes ``|a - b|`` (so swapping inputs cannot change the output), then
    dense-relu and a sigmoid unit giving the match probability.

    Without explicit ``pairs``, every epoch draws ``pairs_per_epoch`` fresh
    pairs, half positive and half negative.

    ``dropout`` defaults to 0: the two branches see independent masks, which
    makes ``|a - b|`` noisy even for matching pairs, and training often
    stalls at chance.
    """

    regime = "siamese"

    def __init__(self, preset="default", descriptor_dim=64, dropout=0.0, head_units=64,
                 pairs_per_epoch=None, learning_rate=0.01, momentum=0.9, batch_size=32, epochs=10,
                 random_state=0, dtype="float64", architecture=None):
        self.preset = preset
        self.descriptor_dim = descriptor_dim
        self.dropout = dropout
        self.head_units = head_units
        self.pairs_per_epoch = pairs_per_epoch
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state
        self.dtype = dtype
        self.architecture = architecture

    @property
    def branches(self):
        """Both branches evaluate this one stack."""
        check_is_fitted(self, "net_")
        return self.net_.stack, self.net_.stack

    def _trainable(self):
        return self.net_.stack, self.head_

    def _n_pos(self, groups, n_rows):
        n_pos = (self.pairs_per_epoch or n_rows) // 2
        return max(1, n_pos)

    def fit(self, X, y, validation_data=None, pairs=None):
        X = _check_X(X)
        y = np.asarray(y)
        groups = groups_from_labels(y)
        if pairs is not None and len({p.y for p in pairs}) < 2:
            raise ValueError("Siamese training needs both matching and non-matching pairs")
        t0 = time.perf_counter()
        self.net_ = self._make_net(X.shape[1:4])
        self.head_ = LayerStack(
            [Dense(self.head_units), ReLU(), Dense(1), Sigmoid()], (self.descriptor_dim,),
            seed=self.random_state + 1, dtype=np.dtype(self.dtype),
        )
        opt = SGD(self.learning_rate, self.momentum)
        rng = np.random.default_rng([self.random_state, 2])
        self.report_ = self._start_report("pair_accuracy")
        val_pairs = None
        if validation_data is not None:
            Xv, yv = validation_data
            gv = groups_from_labels(yv)
            val_pairs = sample_pairs(gv, min(len(yv) // 2, _max_pos(gv)), seed=[self.random_state, 4])

        def step(da, db, yb):
            diff = da - db
            p = self.head_.forward(np.abs(diff), mode="train")
            loss, g = loss_binary_ce(p, yb[:, None])
            gdiff = self.head_.backward(g) * np.sign(diff)
            correct = int(((p[:, 0] >= 0.5) == (yb == 1)).sum())
            return loss, gdiff, -gdiff, correct

        for epoch in range(self.epochs):
            epoch_pairs = pairs
            if epoch_pairs is None:
                n_pos = min(self._n_pos(groups, len(X)), _max_pos(groups))
                epoch_pairs = sample_pairs(groups, n_pos, seed=[self.random_state, 5, epoch])
            loss, acc = self._pair_epoch(X, epoch_pairs, opt, rng, step)
            val = None
            if val_pairs is not None:
                a, b, yy = pairs_to_arrays(val_pairs)
                val = float(((self.predict_pair_proba(Xv, a, b) >= 0.5) == (yy == 1)).mean())
            self.report_.epochs.append(EpochRecord(epoch, loss, acc, val))
        self.report_.seconds = time.perf_counter() - t0
        return self

    def merge_proba(self, da, db):
        check_is_fitted(self, "head_")
        return self.head_.forward(np.abs(np.asarray(da) - np.asarray(db)))[:, 0]

    def predict_pair_proba(self, X, idx_a, idx_b):
        """Match probability for pairs of rows ``(X[idx_a[k]], X[idx_b[k]])``."""
        idx_a, idx_b = np.asarray(idx_a), np.asarray(idx_b)
        rows, inv = np.unique(np.r_[idx_a, idx_b], return_inverse=True)
        D = self.transform(_check_X(X)[rows])
        n = len(idx_a)
        return self.merge_proba(D[inv[:n]], D[inv[n:]])


class ContrastiveDescriptor(_VoxelDescriptor):
    """Descriptors trained directly with the contrastive loss
    ``y d^2 + (1 - y) max(0, margin - d^2)``.

    The first epoch trains on randomly sampled balanced pairs; at the end of
    every epoch the hard pairs (closest non-matching, farthest matching) are
    mined from inference-mode descriptors and used for the next epoch.
    """

    regime = "contrastive"

    def __init__(self, preset="default", descriptor_dim=64, dropout=0.2, margin=1.0, k_hard=None,
                 subsample_ratio=0.5, initial_pairs=None, unit_length=True, learning_rate=0.01,
                 momentum=0.9, batch_size=32, epochs=10, random_state=0, dtype="float64",
                 architecture=None):
        self.preset = preset
        self.descriptor_dim = descriptor_dim
        self.dropout = dropout
        self.margin = margin
        self.k_hard = k_hard
        self.subsample_ratio = subsample_ratio
        self.initial_pairs = initial_pairs
        self.unit_length = unit_length
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state
        self.dtype = dtype
        self.architecture = architecture

    def _trainable(self):
        return (self.net_.stack,)

    def fit(self, X, y, validation_data=None):
        if not self.margin > 0:
            raise ValueError("margin must be positive")
        X = _check_X(X)
        y = np.asarray(y)
        groups = groups_from_labels(y)
        k_hard = self.k_hard or 4 * self.batch_size
        t0 = time.perf_counter()
        self.net_ = self._make_net(X.shape[1:4])
        opt = SGD(self.learning_rate, self.momentum)
        rng = np.random.default_rng([self.random_state, 2])
        self.report_ = self._start_report("candidate_match_accuracy")
        n_pos = min((self.initial_pairs or 2 * k_hard) // 2, _max_pos(groups))
        pairs = sample_pairs(groups, max(1, n_pos), seed=[self.random_state, 5])
        self.pair_history_ = []

        def step(da, db, yb):
            loss, ga, gb = loss_contrastive(da, db, yb, self.margin)
            d2 = ((da - db) ** 2).sum(axis=1)
            correct = int(((d2 < self.margin) == (yb == 1)).sum())
            return loss, ga, gb, correct

        for epoch in range(self.epochs):
            self.pair_history_.append(pairs)
            loss, _ = self._pair_epoch(X, pairs, opt, rng, step)
            desc = self.net_.describe(X)
            acc = _candidate_accuracy(desc, y)
            val = None
            if validation_data is not None:
                val = _candidate_accuracy(self.transform(validation_data[0]), np.asarray(validation_data[1]))
            self.report_.epochs.append(EpochRecord(epoch, loss, acc, val))
            if epoch + 1 < self.epochs:
                mined = mine_hard_pairs(desc, y, k_hard, self.subsample_ratio, seed=[self.random_state, 6, epoch])
                if mined.short:
                    self.report_.notes.append(
                        f"epoch {epoch}: fewer than {k_hard} candidates, mined {mined.n_hard_positive} per side"
                    )
                if mined.pairs:
                    pairs = mined.pairs
        self.report_.seconds = time.perf_counter() - t0
        return self


def _max_pos(groups):
    return sum(len(g.member_ids) * (len(g.member_ids) - 1) // 2 for g in groups)


# functional entry points mirroring the estimators


def train_group_classifier(X, labels, min_group_size=8, cfg: SgdConfig = SgdConfig(), **kw):
    model = GroupClassifierDescriptor(
        min_group_size=min_group_size, learning_rate=cfg.learning_rate, momentum=cfg.momentum,
        batch_size=cfg.batch_size, epochs=cfg.epochs, random_state=cfg.seed, **kw,
    )
    return model.fit(X, labels)


def train_siamese(X, labels, pairs: list[LabeledPair] | None = None, cfg: SgdConfig = SgdConfig(), **kw):
    model = SiameseDescriptor(
        learning_rate=cfg.learning_rate, momentum=cfg.momentum, batch_size=cfg.batch_size,
        epochs=cfg.epochs, random_state=cfg.seed, **kw,
    )
    return model.fit(X, labels, pairs=pairs)


def train_contrastive(X, labels, margin=1.0, cfg: SgdConfig = SgdConfig(), **kw):
    model = ContrastiveDescriptor(
        margin=margin, learning_rate=cfg.learning_rate, momentum=cfg.momentum,
        batch_size=cfg.batch_size, epochs=cfg.epochs, random_state=cfg.seed, **kw,
    )
    return model.fit(X, labels)
