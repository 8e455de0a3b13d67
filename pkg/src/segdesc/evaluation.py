"""Evaluation protocols: nearest-neighbor candidate matching, pair
classification ROC, the secondary pair classifier and throughput timing."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import NotTrainedError
from .nn import SGD, Dense, LayerStack, ReLU, Sigmoid, loss_binary_ce
from .pairs import LabeledPair, pairs_to_arrays, pairwise_sq_distances


@dataclass
class DescriptorIndex:
    segment_ids: np.ndarray
    group_ids: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        self.segment_ids = np.asarray(self.segment_ids, dtype=np.int64)
        self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
        self.descriptors = np.atleast_2d(np.asarray(self.descriptors, dtype=np.float64))
        n = len(self.segment_ids)
        if self.group_ids.shape != (n,) or self.descriptors.shape[0] != n:
            raise ValueError("segment_ids, group_ids and descriptors must have matching lengths")
        if len(np.unique(self.segment_ids)) != n:
            raise ValueError("segment ids in an index must be unique")
        if not np.isfinite(self.descriptors).all():
            raise ValueError("descriptors must be finite")

    @property
    def dimension(self) -> int:
        return self.descriptors.shape[1]

    def __len__(self):
        return len(self.segment_ids)


def nearest_neighbor_match(index: DescriptorIndex, query, exclude=None):
    """Exhaustive Euclidean nearest neighbor; ties go to the lowest segment id."""
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dimension,):
        raise ValueError(f"query has shape {q.shape}, index dimension is {index.dimension}")
    keep = index.segment_ids != exclude if exclude is not None else np.ones(len(index), dtype=bool)
    if not keep.any():
        raise ValueError("index has no entries besides the excluded one")
    diff = index.descriptors[keep] - q
    d2 = np.einsum("ij,ij->i", diff, diff)
    ids = index.segment_ids[keep]
    best = np.lexsort((ids, d2))[0]
    return int(ids[best]), float(np.sqrt(d2[best]))


def nearest_neighbors(index: DescriptorIndex):
    """Nearest other entry for every entry (row positions), same tie rule."""
    d2 = pairwise_sq_distances(index.descriptors)
    np.fill_diagonal(d2, np.inf)
    # argmin returns the first minimum, so order columns by segment id
    order = np.argsort(index.segment_ids, kind="stable")
    nn = order[np.argmin(d2[:, order], axis=1)]
    return nn, np.sqrt(d2[np.arange(len(nn)), nn])


@dataclass
class CandidateMatchResult:
    accuracy: float
    n_eligible: int
    n_excluded: int


def candidate_match_accuracy(index: DescriptorIndex, details=False):
    """Fraction of entries whose nearest neighbor (itself excluded) belongs to
    the same group. Entries whose group has no other member in the index are
    left out and counted in the details."""
    uniq, inv, cnt = np.unique(index.group_ids, return_inverse=True, return_counts=True)
    eligible = cnt[inv] >= 2
    if not eligible.any() or len(index) < 2:
        raise ValueError("no entry has another member of its group in the index")
    nn, _ = nearest_neighbors(index)
    hits = index.group_ids[nn] == index.group_ids
    acc = float(hits[eligible].mean())
    if details:
        return CandidateMatchResult(acc, int(eligible.sum()), int((~eligible).sum()))
    return acc


# --------------------------------------------------------------------------
# ROC


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float
    scores: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)


def roc_auc(scores, labels) -> RocCurve:
    """Threshold sweep over the distinct scores (ties share one threshold),
    trapezoidal AUC. With ties collapsed this equals the Mann-Whitney
    statistic with ties counted one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(np.int64)
    if s.shape != y.shape or len(s) < 2:
        raise ValueError("need at least two scored samples")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative labels")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), len(s) - 1]
    tp = np.cumsum(y_sorted == 1)[last_of_run]
    fp = np.cumsum(y_sorted == 0)[last_of_run]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    thresholds = np.r_[np.inf, s_sorted[last_of_run]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc, s, y)


# --------------------------------------------------------------------------
# secondary pair classifier


def pair_features(descriptors, pairs):
    """Concatenate the two descriptors of every pair; returns ``(X, y)``.

    ``pairs`` is a list of :class:`LabeledPair` whose ids index rows of
    ``descriptors``."""
    a, b, y = pairs_to_arrays(pairs)
    d = np.asarray(descriptors, dtype=np.float64)
    return np.hstack([d[a], d[b]]), y


class PairClassifier(BaseEstimator, ClassifierMixin):
    """Small MLP on concatenated descriptor pairs (dense 32, ReLU, dense 1,
    sigmoid) trained with binary cross-entropy. Inputs are standardized with
    statistics from the training pairs."""

    def __init__(self, hidden=32, learning_rate=0.01, momentum=0.9, batch_size=32, epochs=100, random_state=0):
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        if not np.array_equal(self.classes_, [0, 1]):
            raise ValueError("pair classifier needs both labels 0 and 1")
        self.mean_ = X.mean(axis=0)
        self.scale_ = np.where(X.std(axis=0) > 0, X.std(axis=0), 1.0)
        Z = (X - self.mean_) / self.scale_
        self.stack_ = LayerStack(
            [Dense(self.hidden), ReLU(), Dense(1), Sigmoid()], (X.shape[1],), seed=self.random_state
        )
        opt = SGD(self.learning_rate, self.momentum)
        rng = np.random.default_rng([self.random_state, 3])
        self.loss_curve_ = []
        for _ in range(self.epochs):
            perm = rng.permutation(len(Z))
            total = 0.0
            for s in range(0, len(perm), self.batch_size):
                idx = perm[s : s + self.batch_size]
                p = self.stack_.forward(Z[idx], mode="train")
                loss, g = loss_binary_ce(p, y[idx, None])
                self.stack_.backward(g, need_input_grad=False)
                opt.step(self.stack_)
                total += loss * len(idx)
            self.loss_curve_.append(total / len(Z))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "stack_")
        X = check_array(X, dtype=np.float64)
        p = self.stack_.forward((X - self.mean_) / self.scale_)[:, 0]
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)


def train_pair_classifier(descriptors, pairs, **params) -> PairClassifier:
    X, y = pair_features(descriptors, pairs)
    return PairClassifier(**params).fit(X, y)


def score_pairs(model, pairs: list[LabeledPair], data, pair_classifier=None):
    """Match probability for every pair, in input order.

    ``model`` is either a fitted Siamese estimator (scored by its merge head on
    the voxel ``data``) or any descriptor transformer, in which case
    ``pair_classifier`` scores concatenated descriptors of ``model.transform(data)``.
    """
    if hasattr(model, "predict_pair_proba"):
        a, b, _ = pairs_to_arrays(pairs)
        return model.predict_pair_proba(data, a, b)
    if pair_classifier is None or not hasattr(pair_classifier, "stack_"):
        raise NotTrainedError("non-Siamese methods need a fitted pair classifier")
    desc = model.transform(data)
    X, _ = pair_features(desc, pairs)
    return pair_classifier.predict_proba(X)[:, 1]


# --------------------------------------------------------------------------
# throughput


@dataclass
class ThroughputResult:
    segments_per_second: float
    repetitions: list[float]
    batch_size: int

    @property
    def spread(self) -> float:
        """Relative half-range of the repetitions, a rough noise bound."""
        r = np.asarray(self.repetitions)
        return float((r.max() - r.min()) / 2.0 / np.median(r))


def throughput_bench(describe, X, repetitions=10) -> ThroughputResult:
    """Median segments/second of ``describe(X)`` after one untimed warm-up."""
    if len(X) == 0:
        raise ValueError("benchmark batch is empty")
    describe(X)
    rates = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        describe(X)
        rates.append(len(X) / (time.perf_counter() - t0))
    return ThroughputResult(float(np.median(rates)), rates, len(X))


# --------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    method: str
    roc: RocCurve | None = None
    candidate_match: CandidateMatchResult | None = None
    throughput: dict[str, float] = field(default_factory=dict)

    def summary(self) -> dict:
        out = {"method": self.method}
        if self.roc is not None:
            out["auc"] = self.roc.auc
        if self.candidate_match is not None:
            out.update({f"candidate_{k}": v for k, v in asdict(self.candidate_match).items()})
        out.update({f"throughput_{k}": v for k, v in self.throughput.items()})
        return out


CSV_COLUMNS = ["method", "kind", "fpr", "tpr", "threshold", "auc", "candidate_accuracy",
               "candidate_eligible", "candidate_excluded", "throughput_preset", "segments_per_second"]


def write_reports_csv(reports: list[EvalReport], path) -> None:
    """One ``roc`` row per curve point, then one ``summary`` row per method
    and one ``throughput`` row per benchmarked preset."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, restval="")
        w.writeheader()
        for r in reports:
            if r.roc is not None:
                for f, t, th in zip(r.roc.fpr, r.roc.tpr, r.roc.thresholds):
                    w.writerow({"method": r.method, "kind": "roc", "fpr": repr(float(f)),
                                "tpr": repr(float(t)), "threshold": repr(float(th))})
            row = {"method": r.method, "kind": "summary"}
            if r.roc is not None:
                row["auc"] = repr(r.roc.auc)
            if r.candidate_match is not None:
                row["candidate_accuracy"] = repr(r.candidate_match.accuracy)
                row["candidate_eligible"] = r.candidate_match.n_eligible
                row["candidate_excluded"] = r.candidate_match.n_excluded
            w.writerow(row)
            for preset, rate in r.throughput.items():
                w.writerow({"method": r.method, "kind": "throughput", "throughput_preset": preset,
                            "segments_per_second": repr(rate)})


def write_reports_jsonl(reports: list[EvalReport], path) -> None:
    with open(path, "w") as fh:
        for r in reports:
            rec = r.summary()
            if r.roc is not None:
                rec["roc"] = {"fpr": r.roc.fpr.tolist(), "tpr": r.roc.tpr.tolist()}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
