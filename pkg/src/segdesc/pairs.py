"""Pair sampling and hard-pair mining over segment groups."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .geometry import SegmentGroup


@dataclass(frozen=True)
class LabeledPair:
    id_a: int
    id_b: int
    y: int

    def __post_init__(self):
        if self.id_a == self.id_b:
            raise ValueError("a pair needs two distinct segments")
        if self.y not in (0, 1):
            raise ValueError("pair label must be 0 or 1")

    @property
    def key(self):
        return (min(self.id_a, self.id_b), max(self.id_a, self.id_b))


def groups_from_labels(labels) -> list[SegmentGroup]:
    """One group per distinct label; members are row indices."""
    labels = np.asarray(labels)
    return [SegmentGroup(int(g), np.flatnonzero(labels == g).tolist()) for g in np.unique(labels)]


def pairs_to_arrays(pairs: list[LabeledPair]):
    a = np.array([p.id_a for p in pairs], dtype=np.int64)
    b = np.array([p.id_b for p in pairs], dtype=np.int64)
    y = np.array([p.y for p in pairs], dtype=np.int64)
    return a, b, y


def sample_pairs(groups: list[SegmentGroup], n_pos: int, seed=0) -> list[LabeledPair]:
    """Draw ``n_pos`` positive and ``n_pos`` negative pairs without repeats.

    Positives are drawn uniformly from all within-group pairs, negatives by
    rejection from uniformly random cross-group pairs. Positives come first,
    then negatives.
    """
    rng = np.random.default_rng(seed)
    positives = [pair for g in groups for pair in combinations(sorted(g.member_ids), 2)]
    if len(groups) < 2 or not positives:
        raise ValueError("need at least two groups and one group with two members")
    sizes = np.array([len(g.member_ids) for g in groups])
    n_total = int(sizes.sum())
    n_neg_max = (n_total * (n_total - 1)) // 2 - len(positives)
    achievable = min(len(positives), n_neg_max)
    if n_pos > achievable:
        raise ValueError(f"cannot draw {n_pos} distinct pairs per label; achievable maximum is {achievable}")

    pick = rng.choice(len(positives), size=n_pos, replace=False)
    out = [LabeledPair(*positives[i], 1) for i in pick]

    members = np.concatenate([np.asarray(g.member_ids) for g in groups])
    owner = np.repeat(np.arange(len(groups)), sizes)
    seen = set()
    while len(seen) < n_pos:
        need = n_pos - len(seen)
        i = rng.integers(0, n_total, size=2 * need + 8)
        j = rng.integers(0, n_total, size=2 * need + 8)
        for a, b in zip(i, j):
            if owner[a] == owner[b]:
                continue
            key = (min(members[a], members[b]), max(members[a], members[b]))
            if key in seen:
                continue
            seen.add(key)
            out.append(LabeledPair(int(members[a]), int(members[b]), 0))
            if len(seen) == n_pos:
                break
    return out


@dataclass
class MiningResult:
    pairs: list[LabeledPair]
    n_hard_negative: int
    n_hard_positive: int
    short: bool  # fewer than k_hard candidates were available on some side


def pairwise_sq_distances(x, chunk=64):
    """Exact squared distances by explicit differencing (no Gram-matrix
    cancellation, so orderings agree with a direct per-pair computation)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty((len(x), len(x)))
    for s in range(0, len(x), chunk):
        diff = x[s : s + chunk, None, :] - x[None, :, :]
        out[s : s + chunk] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _top_k(dist, mask, k, largest):
    i, j = np.nonzero(mask)
    d = dist[i, j]
    if len(d) > k:
        sel = np.argpartition(-d if largest else d, k - 1)[:k]
        cut = d[sel].max() if not largest else d[sel].min()
        # keep every entry tied with the cut so the tie-break below is total
        keep = d >= cut if largest else d <= cut
        i, j, d = i[keep], j[keep], d[keep]
    order = np.lexsort((j, i, -d if largest else d))[:k]
    return i[order], j[order]


def mine_hard_pairs(descriptors, labels, k_hard, subsample_ratio=0.5, seed=0, ids=None) -> MiningResult:
    """Hard negatives are the ``k_hard`` closest cross-group pairs, hard
    positives the ``k_hard`` farthest within-group pairs (ties broken by
    index). A seeded uniform fraction ``subsample_ratio`` of each set is kept
    and both sides are truncated to equal size."""
    if not 0.0 < subsample_ratio <= 1.0:
        raise ValueError("subsample_ratio must be in (0, 1]")
    x = np.asarray(descriptors, dtype=np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("need at least two groups to mine pairs")
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    dist = pairwise_sq_distances(x)
    upper = np.triu(np.ones(dist.shape, dtype=bool), k=1)
    same = labels[:, None] == labels[None, :]
    ni, nj = _top_k(dist, upper & ~same, k_hard, largest=False)
    pi, pj = _top_k(dist, upper & same, k_hard, largest=True)
    short = len(ni) < k_hard or len(pi) < k_hard

    rng = np.random.default_rng(seed)

    def subsample(a, b):
        n = int(round(len(a) * subsample_ratio))
        if n == len(a):
            return a, b
        sel = np.sort(rng.choice(len(a), size=n, replace=False))
        return a[sel], b[sel]

    ni, nj = subsample(ni, nj)
    pi, pj = subsample(pi, pj)
    n = min(len(ni), len(pi))
    pairs = [LabeledPair(int(ids[a]), int(ids[b]), 1) for a, b in zip(pi[:n], pj[:n])]
    pairs += [LabeledPair(int(ids[a]), int(ids[b]), 0) for a, b in zip(ni[:n], nj[:n])]
    return MiningResult(pairs, n, n, short)
