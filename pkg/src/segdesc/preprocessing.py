"""Segment preprocessing: clustering, grouping, alignment, voxelization,
per-voxel normalization and within-group deduplication."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import PreprocessingError
from .nn.layers import AffineOccupancy
from .geometry import Segment, SegmentGroup, centroid, rotate_segment

DEFAULT_AUGMENTATION_ANGLES = tuple(np.deg2rad([-15.0, -7.5, 0.0, 7.5, 15.0]))


@dataclass(frozen=True)
class VoxelGridSpec:
    dims: tuple[int, int, int] = (38, 38, 18)
    voxel_size: float = 0.2

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"invalid grid dims {self.dims}")
        if not self.voxel_size > 0:
            raise ValueError("voxel_size must be positive")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))


@dataclass
class PreprocessConfig:
    d_same: float = 1.5
    th_H: int = 50
    cluster_radius: float = 0.2
    min_cluster_points: int = 100
    augmentation_angles: tuple[float, ...] = field(default=DEFAULT_AUGMENTATION_ANGLES)

    def __post_init__(self):
        if not self.d_same > 0:
            raise ValueError("d_same must be positive")
        if self.th_H < 0:
            raise ValueError("th_H must be >= 0")
        if not self.cluster_radius > 0:
            raise ValueError("cluster_radius must be positive")
        self.augmentation_angles = tuple(float(a) for a in self.augmentation_angles)


@dataclass
class VoxelizedSegment:
    segment_id: int
    grid: np.ndarray
    stage: str = "binary"
    group_id: int = -1

    def __post_init__(self):
        if self.stage not in ("binary", "normalized"):
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def occupied_count(self) -> int:
        if self.stage != "binary":
            raise ValueError("occupied_count is only defined for binary grids")
        return int(np.count_nonzero(self.grid))


@dataclass
class NormalizationStats:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = 1e-8

    @property
    def scale(self) -> np.ndarray:
        # zero-variance cells carry no information on the training split
        return np.where(self.std > 0, 1.0 / (self.std + self.epsilon), 0.0)

    def _check(self, grids):
        grids = np.asarray(grids)
        if grids.shape[-3:] != self.mean.shape:
            raise PreprocessingError(
                f"grid dims {grids.shape[-3:]} do not match normalizer dims {self.mean.shape}"
            )
        return grids

    def apply(self, grids: np.ndarray, dtype=np.float64) -> np.ndarray:
        out = (self._check(grids) - self.mean) * self.scale
        return out.astype(dtype, copy=False)

    def occupancy(self, grids) -> AffineOccupancy:
        """Lazy normalized view of binary grids, ``-mean*scale + occ*scale``
        per cell; the descriptor network consumes it without densifying."""
        scale = self.scale
        return AffineOccupancy(self._check(grids), -self.mean * scale, scale)


# --------------------------------------------------------------------------
# clustering and grouping


def euclidean_cluster(
    points,
    cfg: PreprocessConfig,
    observer_position=(0.0, 0.0, 0.0),
    frame_index: int = 0,
    run_id: str = "run0",
    first_id: int = 0,
) -> list[Segment]:
    """Region growing: connected components of the graph linking points closer
    than ``cfg.cluster_radius``. Components smaller than
    ``cfg.min_cluster_points`` are dropped. Segments are ordered by their
    lowest point index."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return []
    pairs = cKDTree(pts).query_pairs(cfg.cluster_radius, output_type="ndarray")
    n = len(pts)
    adj = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    order = {}
    for idx, lab in enumerate(labels):
        order.setdefault(lab, []).append(idx)
    segments = []
    for members in sorted(order.values(), key=lambda m: m[0]):
        if len(members) < cfg.min_cluster_points:
            continue
        segments.append(
            Segment(
                segment_id=first_id + len(segments),
                points=pts[members],
                observer_position=observer_position,
                frame_index=frame_index,
                run_id=run_id,
            )
        )
    return segments


def build_groups(segments: list[Segment], cfg: PreprocessConfig) -> list[SegmentGroup]:
    """Chain segments across frames into groups.

    A segment joins a group when its centroid is closer than ``d_same`` to the
    centroid of any member seen in an earlier frame; among several candidate
    groups the lowest group id wins. Otherwise it starts a new group.
    """
    ordered = sorted(segments, key=lambda s: s.frame_index)
    cents = np.empty((len(ordered), 3))
    frames = np.empty(len(ordered), dtype=np.int64)
    labels = np.full(len(ordered), -1, dtype=np.int64)
    groups: list[SegmentGroup] = []
    for i, seg in enumerate(ordered):
        c = centroid(seg)
        cents[i] = c
        frames[i] = seg.frame_index
        earlier = frames[:i] < seg.frame_index
        gid = -1
        if earlier.any():
            d2 = ((cents[:i] - c) ** 2).sum(axis=1)
            hit = earlier & (d2 < cfg.d_same**2)
            if hit.any():
                gid = int(labels[:i][hit].min())
        if gid < 0:
            gid = len(groups)
            groups.append(SegmentGroup(gid, [seg.segment_id]))
        else:
            groups[gid].member_ids.append(seg.segment_id)
        labels[i] = gid
    return groups


def check_groups(groups: list[SegmentGroup], segments: list[Segment]) -> None:
    """Raise if ``groups`` is not a partition of ``segments``."""
    seen = set()
    for g in groups:
        for sid in g.member_ids:
            if sid in seen:
                raise PreprocessingError(f"segment {sid} belongs to more than one group")
            seen.add(sid)
    missing = {s.segment_id for s in segments} - seen
    if missing:
        raise PreprocessingError(f"{len(missing)} segments are not in any group")


# --------------------------------------------------------------------------
# alignment and augmentation


def align_segment(segment: Segment) -> Segment:
    """Rotate about the vertical axis through the centroid so the observer
    ends up on the positive x ray."""
    c = centroid(segment)
    dx, dy = segment.observer_position[:2] - c[:2]
    if np.hypot(dx, dy) <= 1e-6:
        raise PreprocessingError(
            f"alignment-undefined: observer is vertically above/below segment {segment.segment_id}"
        )
    return rotate_segment(segment, -np.arctan2(dy, dx), pivot=c)


def augment_rotations(segment: Segment, angles) -> list[Segment]:
    return [rotate_segment(segment, a) for a in angles]


# --------------------------------------------------------------------------
# voxelization


def voxel_indices(points: np.ndarray, center: np.ndarray, spec: VoxelGridSpec) -> np.ndarray:
    """Integer cell index of each point for a grid centered on ``center``;
    rows falling outside the grid are removed."""
    dims = np.asarray(spec.dims)
    origin = center - dims * spec.voxel_size / 2.0
    idx = np.floor((points - origin) / spec.voxel_size).astype(np.int64)
    inside = ((idx >= 0) & (idx < dims)).all(axis=1)
    return idx[inside]


def voxelize(segment: Segment, spec: VoxelGridSpec = VoxelGridSpec()) -> VoxelizedSegment:
    idx = voxel_indices(segment.points, centroid(segment), spec)
    if len(idx) == 0:
        raise PreprocessingError(f"empty-voxelization: segment {segment.segment_id} lies outside the grid")
    grid = np.zeros(spec.dims, dtype=np.uint8)
    grid[idx[:, 0], idx[:, 1], idx[:, 2]] = 1
    return VoxelizedSegment(segment.segment_id, grid, "binary", segment.group_id)


class Voxelizer(BaseEstimator, TransformerMixin):
    """Turn a list of segments into a stack of binary occupancy grids.

    Stateless; ``fit`` only validates parameters so the voxelizer can sit at
    the head of a :class:`sklearn.pipeline.Pipeline`.
    """

    def __init__(self, dims=(38, 38, 18), voxel_size=0.2, align=True):
        self.dims = dims
        self.voxel_size = voxel_size
        self.align = align

    def fit(self, segments, y=None):
        self.spec_ = VoxelGridSpec(tuple(self.dims), self.voxel_size)
        return self

    def transform(self, segments):
        check_is_fitted(self, "spec_")
        out = np.zeros((len(segments),) + self.spec_.dims, dtype=np.uint8)
        for i, seg in enumerate(segments):
            if self.align:
                seg = align_segment(seg)
            out[i] = voxelize(seg, self.spec_).grid
        return out


# --------------------------------------------------------------------------
# normalization


def fit_normalizer(train_grids: np.ndarray, epsilon: float = 1e-8) -> NormalizationStats:
    train_grids = np.asarray(train_grids)
    if train_grids.ndim != 4 or len(train_grids) == 0:
        raise PreprocessingError("need a nonempty (n, nx, ny, nz) stack of training grids")
    # np.mean/np.std reduce with pairwise summation, independent of thread layout
    x = train_grids.astype(np.float64)
    return NormalizationStats(mean=x.mean(axis=0), std=x.std(axis=0), epsilon=epsilon)


def fit_and_apply_normalizer(train: list[VoxelizedSegment], rest: list[VoxelizedSegment], epsilon=1e-8):
    """Fit per-cell statistics on ``train`` and apply them to both lists."""
    if not train:
        raise PreprocessingError("training split is empty")
    dims = train[0].grid.shape
    for v in list(train) + list(rest):
        if v.stage != "binary":
            raise PreprocessingError(f"segment {v.segment_id} is already normalized")
        if v.grid.shape != dims:
            raise PreprocessingError(f"segment {v.segment_id} has dims {v.grid.shape}, expected {dims}")
    stats = fit_normalizer(np.stack([v.grid for v in train]), epsilon)

    def norm(items):
        return [VoxelizedSegment(v.segment_id, stats.apply(v.grid), "normalized", v.group_id) for v in items]

    return stats, norm(train), norm(rest)


class VoxelNormalizer(BaseEstimator, TransformerMixin):
    """Per-voxel standardization fitted on the training grids only."""

    def __init__(self, epsilon=1e-8, dtype="float64"):
        self.epsilon = epsilon
        self.dtype = dtype

    def fit(self, X, y=None):
        self.stats_ = fit_normalizer(X, self.epsilon)
        self.mean_ = self.stats_.mean
        self.std_ = self.stats_.std
        return self

    def transform(self, X):
        check_is_fitted(self, "stats_")
        return self.stats_.apply(X, dtype=np.dtype(self.dtype))


# --------------------------------------------------------------------------
# deduplication


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.count_nonzero(np.asarray(a) != np.asarray(b)))


def hamming_dedup(group_members: list[VoxelizedSegment], th_H: int) -> list[VoxelizedSegment]:
    """Greedy scan in ascending segment id; a member is dropped when it is
    closer than ``th_H`` cells to one already kept."""
    members = sorted(group_members, key=lambda v: v.segment_id)
    kept: list[VoxelizedSegment] = []
    kept_bits = []
    for v in members:
        if v.stage != "binary":
            raise PreprocessingError("hamming_dedup needs binary grids")
        bits = np.packbits(v.grid.astype(bool).ravel())
        if kept_bits:
            diff = np.unpackbits(np.bitwise_xor(np.stack(kept_bits), bits), axis=1).sum(axis=1)
            if (diff < th_H).any():
                continue
        kept.append(v)
        kept_bits.append(bits)
    return kept
