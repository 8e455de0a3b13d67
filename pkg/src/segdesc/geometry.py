"""Segment data types and elementary rigid geometry."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass
class Segment:
    """A cluster of 3D points together with the sensor origin it was seen from.

    ``points`` is an ``(n, 3)`` float64 array in meters; ``observer_position``
    lives in the same frame.
    """

    segment_id: int
    points: np.ndarray
    observer_position: np.ndarray
    frame_index: int = 0
    run_id: str = "run0"
    group_id: int = -1

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.observer_position = np.asarray(self.observer_position, dtype=np.float64).reshape(3)
        if self.points.shape[0] == 0:
            raise ValueError(f"segment {self.segment_id} has no points")
        if not (np.isfinite(self.points).all() and np.isfinite(self.observer_position).all()):
            raise ValueError(f"segment {self.segment_id} has non-finite coordinates")
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def copy(self, **changes) -> "Segment":
        changes.setdefault("points", self.points.copy())
        changes.setdefault("observer_position", self.observer_position.copy())
        return replace(self, **changes)


@dataclass
class SegmentGroup:
    group_id: int
    member_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.member_ids:
            raise ValueError(f"group {self.group_id} is empty")


def centroid(segment: Segment | np.ndarray) -> np.ndarray:
    """Arithmetic mean of the segment's points."""
    pts = segment.points if isinstance(segment, Segment) else np.asarray(segment, dtype=np.float64)
    return pts.mean(axis=0)


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_about_z(points: np.ndarray, angle: float, pivot=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Rotate points by ``angle`` radians about the vertical axis through ``pivot``."""
    pts = np.asarray(points, dtype=np.float64)
    pivot = np.asarray(pivot, dtype=np.float64)
    return (pts - pivot) @ rotation_z(angle).T + pivot


def rotate_segment(segment: Segment, angle: float, pivot=None) -> Segment:
    """Rotate points and observer jointly. Pivot defaults to the centroid."""
    if pivot is None:
        pivot = centroid(segment)
    return segment.copy(
        points=rotate_about_z(segment.points, angle, pivot),
        observer_position=rotate_about_z(segment.observer_position, angle, pivot),
    )
