"""Synthetic scans of simple primitives standing in for LiDAR segments.

Each group is one primitive instance placed along a straight drive. Every view
samples the primitive surface, keeps the observer-facing part (normal test),
cuts away a contiguous angular sector as seen from the observer to mimic
occlusion, and adds Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Segment, SegmentGroup, rotation_z

PRIMITIVES = ("box", "cylinder", "lshape", "wall")
SENSOR_HEIGHT = 1.7
MAX_DRAWS = 20  # redraws for a group whose every view is below min_points


@dataclass
class SyntheticSpec:
    n_groups: int = 300
    views_per_group: int = 8
    primitives: tuple[str, ...] = PRIMITIVES
    size_range: tuple[float, float] = (0.6, 3.0)
    height_range: tuple[float, float] = (0.3, 3.4)
    proportion_jitter: float = 0.15
    occlusion: float = 0.3
    view_angle_range: tuple[float, float] = (-np.pi / 6, np.pi / 6)
    distance_range: tuple[float, float] = (4.0, 12.0)
    density: float = 60.0
    noise: float = 0.02
    spacing: float = 10.0
    min_points: int = 30
    seed: int = 0

    def __post_init__(self):
        self.primitives = tuple(self.primitives)
        checks = {
            "n_groups": self.n_groups >= 1,
            "views_per_group": self.views_per_group >= 1,
            "primitives": bool(self.primitives) and set(self.primitives) <= set(PRIMITIVES),
            "size_range": 0 < self.size_range[0] <= self.size_range[1],
            "height_range": 0 < self.height_range[0] <= self.height_range[1],
            "proportion_jitter": 0.0 <= self.proportion_jitter < 1.0,
            "occlusion": 0.0 <= self.occlusion <= 0.6,
            "view_angle_range": self.view_angle_range[0] <= self.view_angle_range[1],
            "distance_range": 0 < self.distance_range[0] <= self.distance_range[1],
            "density": self.density > 0,
            "noise": self.noise >= 0,
            "spacing": self.spacing > 0,
            "min_points": self.min_points >= 1,
        }
        bad = [k for k, ok in checks.items() if not ok]
        if bad:
            raise ValueError(f"invalid synthetic spec field: {bad[0]}")


@dataclass
class Primitive:
    """Axis-aligned boxes / upright cylinders in an object frame, placed in the
    world by a yaw and a ground position."""

    kind: str
    boxes: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)  # (lo, hi) corners
    cylinders: list[tuple[float, float]] = field(default_factory=list)  # (radius, height) at origin
    yaw: float = 0.0
    position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def to_world(self, pts):
        return pts @ rotation_z(self.yaw).T + self.position

    def normals_to_world(self, nrm):
        return nrm @ rotation_z(self.yaw).T

    def to_object(self, pts):
        return (pts - self.position) @ rotation_z(self.yaw)


# class-typical proportions (width, depth, height) relative to the drawn scale
TEMPLATES = {
    "box": (1.0, 0.6, 0.7),
    "cylinder": (0.2, 0.2, 1.0),  # radius, radius, height
    "wall": (2.0, 0.1, 0.8),
    "lshape": (1.0, 1.0, 0.8),
}


def random_primitive(kind, spec: SyntheticSpec, rng, position) -> Primitive:
    """Scale drawn from ``size_range``; each dimension is the class template
    times the scale times a jitter in ``1 +- proportion_jitter``. Heights are
    clipped to ``height_range``."""
    if kind not in TEMPLATES:
        raise ValueError(f"unknown primitive {kind!r}")
    scale = rng.uniform(*spec.size_range)
    jitter = rng.uniform(1 - spec.proportion_jitter, 1 + spec.proportion_jitter, size=3)
    w, d, h = np.array(TEMPLATES[kind]) * scale * jitter
    h = float(np.clip(h, *spec.height_range))
    prim = Primitive(kind, yaw=rng.uniform(0, 2 * np.pi), position=np.asarray(position, dtype=np.float64))
    if kind == "box":
        prim.boxes.append((np.array([-w / 2, -d / 2, 0.0]), np.array([w / 2, d / 2, h])))
    elif kind == "cylinder":
        prim.cylinders.append((w, h))
    elif kind == "wall":
        prim.boxes.append((np.array([-w / 2, -d / 2, 0.0]), np.array([w / 2, d / 2, h])))
    else:
        t = max(0.2, 0.25 * d)
        prim.boxes.append((np.array([-w / 2, -d / 2, 0.0]), np.array([w / 2, -d / 2 + t, h])))
        prim.boxes.append((np.array([-w / 2, -d / 2, 0.0]), np.array([-w / 2 + t, d / 2, h])))
    return prim


def _box_surface(lo, hi, density, rng):
    """Sample the five faces of a box resting on the ground (no bottom)."""
    pts, nrm = [], []
    size = hi - lo
    faces = [  # (fixed axis, side, normal sign)
        (0, lo[0], -1.0), (0, hi[0], 1.0), (1, lo[1], -1.0), (1, hi[1], 1.0), (2, hi[2], 1.0),
    ]
    for axis, value, sign in faces:
        free = [i for i in range(3) if i != axis]
        area = size[free[0]] * size[free[1]]
        n = rng.poisson(density * area)
        p = np.empty((n, 3))
        p[:, axis] = value
        for i in free:
            p[:, i] = rng.uniform(lo[i], hi[i], size=n)
        nv = np.zeros((n, 3))
        nv[:, axis] = sign
        pts.append(p)
        nrm.append(nv)
    return np.vstack(pts), np.vstack(nrm)


def _cylinder_surface(r, h, density, rng):
    n_side = rng.poisson(density * 2 * np.pi * r * h)
    phi = rng.uniform(0, 2 * np.pi, size=n_side)
    side = np.column_stack([r * np.cos(phi), r * np.sin(phi), rng.uniform(0, h, size=n_side)])
    side_n = np.column_stack([np.cos(phi), np.sin(phi), np.zeros(n_side)])
    n_top = rng.poisson(density * np.pi * r * r)
    rad = r * np.sqrt(rng.uniform(0, 1, size=n_top))
    phi = rng.uniform(0, 2 * np.pi, size=n_top)
    top = np.column_stack([rad * np.cos(phi), rad * np.sin(phi), np.full(n_top, h)])
    top_n = np.tile([0.0, 0.0, 1.0], (n_top, 1))
    return np.vstack([side, top]), np.vstack([side_n, top_n])


def inside_solid(prim: Primitive, pts_obj, margin=1e-9):
    """Points (object frame) strictly inside any of the primitive's solids."""
    inside = np.zeros(len(pts_obj), dtype=bool)
    for lo, hi in prim.boxes:
        inside |= ((pts_obj > lo + margin) & (pts_obj < hi - margin)).all(axis=1)
    for r, h in prim.cylinders:
        inside |= (np.hypot(pts_obj[:, 0], pts_obj[:, 1]) < r - margin) & (pts_obj[:, 2] > margin) & (
            pts_obj[:, 2] < h - margin
        )
    return inside


def sample_surface(prim: Primitive, density: float, rng):
    """World-frame surface samples and outward normals. Faces buried inside
    another part of the primitive (the L-shape's joint) are removed."""
    parts = [_box_surface(lo, hi, density, rng) for lo, hi in prim.boxes]
    parts += [_cylinder_surface(r, h, density, rng) for r, h in prim.cylinders]
    pts = np.vstack([p for p, _ in parts])
    nrm = np.vstack([n for _, n in parts])
    keep = ~inside_solid(prim, pts)
    return prim.to_world(pts[keep]), prim.normals_to_world(nrm[keep])


def facing_mask(points, normals, observer):
    """Hidden-surface removal by the normal test."""
    return np.einsum("ij,ij->i", normals, observer - points) > 0


def self_occluded(prim: Primitive, points, observer, eps=1e-9):
    """Points whose line of sight to ``observer`` crosses the interior of one
    of the primitive's boxes (slab test). Only needed for non-convex shapes,
    where the normal test alone keeps faces hidden behind another part."""
    pts = prim.to_object(points)
    o = prim.to_object(np.asarray(observer, dtype=np.float64)[None, :])[0]
    d = pts - o
    hidden = np.zeros(len(pts), dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for lo, hi in prim.boxes:
            t1, t2 = (lo - o) / d, (hi - o) / d
            inside = (o > lo) & (o < hi)
            t1 = np.where(d == 0, np.where(inside, -np.inf, np.inf), t1)
            t2 = np.where(d == 0, np.where(inside, np.inf, -np.inf), t2)
            enter = np.minimum(t1, t2).max(axis=1)
            leave = np.minimum(np.maximum(t1, t2).min(axis=1), 1.0)
            hidden |= (enter < 1.0 - eps) & (leave > enter + eps)
    return hidden


def occlusion_mask(points, observer, fraction, u):
    """Remove a contiguous sector of azimuth (as seen from ``observer``) of
    width ``fraction`` times the angular extent of ``points``; ``u`` in [0, 1]
    places the sector within that extent. Returns the mask of retained points."""
    if fraction <= 0 or len(points) == 0:
        return np.ones(len(points), dtype=bool)
    d = points[:, :2] - observer[:2]
    mean_dir = np.arctan2(d[:, 1].mean(), d[:, 0].mean())
    az = np.angle(np.exp(1j * (np.arctan2(d[:, 1], d[:, 0]) - mean_dir)))
    lo, hi = az.min(), az.max()
    width = fraction * (hi - lo)
    start = lo + u * (hi - lo - width)
    return ~((az >= start) & (az < start + width))


def observer_positions(prim: Primitive, spec: SyntheticSpec, rng, n):
    base = rng.uniform(0, 2 * np.pi)
    az = base + rng.uniform(*spec.view_angle_range, size=n)
    dist = rng.uniform(*spec.distance_range, size=n)
    obs = np.column_stack([dist * np.cos(az), dist * np.sin(az), np.full(n, SENSOR_HEIGHT)])
    return obs + prim.position * np.array([1.0, 1.0, 0.0])


@dataclass
class SyntheticDataset:
    segments: list[Segment]
    groups: list[SegmentGroup]
    primitives: list[Primitive]
    dropped_views: list[tuple[int, int]]  # (group, view) with too few points


def render_view(prim, observer, spec: SyntheticSpec, rng):
    pts, nrm = sample_surface(prim, spec.density, rng)
    vis = pts[facing_mask(pts, nrm, observer)]
    if len(prim.boxes) + len(prim.cylinders) > 1:
        vis = vis[~self_occluded(prim, vis, observer)]
    vis = vis[occlusion_mask(vis, observer, spec.occlusion, rng.uniform())]
    return vis + rng.normal(0.0, spec.noise, size=vis.shape) if spec.noise > 0 else vis


def generate_group(g: int, spec: SyntheticSpec):
    """Everything for group ``g``, drawn from its own derived seed so groups can
    be generated independently and in any order."""
    rng = np.random.default_rng([spec.seed, g])
    for _ in range(MAX_DRAWS):
        kind = spec.primitives[rng.integers(len(spec.primitives))]
        position = np.array([g * spec.spacing, rng.uniform(-2.0, 2.0), 0.0])
        prim = random_primitive(kind, spec, rng, position)
        observers = observer_positions(prim, spec, rng, spec.views_per_group)
        segments, dropped = [], []
        for v in range(spec.views_per_group):
            pts = render_view(prim, observers[v], spec, rng)
            if len(pts) < spec.min_points:
                dropped.append((g, v))
                continue
            segments.append(
                Segment(
                    segment_id=g * spec.views_per_group + v, points=pts, observer_position=observers[v],
                    frame_index=v, run_id="synthetic", group_id=g,
                )
            )
        if segments:  # otherwise the object was too small to see at all: draw another
            break
    return prim, segments, dropped


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    segments, groups, prims, dropped = [], [], [], []
    for g in range(spec.n_groups):
        prim, segs, drop = generate_group(g, spec)
        prims.append(prim)
        dropped += drop
        if segs:
            groups.append(SegmentGroup(g, [s.segment_id for s in segs]))
            segments += segs
    return SyntheticDataset(segments, groups, prims, dropped)
