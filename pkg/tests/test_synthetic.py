import numpy as np
import pytest

from segdesc.io import format_segment
from segdesc.synthetic import (
    PRIMITIVES, SyntheticSpec, facing_mask, generate_synthetic, observer_positions, random_primitive,
    render_view, sample_surface, self_occluded,
)

EPS = 1e-9


def _box_interval(o, d, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        t1, t2 = (lo - o) / d, (hi - o) / d
    t1 = np.where(d == 0, np.where((o > lo) & (o < hi), -np.inf, np.inf), t1)
    t2 = np.where(d == 0, np.where((o > lo) & (o < hi), np.inf, -np.inf), t2)
    return np.minimum(t1, t2).max(), np.maximum(t1, t2).min()


def _cylinder_interval(o, d, r, h):
    a = d[0] ** 2 + d[1] ** 2
    b = 2 * (o[0] * d[0] + o[1] * d[1])
    c = o[0] ** 2 + o[1] ** 2 - r * r
    disc = b * b - 4 * a * c
    if a == 0 or disc <= 0:
        return np.inf, -np.inf
    q = np.sqrt(disc)
    enter, leave = (-b - q) / (2 * a), (-b + q) / (2 * a)
    if d[2] != 0:
        z0, z1 = sorted(((0 - o[2]) / d[2], (h - o[2]) / d[2]))
        enter, leave = max(enter, z0), min(leave, z1)
    return enter, leave


def ray_visible(prim, pts_world, observer):
    """A surface point is visible when the segment from the observer to it
    passes through no solid interior."""
    pts = prim.to_object(pts_world)
    o = prim.to_object(observer[None, :])[0]
    keep = np.ones(len(pts), dtype=bool)
    for k, p in enumerate(pts):
        d = p - o
        intervals = [_box_interval(o, d, lo, hi) for lo, hi in prim.boxes]
        intervals += [_cylinder_interval(o, d, r, h) for r, h in prim.cylinders]
        for enter, leave in intervals:
            if enter < 1 - EPS and min(leave, 1.0) > enter + EPS:
                keep[k] = False
                break
    return keep


def sector_retained(points, observer, fraction, u):
    d = points[:, :2] - observer[:2]
    ref = np.arctan2(d[:, 1].mean(), d[:, 0].mean())
    az = (np.arctan2(d[:, 1], d[:, 0]) - ref + np.pi) % (2 * np.pi) - np.pi
    lo, hi = az.min(), az.max()
    width = fraction * (hi - lo)
    start = lo + u * (hi - lo - width)
    return ~((az >= start) & (az < start + width))


@pytest.mark.parametrize("instance", range(20))
def test_occlusion_matches_ray_test(instance):
    spec = SyntheticSpec(occlusion=0.5)
    rng = np.random.default_rng([99, instance])
    prim = random_primitive(PRIMITIVES[instance % len(PRIMITIVES)], spec, rng, np.zeros(3))
    observer = observer_positions(prim, spec, rng, 1)[0]
    state = rng.bit_generator.state
    got = len(render_view(prim, observer, spec, rng))
    rng.bit_generator.state = state  # replay the same surface samples and sector draw
    pts, _ = sample_surface(prim, spec.density, rng)
    u = rng.uniform()
    seen = pts[ray_visible(prim, pts, observer)]
    want = int(sector_retained(seen, observer, spec.occlusion, u).sum())
    assert abs(got - want) <= 0.1 * want


def test_facing_mask_on_box_matches_ray_test_exactly():
    spec = SyntheticSpec()
    rng = np.random.default_rng(5)
    prim = random_primitive("box", spec, rng, np.zeros(3))
    obs = np.array([7.0, 2.0, 1.7])
    pts, nrm = sample_surface(prim, spec.density, rng)
    np.testing.assert_array_equal(facing_mask(pts, nrm, obs), ray_visible(prim, pts, obs))


def test_lshape_self_occlusion_matches_ray_test():
    spec = SyntheticSpec()
    rng = np.random.default_rng(8)
    for _ in range(5):
        prim = random_primitive("lshape", spec, rng, np.zeros(3))
        obs = observer_positions(prim, spec, rng, 1)[0]
        pts, nrm = sample_surface(prim, spec.density, rng)
        vis = facing_mask(pts, nrm, obs) & ~self_occluded(prim, pts, obs)
        np.testing.assert_array_equal(vis, ray_visible(prim, pts, obs))


def test_determinism_byte_identical():
    spec = SyntheticSpec(n_groups=15, seed=4)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert [format_segment(s) for s in a.segments] == [format_segment(s) for s in b.segments]
    c = generate_synthetic(SyntheticSpec(n_groups=15, seed=5))
    assert [format_segment(s) for s in a.segments] != [format_segment(s) for s in c.segments]


def test_groups_independent_of_group_count():
    small = generate_synthetic(SyntheticSpec(n_groups=5, seed=2))
    big = generate_synthetic(SyntheticSpec(n_groups=9, seed=2))
    assert [format_segment(s) for s in small.segments] == [format_segment(s) for s in big.segments
                                                           if s.group_id < 5]


def test_counts_and_dropped_views():
    spec = SyntheticSpec(n_groups=20, views_per_group=5, min_points=400, seed=1)
    ds = generate_synthetic(spec)
    assert len(ds.segments) + len(ds.dropped_views) == 20 * 5
    assert len(ds.segments) <= 20 * 5 and len(ds.dropped_views) > 0
    assert len({s.segment_id for s in ds.segments}) == len(ds.segments)
    for g in ds.groups:
        assert all(sid // 5 == g.group_id for sid in g.member_ids)
    full = generate_synthetic(SyntheticSpec(n_groups=20, views_per_group=5, seed=1))
    assert len(full.groups) == 20


def test_views_face_the_observer():
    ds = generate_synthetic(SyntheticSpec(n_groups=4, noise=0.0, occlusion=0.0))
    for seg in ds.segments:
        d = np.linalg.norm(seg.points[:, :2] - seg.observer_position[:2], axis=1)
        far_side = d > np.median(d) + 3.0
        assert not far_side.any()


@pytest.mark.parametrize("field,value", [
    ("n_groups", 0), ("views_per_group", 0), ("occlusion", 0.7), ("size_range", (2.0, 1.0)),
    ("noise", -1.0), ("density", 0.0), ("primitives", ("sphere",)), ("proportion_jitter", 1.0),
])
def test_invalid_spec_names_field(field, value):
    with pytest.raises(ValueError, match=field):
        SyntheticSpec(**{field: value})
