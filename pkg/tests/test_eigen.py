import numpy as np
import pytest

from segdesc.eigen import (
    FEATURE_NAMES, EigenvalueDescriptor, covariance, eigen_descriptor, eigenvalues, symmetric_eigenvalues_3x3,
)
from segdesc.exceptions import PreprocessingError
from segdesc.geometry import Segment, rotate_segment

F = {name: i for i, name in enumerate(FEATURE_NAMES)}


def test_collinear_points():
    pts = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
    ev = eigenvalues(pts)
    assert ev[1] == 0 and ev[2] == 0
    d = eigen_descriptor(pts)
    assert d[F["linearity"]] == 1 and d[F["planarity"]] == 0 and d[F["scattering"]] == 0


def test_sphere_is_isotropic():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(2000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    assert eigen_descriptor(v)[F["anisotropy"]] < 0.1


@pytest.mark.parametrize("seed", range(10))
def test_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    seg = Segment(0, rng.normal(size=(300, 3)) * [3, 1, 0.5], [10, 0, 0])
    turned = rotate_segment(seg, rng.uniform(-np.pi, np.pi), pivot=rng.normal(size=3) * 5)
    np.testing.assert_allclose(eigen_descriptor(turned), eigen_descriptor(seg), atol=1e-9)


@pytest.mark.parametrize("seed", range(30))
def test_eigenvalues_match_lapack(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 3))
    a = a @ a.T
    if seed % 5 == 0:
        a = 2.0 * np.eye(3) + 1e-14 * (a + a.T)  # nearly isotropic: fallback path
    np.testing.assert_allclose(symmetric_eigenvalues_3x3(a), np.linalg.eigvalsh(a)[::-1], atol=1e-10)


def test_features_are_scale_invariant(rng):
    pts = rng.normal(size=(100, 3)) * [2, 1, 0.3]
    np.testing.assert_allclose(eigen_descriptor(pts), eigen_descriptor(pts * 3), atol=1e-12)


def test_covariance_matches_numpy(rng):
    pts = rng.normal(size=(50, 3))
    np.testing.assert_allclose(covariance(pts), np.cov(pts.T, bias=True), atol=1e-14)


def test_degenerate_segments():
    with pytest.raises(PreprocessingError, match="degenerate-segment"):
        eigen_descriptor(np.zeros((3, 3)))
    with pytest.raises(PreprocessingError, match="degenerate-segment"):
        eigen_descriptor(np.ones((10, 3)))


def test_transformer(rng):
    segs = [Segment(i, rng.normal(size=(20, 3)), [9, 0, 0]) for i in range(3)]
    X = EigenvalueDescriptor().fit_transform(segs)
    assert X.shape == (3, len(FEATURE_NAMES))
    np.testing.assert_array_equal(X[1], eigen_descriptor(segs[1]))
