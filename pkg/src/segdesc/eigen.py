"""Eigenvalue shape features of a segment's point covariance."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import PreprocessingError
from .geometry import Segment

FEATURE_NAMES = (
    "linearity", "planarity", "scattering", "omnivariance", "anisotropy", "eigenentropy",
    "change_of_curvature",
)


def covariance(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    d = pts - pts.mean(axis=0)
    return d.T @ d / len(pts)


def _jacobi_eigenvalues(a, tol=1e-12, max_sweeps=50):
    a = np.array(a, dtype=np.float64)
    for _ in range(max_sweeps):
        off = np.sqrt(a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2)
        if off <= tol * max(1.0, np.abs(np.diag(a)).max()):
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            if a[p, q] == 0.0:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
            t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0 else 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            r = np.eye(3)
            r[p, p] = r[q, q] = c
            r[p, q] = s
            r[q, p] = -s
            a = r.T @ a @ r
    return np.diag(a).copy()


def symmetric_eigenvalues_3x3(a) -> np.ndarray:
    """Eigenvalues of a symmetric 3x3 matrix, descending.

    Closed-form trigonometric solution; falls back to cyclic Jacobi when the
    matrix is close to a multiple of the identity, where the closed form
    loses precision.
    """
    a = np.asarray(a, dtype=np.float64)
    p1 = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
    q = np.trace(a) / 3.0
    p2 = (a[0, 0] - q) ** 2 + (a[1, 1] - q) ** 2 + (a[2, 2] - q) ** 2 + 2.0 * p1
    p = np.sqrt(p2 / 6.0)
    if p <= 1e-12 * max(1.0, abs(q)):
        ev = _jacobi_eigenvalues(a)
    else:
        b = (a - q * np.eye(3)) / p
        r = np.clip(np.linalg.det(b) / 2.0, -1.0, 1.0)
        phi = np.arccos(r) / 3.0
        e1 = q + 2.0 * p * np.cos(phi)
        e3 = q + 2.0 * p * np.cos(phi + 2.0 * np.pi / 3.0)
        ev = np.array([e1, 3.0 * q - e1 - e3, e3])
    return np.sort(ev)[::-1]


def eigenvalues(points) -> np.ndarray:
    """Covariance eigenvalues, descending. Values below ``1e-12 * lambda_1``
    are rounding noise and set to zero."""
    ev = symmetric_eigenvalues_3x3(covariance(points))
    ev[ev < 1e-12 * max(ev[0], 0.0)] = 0.0
    return np.maximum(ev, 0.0)


def eigen_descriptor(segment: Segment | np.ndarray) -> np.ndarray:
    pts = segment.points if isinstance(segment, Segment) else np.asarray(segment, dtype=np.float64)
    if len(pts) < 4:
        raise PreprocessingError("degenerate-segment: need at least 4 points")
    ev = eigenvalues(pts)
    total = ev.sum()
    if total <= 0:
        raise PreprocessingError("degenerate-segment: zero total variance")
    l1, l2, l3 = ev / total
    return np.array([
        (l1 - l2) / l1,
        (l2 - l3) / l1,
        l3 / l1,
        np.cbrt(l1 * l2 * l3),
        (l1 - l3) / l1,
        -sum(l * np.log(l + 1e-12) for l in (l1, l2, l3)),
        l3 / (l1 + l2 + l3),
    ])


class EigenvalueDescriptor(BaseEstimator, TransformerMixin):
    """Seven eigenvalue features per segment (see ``FEATURE_NAMES``)."""

    def fit(self, segments, y=None):
        return self

    def transform(self, segments):
        return np.array([eigen_descriptor(s) for s in segments]).reshape(-1, len(FEATURE_NAMES))
