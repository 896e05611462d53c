"""Elliptical data boundary and the ray distance used as a drift regularizer.

The ellipse is centred on the data mean with semi-axes along the principal
directions. A point's distance is measured along the ray from the centre:
if ``x' = mean + y (x - mean)`` lies on the ellipse then the distance is
``(1 - y) |x - mean|``. Points inside the ellipse cost nothing.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sde import SampleBatch

SV_FLOOR_REL = 1e-6
_CENTER_EPS = 1e-24


class DegenerateDataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class EllipseBoundary:
    mean: np.ndarray
    sv: np.ndarray  # semi-axis lengths, descending
    axes: np.ndarray  # (D, D), row d is the unit vector of axis d

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "singular_values": self.sv.tolist(), "axes": self.axes.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "EllipseBoundary":
        return cls(
            np.asarray(d["mean"], dtype=float), np.asarray(d["singular_values"], dtype=float), np.asarray(d["axes"], dtype=float)
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "EllipseBoundary":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_ellipse(data, scale: float = 3.0) -> EllipseBoundary:
    """Fit the ellipse from the SVD of the centred data.

    Singular values are converted to standard deviations (divided by
    ``sqrt(N - 1)``) and multiplied by ``scale``. Axes shorter than
    ``1e-6`` times the longest are clamped with a warning.
    """
    x = data.points if isinstance(data, SampleBatch) else np.atleast_2d(np.asarray(data, dtype=float))
    n, d = x.shape
    if n < d + 1:
        raise ValueError(f"need at least D+1={d + 1} points to fit a {d}-D ellipse, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("data contains non-finite entries")
    if scale <= 0:
        raise ValueError("scale must be positive")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    sv = s / np.sqrt(n - 1) * scale
    if sv[0] <= 0:
        raise ValueError("all data points coincide; no ellipse can be fitted")
    floor = SV_FLOOR_REL * sv[0]
    if np.any(sv < floor):
        warnings.warn(
            f"data is rank deficient; {int(np.sum(sv < floor))} semi-axes clamped to {floor:.3g}",
            DegenerateDataWarning,
            stacklevel=2,
        )
        sv = np.maximum(sv, floor)
    return EllipseBoundary(mean, sv, vt)


def _radial(points: np.ndarray, e: EllipseBoundary):
    diff = points - e.mean
    proj = diff @ e.axes.T
    q = np.sum((proj / e.sv) ** 2, axis=-1)
    r = np.linalg.norm(diff, axis=-1)
    return diff, proj, q, r


def boundary_distances(points, e: EllipseBoundary) -> np.ndarray:
    """Vectorised :func:`boundary_distance` over ``(N, D)`` points."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    _, _, q, r = _radial(points, e)
    out = np.zeros(points.shape[0])
    outside = q > 1.0
    out[outside] = (1.0 - 1.0 / np.sqrt(q[outside])) * r[outside]
    return out


def boundary_distance(x, e: EllipseBoundary) -> float:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("query point is not finite")
    _, _, q, r = _radial(x[None, :], e)
    q, r = float(q[0]), float(r[0])
    if q <= _CENTER_EPS:
        return 0.0
    return max(0.0, (1.0 - 1.0 / np.sqrt(q)) * r)


def batch_penalty(batch, e: EllipseBoundary) -> float:
    points = batch.points if isinstance(batch, SampleBatch) else batch
    return float(np.sum(boundary_distances(points, e)))


def penalty_grad(points, e: EllipseBoundary) -> np.ndarray:
    """Subgradient of :func:`batch_penalty` w.r.t. each point (zero inside)."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    diff, proj, q, r = _radial(points, e)
    grad = np.zeros_like(points)
    out = q > 1.0
    if out.any():
        qo, ro = q[out], r[out]
        radial = (1.0 - qo**-0.5)[:, None] * diff[out] / ro[:, None]
        dq = (proj[out] / e.sv**2) @ e.axes  # half of dq/dx
        grad[out] = radial + (ro * qo**-1.5)[:, None] * dq
    return grad
