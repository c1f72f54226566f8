"""Finite-support measures over quantization grids.

Two representations are used throughout the library:

* :class:`DiscreteMeasure` -- dense weights over one grid (1-d array) or over
  a product grid of (hidden, observation) pairs (2-d array).  These carry the
  single-time marginals that drive the production dynamic program.
* :class:`PathMeasure` -- sparse weights over grid-valued index paths.  Only
  used by the desk-scale exact oracle, so it stays dictionary-backed.

All measures are value-semantic and immutable after construction; operations
return new instances.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NORMALIZATION_TOL = 1e-12
# Drift below this is renormalized silently (Monte-Carlo kernel rows introduce
# benign drift); anything larger is a hard error.
RENORMALIZE_DRIFT = 1e-9
# Weights more negative than this are rejected; tiny float undershoot is clipped.
NEGATIVE_WEIGHT_TOL = 1e-15


class DiscreteMeasure:
    """Nonnegative weights over a finite grid or product grid.

    Parameters
    ----------
    weights : array_like
        1-d (single grid) or 2-d (product grid, indexed by
        ``(hidden index, observation index)``).
    normalized : bool
        When True the weights must sum to one within ``RENORMALIZE_DRIFT``
        and are renormalized to machine accuracy.  When False the instance
        keeps its total mass in ``mass``.
    """

    __slots__ = ("weights", "normalized", "mass")

    def __init__(self, weights, normalized: bool = True):
        w = np.array(weights, dtype=float)
        if w.ndim not in (1, 2):
            raise ValueError("weights must be a 1-d or 2-d array")
        if w.min(initial=0.0) < -NEGATIVE_WEIGHT_TOL:
            raise ValueError("negative weight in measure: %r" % w.min())
        w = np.clip(w, 0.0, None)
        total = float(w.sum())
        if normalized:
            if abs(total - 1.0) > RENORMALIZE_DRIFT:
                raise ValueError(
                    "weights sum to %.17g, beyond renormalization drift" % total
                )
            if total <= 0.0:
                raise ValueError("cannot normalize a zero measure")
            w = w / total
            total = 1.0
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "normalized", bool(normalized))
        object.__setattr__(self, "mass", total)

    def __setattr__(self, name, value):
        raise AttributeError("DiscreteMeasure is immutable")

    @property
    def shape(self):
        return self.weights.shape

    def support(self):
        """Indices carrying positive weight, as a list of ints or pairs."""
        idx = np.argwhere(self.weights > 0.0)
        if self.weights.ndim == 1:
            return [int(i) for (i,) in idx]
        return [(int(i), int(j)) for i, j in idx]

    def key(self) -> bytes:
        """Content key for memoization (weights rounded to 12 decimals)."""
        return np.round(self.weights, 12).tobytes() + bytes(self.weights.shape)

    def to_json_dict(self) -> dict:
        sup = self.support()
        w = self.weights
        return {
            "shape": list(w.shape),
            "support": [list(s) if isinstance(s, tuple) else s for s in sup],
            "weights": [float(w[s]) for s in sup],
            "normalized": self.normalized,
            "mass": self.mass,
        }

    def __eq__(self, other):
        return (
            isinstance(other, DiscreteMeasure)
            and self.weights.shape == other.weights.shape
            and np.array_equal(self.weights, other.weights)
            and self.normalized == other.normalized
        )

    def __repr__(self):
        return "DiscreteMeasure(shape=%s, mass=%.6g, normalized=%s)" % (
            self.weights.shape,
            self.mass,
            self.normalized,
        )


class PathMeasure:
    """Sparse measure over index paths ``((i_0, j_0), ..., (i_n, j_n))``.

    ``n_hidden`` and ``n_obs`` record the sizes of the hidden and observation
    grids so marginals know their shape.  Weights must be nonnegative and sum
    to one within tolerance; every path must have length ``horizon + 1``.
    """

    __slots__ = ("horizon", "n_hidden", "n_obs", "entries")

    def __init__(self, horizon: int, n_hidden: int, n_obs: int, entries: dict):
        clean = {}
        total = 0.0
        for path, w in entries.items():
            w = float(w)
            if w < -NEGATIVE_WEIGHT_TOL:
                raise ValueError("negative path weight %r" % w)
            w = max(w, 0.0)
            path = tuple((int(i), int(j)) for i, j in path)
            if len(path) != horizon + 1:
                raise ValueError(
                    "path length %d, expected %d" % (len(path), horizon + 1)
                )
            for i, j in path:
                if not (0 <= i < n_hidden and 0 <= j < n_obs):
                    raise ValueError("path index out of grid range")
            clean[path] = clean.get(path, 0.0) + w
            total += w
        if abs(total - 1.0) > RENORMALIZE_DRIFT:
            raise ValueError("path weights sum to %.17g" % total)
        clean = {p: w / total for p, w in clean.items()}
        object.__setattr__(self, "horizon", int(horizon))
        object.__setattr__(self, "n_hidden", int(n_hidden))
        object.__setattr__(self, "n_obs", int(n_obs))
        object.__setattr__(self, "entries", clean)

    def __setattr__(self, name, value):
        raise AttributeError("PathMeasure is immutable")

    def to_json_dict(self) -> dict:
        paths = sorted(self.entries)
        return {
            "horizon": self.horizon,
            "n_hidden": self.n_hidden,
            "n_obs": self.n_obs,
            "support": [[list(pair) for pair in path] for path in paths],
            "weights": [self.entries[path] for path in paths],
        }

    def __repr__(self):
        return "PathMeasure(horizon=%d, paths=%d)" % (self.horizon, len(self.entries))


@dataclass(frozen=True)
class MomentPair:
    """First and second moments of a measure over stacked (x, y) vectors.

    ``mean`` has the stacked dimension ``p_x + p_y``; ``quad`` is the raw
    second-moment matrix (not the covariance).  ``quad`` must be symmetric
    within 1e-12 and ``quad - mean mean^T`` positive semidefinite within a
    1e-10 eigenvalue floor.
    """

    mean: np.ndarray
    quad: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        quad = np.asarray(self.quad, dtype=float)
        if quad.shape != (mean.size, mean.size):
            raise ValueError("quad shape does not match mean dimension")
        if np.max(np.abs(quad - quad.T), initial=0.0) > 1e-12:
            raise ValueError("quad is not symmetric")
        cov = quad - np.outer(mean, mean)
        if np.linalg.eigvalsh((cov + cov.T) / 2.0).min() < -1e-10:
            raise ValueError("quad - mean mean^T is not positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "quad", quad)

    def cov(self) -> np.ndarray:
        return self.quad - np.outer(self.mean, self.mean)


def marginal(measure: PathMeasure, time_index: int) -> DiscreteMeasure:
    """Single-time marginal of a path measure, over (hidden, obs) pairs."""
    if not 0 <= time_index <= measure.horizon:
        raise IndexError(
            "time index %d outside horizon %d" % (time_index, measure.horizon)
        )
    w = np.zeros((measure.n_hidden, measure.n_obs))
    for path, weight in measure.entries.items():
        i, j = path[time_index]
        w[i, j] += weight
    return DiscreteMeasure(w, normalized=True)


def first_marginal(measure: DiscreteMeasure) -> DiscreteMeasure:
    """Hidden-coordinate marginal of a pair measure (sum over observations)."""
    if measure.weights.ndim != 2:
        raise ValueError("first_marginal expects a pair measure")
    return DiscreteMeasure(measure.weights.sum(axis=1), normalized=measure.normalized)


def second_marginal(measure: DiscreteMeasure) -> DiscreteMeasure:
    """Observation-coordinate marginal of a pair measure."""
    if measure.weights.ndim != 2:
        raise ValueError("second_marginal expects a pair measure")
    return DiscreteMeasure(measure.weights.sum(axis=0), normalized=measure.normalized)


def _as_points(centers, n: int, what: str) -> np.ndarray:
    pts = np.asarray(centers, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] < n:
        raise ValueError("missing %s center: %d supplied, %d needed" % (what, pts.shape[0], n))
    return pts


def moments(measure: DiscreteMeasure, centers_x, centers_y) -> MomentPair:
    """Stacked mean and raw second moment of a pair measure.

    The quadratic functional ``integral of z^T L z`` for any symmetric L is
    recovered as ``trace(L @ quad)``.
    """
    w = measure.weights
    if w.ndim != 2:
        raise ValueError("moments expects a pair measure")
    xs = _as_points(centers_x, w.shape[0], "hidden")[: w.shape[0]]
    ys = _as_points(centers_y, w.shape[1], "observation")[: w.shape[1]]
    wx = w.sum(axis=1)
    wy = w.sum(axis=0)
    mean = np.concatenate([wx @ xs, wy @ ys])
    quad_xx = xs.T @ (wx[:, None] * xs)
    quad_yy = ys.T @ (wy[:, None] * ys)
    quad_xy = xs.T @ w @ ys
    quad = np.block([[quad_xx, quad_xy], [quad_xy.T, quad_yy]])
    quad = (quad + quad.T) / 2.0
    return MomentPair(mean=mean, quad=quad)
