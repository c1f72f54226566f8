"""Optimal quantization grids, projections, and quantized transition kernels.

The hidden and observation spaces are discretized on finite center sets with
nearest-center (Voronoi) projection.  Grids come from Lloyd iteration on the
target law; transition kernels between grid points are estimated by seeded
Monte-Carlo draws of the model's step maps; pushed one-step pair measures are
projected onto a finite measure codebook so the measure-space dynamic program
stays finite.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math

import numpy as np
from scipy.special import ndtr, ndtri

from .measures import DiscreteMeasure

log = logging.getLogger(__name__)

# Deduplication tolerance for reachable marginal matrices (entrywise).
CODEBOOK_DEDUP_TOL = 1e-9
CODEBOOK_SUM_DRIFT = 1e-9
DEFAULT_N_MC = 10_000
# RNG stream tags so every Monte-Carlo table has its own reproducible stream.
_STREAM_HIDDEN = 0
_STREAM_OBS = 1
_STREAM_INITIAL = 2
_STREAM_LLOYD = 3


class Grid:
    """Finite center set in d dimensions with nearest-center projection."""

    __slots__ = ("centers",)

    def __init__(self, centers):
        pts = np.array(centers, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("grid needs at least one center")
        diff = pts[:, None, :] - pts[None, :, :]
        dist2 = (diff**2).sum(axis=-1)
        np.fill_diagonal(dist2, np.inf)
        if dist2.min() == 0.0:
            raise ValueError("grid centers must be pairwise distinct")
        pts.flags.writeable = False
        object.__setattr__(self, "centers", pts)

    def __setattr__(self, name, value):
        raise AttributeError("Grid is immutable")

    @property
    def size(self) -> int:
        return self.centers.shape[0]

    @property
    def dimension(self) -> int:
        return self.centers.shape[1]

    def scaled(self, mean, std) -> "Grid":
        """Affine rescale of the centers: ``mean + std * center`` per axis."""
        mean = np.broadcast_to(np.asarray(mean, dtype=float), (self.dimension,))
        std = np.broadcast_to(np.asarray(std, dtype=float), (self.dimension,))
        return Grid(mean[None, :] + std[None, :] * self.centers)

    def to_json_dict(self) -> dict:
        return {"centers": self.centers.tolist()}


def project(grid: Grid, x) -> int:
    """Index of the nearest center in Euclidean norm; ties pick the smallest."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d2 = ((grid.centers - x[None, :]) ** 2).sum(axis=1)
    return int(np.argmin(d2))


def project_batch(grid: Grid, xs: np.ndarray) -> np.ndarray:
    """Vectorized nearest-center projection of (n, d) points."""
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[:, None]
    d2 = ((xs[:, None, :] - grid.centers[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1)


def distortion(grid: Grid, points: np.ndarray, weights=None) -> float:
    """Mean squared distance from weighted points to their nearest center."""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    d2 = ((points[:, None, :] - grid.centers[None, :, :]) ** 2).sum(axis=-1)
    nearest = d2.min(axis=1)
    if weights is None:
        return float(nearest.mean())
    weights = np.asarray(weights, dtype=float)
    return float((weights * nearest).sum() / weights.sum())


def _gaussian_quantile_cloud(dim: int, per_axis: int):
    """Tensor-product quantile-midpoint cloud for N(0, I_dim).

    Midpoint nodes of equal-probability strata per axis with uniform weights:
    node spacing near the mode is ~1/(per_axis * 0.4), fine enough that the
    discrete Lloyd map has no spurious stalls at the sizes used here (a
    Gauss-Hermite rule of practical degree leaves gaps wider than the Lloyd
    tolerance).
    """
    nodes = ndtri((np.arange(per_axis) + 0.5) / per_axis)
    pts = nodes[:, None]
    for _ in range(dim - 1):
        m = pts.shape[0]
        pts = np.concatenate(
            [np.repeat(pts, per_axis, axis=0), np.tile(nodes, m)[:, None]], axis=1
        )
    wts = np.full(pts.shape[0], 1.0 / pts.shape[0])
    return pts, wts


def _exact_gaussian_lloyd_1d(n_centers: int, max_iters: int, tol: float):
    """Lloyd fixed point on the scalar standard normal with exact cell stats.

    Cells of sorted 1-d centers are intervals; mass and conditional mean have
    closed forms through the normal cdf/pdf, so the iteration converges to the
    continuous fixed point instead of a quadrature artifact.
    """
    qs = (np.arange(n_centers) + 0.5) / n_centers
    centers = ndtri(qs)
    phi = lambda t: np.exp(-0.5 * t * t) / math.sqrt(2.0 * math.pi)
    for _ in range(max_iters):
        edges = (centers[1:] + centers[:-1]) / 2.0
        lo = np.concatenate([[-np.inf], edges])
        hi = np.concatenate([edges, [np.inf]])
        mass = ndtr(hi) - ndtr(lo)
        if np.any(mass <= 0):
            raise RuntimeError("empty cell in exact 1-d Lloyd iteration")
        phi_lo = np.where(np.isinf(lo), 0.0, phi(lo))
        phi_hi = np.where(np.isinf(hi), 0.0, phi(hi))
        new = (phi_lo - phi_hi) / mass
        shift = np.max(np.abs(new - centers))
        centers = new
        if shift < tol:
            break
    return centers


def lloyd(
    dim: int,
    n_centers: int,
    sampler=None,
    n_samples: int = 2**14,
    max_iters: int = 500,
    tol: float = 1e-10,
    rng=None,
    quantile_per_axis: int = 256,
) -> Grid:
    """Lloyd / k-means quantizer of a target law.

    Default target is the standard Gaussian: exact interval statistics in one
    dimension, a deterministic quantile-midpoint tensor cloud
    (``quantile_per_axis`` strata per axis) for dim == 2, and a seeded
    Monte-Carlo cloud above.  A ``sampler`` callable
    ``sampler(rng, size) -> (size, dim)`` switches to an empirical cloud from
    that law.  Empty cells are reseeded from the cloud (logged), never
    dropped.
    """
    if n_centers < 1:
        raise ValueError("n_centers must be >= 1")
    rng = np.random.default_rng(rng if rng is not None else _STREAM_LLOYD)
    if sampler is None and dim == 1:
        return Grid(_exact_gaussian_lloyd_1d(n_centers, max_iters, tol))
    if sampler is None and dim == 2:
        points, weights = _gaussian_quantile_cloud(dim, quantile_per_axis)
    else:
        if sampler is None:
            sampler = lambda r, size: r.standard_normal((size, dim))
        points = np.asarray(sampler(rng, n_samples), dtype=float)
        if points.ndim == 1:
            points = points[:, None]
        weights = np.full(points.shape[0], 1.0 / points.shape[0])

    centers = _spread_init(points, weights, n_centers, rng)

    for _ in range(max_iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        assign = np.argmin(d2, axis=1)
        new = np.empty_like(centers)
        for k in range(n_centers):
            mask = assign == k
            wk = weights[mask]
            if wk.sum() <= 0.0:
                idx = int(rng.integers(points.shape[0]))
                log.warning("lloyd: empty cell %d reseeded from the cloud", k)
                new[k] = points[idx]
                continue
            new[k] = (wk[:, None] * points[mask]).sum(axis=0) / wk.sum()
        shift = np.max(np.sqrt(((new - centers) ** 2).sum(axis=1)))
        centers = new
        if shift < tol:
            break
    return Grid(centers)


def _spread_init(points, weights, n_centers, rng):
    """Greedy farthest-point seeding (k-means++ style, deterministic first pick).

    First center at the weighted median along the first axis; each next
    center at the cloud point with maximal weighted squared distance to the
    chosen set.  Deterministic given the cloud.
    """
    order = np.argsort(points[:, 0], kind="stable")
    cum = np.cumsum(weights[order])
    first = points[order[int(np.searchsorted(cum, 0.5))]]
    centers = [first]
    d2 = ((points - first) ** 2).sum(axis=1)
    for _ in range(n_centers - 1):
        nxt = points[int(np.argmax(d2 * weights))]
        centers.append(nxt)
        d2 = np.minimum(d2, ((points - nxt) ** 2).sum(axis=1))
    return np.array(centers)


class Grids:
    """Per-time hidden/observation grid pair for horizon ``T``.

    ``hidden(n)`` is the grid of X at time n and ``obs(n)`` the grid of Y at
    time n, for n = 0..T.  Static problems pass a single pair.
    """

    def __init__(self, hidden_grids, obs_grids, horizon: int):
        def as_list(g):
            if isinstance(g, Grid):
                return [g] * (horizon + 1)
            g = list(g)
            if len(g) != horizon + 1:
                raise ValueError("need one grid per time 0..T")
            return g

        self._hidden = as_list(hidden_grids)
        self._obs = as_list(obs_grids)
        self.horizon = horizon
        sizes = {g.size for g in self._hidden} | {g.size for g in self._obs}
        if len(sizes) != 1:
            raise ValueError("all grids must share one size N")
        self.size = sizes.pop()

    def hidden(self, n: int) -> Grid:
        return self._hidden[n]

    def obs(self, n: int) -> Grid:
        return self._obs[n]

    def to_json_dict(self) -> dict:
        return {
            "horizon": self.horizon,
            "hidden": [g.to_json_dict() for g in self._hidden],
            "obs": [g.to_json_dict() for g in self._obs],
        }


# ---------------------------------------------------------------------------
# Quantized kernel estimation
# ---------------------------------------------------------------------------


class KernelCache:
    """Seeded Monte-Carlo estimates of the quantized transition kernels.

    For source hidden center i, control a and hidden marginal law mu, the
    hidden row ``p_hat[k]`` estimates the probability that the stepped hidden
    state projects to center k at time n+1.  For source observation center j
    and control a, the observation table ``h_hat[k, l]`` estimates the
    probability that, given the new hidden center k, the stepped observation
    projects to center l.  Every row is an exact empirical distribution.

    Streams are keyed by (tag, time, source index, control index) so results
    do not depend on evaluation order; estimates are cached per key, which
    freezes the dynamic program on one deterministic problem per run.
    """

    def __init__(self, model, grids: Grids, n_mc: int = DEFAULT_N_MC, seed: int = 0):
        if n_mc < 1:
            raise ValueError("n_mc must be >= 1")
        self.model = model
        self.grids = grids
        self.n_mc = int(n_mc)
        self.seed = int(seed)
        self._hidden_rows = {}
        self._obs_tables = {}

    def _mu_key(self, mu_weights) -> bytes:
        if not self.model.mean_field_in_hidden:
            return b""
        return np.round(np.asarray(mu_weights, dtype=float), 12).tobytes()

    def hidden_row(self, n: int, i: int, control_index: int, hidden_law) -> np.ndarray:
        """P-hat row over next hidden centers from center i at time n."""
        key = (n, i, control_index, self._mu_key(hidden_law.weights))
        row = self._hidden_rows.get(key)
        if row is not None:
            return row
        model, grids = self.model, self.grids
        rng = np.random.default_rng([self.seed, _STREAM_HIDDEN, n, i, control_index])
        eps = model.sample_hidden_noise(rng, self.n_mc)
        x = grids.hidden(n).centers[i]
        a = model.control_set[control_index]
        stepped = model.step_hidden(n, x, hidden_law, a, eps)
        idx = project_batch(grids.hidden(n + 1), stepped)
        row = np.bincount(idx, minlength=grids.size).astype(float) / self.n_mc
        row.flags.writeable = False
        self._hidden_rows[key] = row
        return row

    def hidden_matrix(self, n: int, control_index: int, hidden_law) -> np.ndarray:
        """All P-hat rows stacked: (N, N), row i = transitions from center i."""
        return np.stack(
            [
                self.hidden_row(n, i, control_index, hidden_law)
                for i in range(self.grids.size)
            ]
        )

    def obs_table(self, n: int, j: int, control_index: int) -> np.ndarray:
        """h-hat table (new hidden k, new obs l) from observation center j."""
        key = (n, j, control_index)
        table = self._obs_tables.get(key)
        if table is not None:
            return table
        model, grids = self.model, self.grids
        rng = np.random.default_rng([self.seed, _STREAM_OBS, n, j, control_index])
        y = grids.obs(n).centers[j]
        a = model.control_set[control_index]
        n_grid = grids.size
        table = np.empty((n_grid, n_grid))
        for k in range(n_grid):
            eta = model.sample_obs_noise(rng, self.n_mc)
            x_new = grids.hidden(n + 1).centers[k]
            stepped = model.step_obs(n, x_new, y, a, eta)
            idx = project_batch(grids.obs(n + 1), stepped)
            table[k] = np.bincount(idx, minlength=n_grid).astype(float) / self.n_mc
        table.flags.writeable = False
        self._obs_tables[key] = table
        return table


def estimate_kernels(model, grids: Grids, control_index: int, source, hidden_law,
                     n_mc: int = DEFAULT_N_MC, seed: int = 0, time_index: int = 0):
    """One-shot kernel estimate for a single source point (i, j).

    Returns the hidden transition row as a normalized :class:`DiscreteMeasure`
    over next hidden centers and the observation table over (new hidden, new
    obs) centers, each row of which is a normalized empirical distribution.
    """
    i, j = source
    cache = KernelCache(model, grids, n_mc=n_mc, seed=seed)
    row = cache.hidden_row(time_index, i, control_index, hidden_law)
    table = cache.obs_table(time_index, j, control_index)
    return DiscreteMeasure(row, normalized=True), table


def initial_joint_quantized(model, grids: Grids, n_mc: int = 100_000, seed: int = 0) -> DiscreteMeasure:
    """Quantized joint law of the initial pair (X_0, Y_0) on the time-0 grids."""
    rng = np.random.default_rng([seed, _STREAM_INITIAL])
    x0, y0 = model.sample_initial(rng, n_mc)
    ix = project_batch(grids.hidden(0), x0)
    iy = project_batch(grids.obs(0), y0)
    n = grids.size
    w = np.zeros((n, n))
    np.add.at(w, (ix, iy), 1.0 / n_mc)
    return DiscreteMeasure(w, normalized=True)


# ---------------------------------------------------------------------------
# Measure codebook
# ---------------------------------------------------------------------------


class MeasureCodebook:
    """Finite family of pair-measure weight matrices used as DP states.

    Each matrix is N x N with nonnegative entries summing to one.  Pushed
    one-step marginals are projected onto the nearest codeword in Frobenius
    distance.
    """

    def __init__(self, matrices):
        mats = np.array(matrices, dtype=float)
        if mats.ndim != 3 or mats.shape[0] < 1:
            raise ValueError("codebook needs at least one N x N matrix")
        if mats.min() < -1e-12:
            raise ValueError("codebook entries must be nonnegative")
        mats = np.clip(mats, 0.0, None)
        sums = mats.sum(axis=(1, 2))
        if np.max(np.abs(sums - 1.0)) > CODEBOOK_SUM_DRIFT:
            raise ValueError("codeword weights must sum to 1")
        mats = mats / sums[:, None, None]
        mats.flags.writeable = False
        self.matrices = mats
        self._flat = mats.reshape(mats.shape[0], -1)
        self._sq_norms = (self._flat**2).sum(axis=1)

    @property
    def size(self) -> int:
        return self.matrices.shape[0]

    def project_index(self, q: np.ndarray) -> int:
        return int(self.project_indices(q[None, :, :])[0])

    def project_indices(self, qs: np.ndarray) -> np.ndarray:
        """Nearest codeword (Frobenius) for a stack of matrices; ties go low."""
        flat = qs.reshape(qs.shape[0], -1)
        d2 = self._sq_norms[None, :] - 2.0 * flat @ self._flat.T
        return np.argmin(d2, axis=1)

    def to_json_dict(self) -> dict:
        return {"matrices": self.matrices.tolist()}



def codebook_project(codebook: MeasureCodebook, q) -> int:
    """Index of the Frobenius-nearest codeword; ties break to the smallest."""
    if codebook.size < 1:
        raise ValueError("empty codebook")
    q = np.asarray(q, dtype=float)
    return codebook.project_index(q)


def _matrix_key(mat, tol=CODEBOOK_DEDUP_TOL) -> bytes:
    # Rounding to the dedup tolerance approximates entrywise equality within
    # it; boundary pairs may survive as near-duplicates, which only widens
    # the codebook slightly.
    return np.round(mat / tol).astype(np.int64).tobytes()


def _frobenius_lloyd(mats: np.ndarray, n_codewords: int, rng, max_iters: int = 60):
    """Lloyd clustering of weight matrices in Frobenius metric."""
    flat = mats.reshape(mats.shape[0], -1)
    if flat.shape[0] <= n_codewords:
        return mats.copy()
    order = np.argsort(flat[:, 0], kind="stable")
    take = (np.arange(n_codewords) + 0.5) / n_codewords * flat.shape[0]
    centers = flat[order[take.astype(int)]].copy()
    for k in range(1, n_codewords):
        while np.any(np.all(centers[:k] == centers[k], axis=1)):
            centers[k] = flat[int(rng.integers(flat.shape[0]))]
    point_sq = (flat**2).sum(axis=1)
    for _ in range(max_iters):
        d2 = (
            point_sq[:, None]
            - 2.0 * flat @ centers.T
            + (centers**2).sum(axis=1)[None, :]
        )
        assign = np.argmin(d2, axis=1)
        new = centers.copy()
        for k in range(n_codewords):
            mask = assign == k
            if not np.any(mask):
                new[k] = flat[int(rng.integers(flat.shape[0]))]
                continue
            new[k] = flat[mask].mean(axis=0)
        if np.max(np.abs(new - centers)) < 1e-12:
            centers = new
            break
        centers = new
    side = mats.shape[1]
    mats_out = centers.reshape(-1, side, side)
    mats_out = np.clip(mats_out, 0.0, None)
    mats_out /= mats_out.sum(axis=(1, 2))[:, None, None]
    return mats_out


def _candidate_maps(n_cells: int, n_controls: int, enumerate_budget: int):
    """Control maps explored during codebook construction.

    All maps when the full enumeration fits in the budget, otherwise the
    constant maps plus every single-cell deviation from each constant (the
    neighborhood the coordinate-descent optimizer walks through).
    """
    total = n_controls**n_cells
    maps = []
    if total <= enumerate_budget:
        grids_idx = np.indices((n_controls,) * n_cells).reshape(n_cells, -1).T
        return [np.array(row, dtype=int) for row in grids_idx]
    for c in range(n_controls):
        base = np.full(n_cells, c, dtype=int)
        maps.append(base)
        for j in range(n_cells):
            for c2 in range(n_controls):
                if c2 == c:
                    continue
                dev = base.copy()
                dev[j] = c2
                maps.append(dev)
    return maps


def codebook_build(
    model,
    grids: Grids,
    kernels: KernelCache,
    initial: DiscreteMeasure,
    horizon: int,
    max_codewords: int,
    rng=None,
    enumerate_budget: int = 4096,
    level_cap: int = 512,
) -> MeasureCodebook:
    """Forward exploration of reachable one-step pair marginals.

    From the quantized initial joint law, pushes the frontier through every
    candidate closed-loop control map per step, deduplicating matrices equal
    within 1e-9 entrywise.  If the collected set fits under ``max_codewords``
    it is returned verbatim (projection is then lossless along explored
    trajectories); otherwise the set is Lloyd-clustered in Frobenius metric
    down to ``max_codewords`` centroids and renormalized.  Frontiers wider
    than ``level_cap`` are clustered per level to keep exploration bounded.
    """
    from .dp import _push_contributions  # dp builds on this module

    if max_codewords < 1:
        raise ValueError("max_codewords must be >= 1")
    rng = np.random.default_rng(rng)
    n_grid = grids.size
    n_controls = len(model.control_set)
    maps = _candidate_maps(n_grid, n_controls, enumerate_budget)
    cells = np.arange(n_grid)

    frontier = [initial.weights.copy()]
    levels = [frontier]
    lossless = True
    for n in range(horizon):
        new_level = {}
        for w in frontier:
            contribs = _push_contributions(
                DiscreteMeasure(w), model, grids, kernels, n
            )
            for a_map in maps:
                pushed = contribs[cells, a_map].sum(axis=0)
                pushed = pushed / pushed.sum()
                key = _matrix_key(pushed)
                if key not in new_level:
                    new_level[key] = pushed
        mats = list(new_level.values())
        if len(mats) > level_cap:
            lossless = False
            mats = list(_frobenius_lloyd(np.stack(mats), level_cap, rng))
        levels.append(mats)
        frontier = mats

    seen = {}
    for level in levels:
        for w in level:
            seen.setdefault(_matrix_key(w), w)
    collected = list(seen.values())
    if len(collected) > max_codewords:
        lossless = False
        mats = _frobenius_lloyd(np.stack(collected), max_codewords, rng)
        book = MeasureCodebook(mats)
    else:
        book = MeasureCodebook(np.stack(collected))
    book.lossless = lossless
    return book


def config_hash(payload) -> str:
    """Stable content hash used to key the grid/codebook cache on disk."""
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
