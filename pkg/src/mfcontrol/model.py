"""Controlled partially observed mean-field models.

A :class:`ModelSpec` bundles the hidden-state step map, the observation step
map and its density, the stage and terminal costs, noise samplers and the
initial law.  The hidden step may depend on the law of the hidden state (the
mean-field term), passed in as a :class:`HiddenLaw`.  Two concrete builders
are provided: the linear-quadratic benchmark model and the mean-variance
wealth model.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class HiddenLaw:
    """Finite-support hidden-state marginal used as the mean-field argument.

    Both quantized grid measures (points = centers) and particle batches
    (points = paths, uniform weights) reduce to this view.
    """

    __slots__ = ("points", "weights", "_mean")

    def __init__(self, points, weights=None):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
        else:
            w = np.asarray(weights, dtype=float)
            total = w.sum()
            if total <= 0:
                raise ValueError("hidden law has no mass")
            w = w / total
        self.points = pts
        self.weights = w
        self._mean = None

    @property
    def mean(self) -> np.ndarray:
        if self._mean is None:
            self._mean = self.weights @ self.points
        return self._mean

    def second_moment(self) -> np.ndarray:
        return self.points.T @ (self.weights[:, None] * self.points)

    def cov(self) -> np.ndarray:
        m = self.mean
        return self.second_moment() - np.outer(m, m)

    @staticmethod
    def from_measure(measure, grid):
        """Hidden law of a grid measure (1-d weights over grid centers)."""
        return HiddenLaw(grid.centers, measure.weights)


@dataclass
class ModelSpec:
    """Abstract controlled pair (X, Y) with mean-field hidden dynamics.

    Step maps receive the time index; constant-coefficient models ignore it.
    All maps broadcast over a leading batch axis of the noise (and of x / y
    where applicable), so kernel estimation and particle simulation share the
    same entry points.
    """

    dim_hidden: int
    dim_obs: int
    dim_control: int
    horizon: int
    control_set: list
    step_hidden: Callable  # (n, x, law: HiddenLaw, a, eps) -> x'
    step_obs: Callable  # (n, x_new, y, a, eta) -> y'
    obs_density: Callable  # (n, x_new, y, a, y_new) -> density value
    running_cost: Callable  # (n, x, law, a) -> cost, broadcasting over x rows
    terminal_cost: Callable  # (x, law) -> cost, broadcasting over x rows
    sample_hidden_noise: Callable  # (rng, size) -> (size, d_eps)
    sample_obs_noise: Callable  # (rng, size) -> (size, d_eta)
    sample_initial: Callable  # (rng, size) -> (x0 (size, p), y0 (size, p'))
    mean_field_in_hidden: bool = True
    name: str = "model"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.control_set:
            raise ValueError("control_set must be nonempty")
        self.control_set = [np.atleast_1d(np.asarray(a, dtype=float)) for a in self.control_set]
        for a in self.control_set:
            if a.shape != (self.dim_control,):
                raise ValueError("control dimension mismatch in control_set")


def step(model: ModelSpec, n: int, x, y, law: HiddenLaw, a, rng) -> tuple:
    """Advance one step: draw noises, apply the hidden then observation map."""
    if not 0 <= n < model.horizon:
        raise IndexError("step time %d outside horizon" % n)
    eps = model.sample_hidden_noise(rng, 1)[0]
    eta = model.sample_obs_noise(rng, 1)[0]
    x_new = model.step_hidden(n, np.asarray(x, dtype=float), law, a, eps)
    y_new = model.step_obs(n, x_new, np.asarray(y, dtype=float), a, eta)
    return x_new, y_new


# ---------------------------------------------------------------------------
# Linear-quadratic model
# ---------------------------------------------------------------------------


def _per_step(mats, horizon, d, what):
    arr = np.asarray(mats, dtype=float)
    if arr.ndim == 2:
        arr = np.repeat(arr[None, :, :], horizon, axis=0)
    if arr.shape != (horizon, d, d):
        raise ValueError("%s must be (T, d, d) or (d, d)" % what)
    return arr


@dataclass
class LQParams:
    """Coefficients of the linear-quadratic partially observed model.

    Dynamics matrices are per step k = 0..T-1 (obs_gain[k] maps the state at
    k+1 into the observation at k+1); cost matrices quad / mean_quad are per
    k = 0..T with the last slice the terminal cost, control_quad per step.
    Requires obs_gain and control_gain invertible, quad and quad + mean_quad
    symmetric positive semidefinite, control_quad symmetric positive definite.
    """

    dim: int
    horizon: int
    state_gain: np.ndarray  # B_k
    mean_gain: np.ndarray  # coefficient of E[X_k]
    control_gain: np.ndarray  # D_k
    obs_gain: np.ndarray  # J_{k+1}
    quad: np.ndarray  # Q_k, k = 0..T
    mean_quad: np.ndarray  # cost on E[X_k], k = 0..T
    control_quad: np.ndarray  # R_k, k = 0..T-1
    control_set: Sequence = ()

    def __post_init__(self):
        d, T = self.dim, self.horizon
        self.state_gain = _per_step(self.state_gain, T, d, "state_gain")
        self.mean_gain = _per_step(self.mean_gain, T, d, "mean_gain")
        self.control_gain = _per_step(self.control_gain, T, d, "control_gain")
        self.obs_gain = _per_step(self.obs_gain, T, d, "obs_gain")
        self.quad = _per_step(self.quad, T + 1, d, "quad")
        self.mean_quad = _per_step(self.mean_quad, T + 1, d, "mean_quad")
        self.control_quad = _per_step(self.control_quad, T, d, "control_quad")
        for k in range(T):
            for name, mat in (("obs_gain", self.obs_gain[k]), ("control_gain", self.control_gain[k])):
                if np.linalg.cond(mat) > 1e12:
                    raise ValueError("%s[%d] is singular" % (name, k))
            self._check_sym_psd(self.control_quad[k], "control_quad", k, strict=True)
        for k in range(T + 1):
            self._check_sym_psd(self.quad[k], "quad", k)
            self._check_sym_psd(self.quad[k] + self.mean_quad[k], "quad + mean_quad", k)

    @staticmethod
    def _check_sym_psd(mat, name, k, strict=False):
        if np.max(np.abs(mat - mat.T)) > 1e-10:
            raise ValueError("%s[%d] is not symmetric" % (name, k))
        lo = np.linalg.eigvalsh(mat).min()
        if strict and lo <= 0:
            raise ValueError("%s[%d] is not positive definite" % (name, k))
        if not strict and lo < -1e-12:
            raise ValueError("%s[%d] is not positive semidefinite" % (name, k))


def lq_model(params: LQParams) -> ModelSpec:
    """Linear dynamics with additive Gaussian noise and quadratic costs.

    Hidden step ``B_k x + mean_gain_k E[X_k] + D_k a + eps``; observation
    ``J_{k+1} x' + eta``; both noises standard normal.  X_0 and Y_0 are
    independent standard normal vectors.
    """
    d = params.dim
    B, Bbar, D, J = params.state_gain, params.mean_gain, params.control_gain, params.obs_gain
    Q, Qbar, R = params.quad, params.mean_quad, params.control_quad

    def step_hidden(n, x, law, a, eps):
        shift = Bbar[n] @ law.mean + D[n] @ np.asarray(a, dtype=float)
        return np.asarray(x, dtype=float) @ B[n].T + shift + eps

    def step_obs(n, x_new, y, a, eta):
        return np.asarray(x_new, dtype=float) @ J[n].T + eta

    def obs_density(n, x_new, y, a, y_new):
        resid = np.asarray(y_new, dtype=float) - np.asarray(x_new, dtype=float) @ J[n].T
        sq = (np.atleast_2d(resid) ** 2).sum(axis=-1)
        out = (2.0 * np.pi) ** (-d / 2.0) * np.exp(-0.5 * sq)
        return out if np.ndim(y_new) > 1 or np.ndim(x_new) > 1 else float(out[0])

    def running_cost(n, x, law, a):
        single = np.ndim(x) == 1
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = law.mean
        a = np.asarray(a, dtype=float)
        vals = np.einsum("bi,ij,bj->b", x, Q[n], x) + m @ Qbar[n] @ m + a @ R[n] @ a
        return float(vals[0]) if single else vals

    def terminal_cost(x, law):
        single = np.ndim(x) == 1
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = law.mean
        vals = np.einsum("bi,ij,bj->b", x, Q[-1], x) + m @ Qbar[-1] @ m
        return float(vals[0]) if single else vals

    def sample_initial(rng, size):
        return rng.standard_normal((size, d)), rng.standard_normal((size, d))

    control_set = list(params.control_set) if len(params.control_set) else [np.zeros(d)]
    return ModelSpec(
        dim_hidden=d,
        dim_obs=d,
        dim_control=d,
        horizon=params.horizon,
        control_set=control_set,
        step_hidden=step_hidden,
        step_obs=step_obs,
        obs_density=obs_density,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        sample_hidden_noise=lambda rng, size: rng.standard_normal((size, d)),
        sample_obs_noise=lambda rng, size: rng.standard_normal((size, d)),
        sample_initial=sample_initial,
        mean_field_in_hidden=bool(np.any(Bbar != 0.0)),
        name="lq",
        params={"dim": d, "horizon": params.horizon},
    )


def paper_benchmark_lq_params(control_scale: float = 1.0) -> LQParams:
    """The d = 2, T = 3 benchmark configuration with its restricted controls."""
    d, T = 2, 3
    upper = np.array([[1.0, 1.0], [0.0, 1.0]])
    ones = np.ones((2, 2))
    controls = [
        np.array([-2.0, -2.0]),
        np.array([-1.0, -1.0]),
        np.array([1.0, 1.0]),
        np.array([2.0, 2.0]),
    ]
    return LQParams(
        dim=d,
        horizon=T,
        state_gain=np.zeros((2, 2)),
        mean_gain=np.zeros((2, 2)),
        control_gain=upper,
        obs_gain=upper,
        quad=ones,
        mean_quad=ones,
        control_quad=np.eye(2),
        control_set=[control_scale * a for a in controls],
    )


# ---------------------------------------------------------------------------
# Mean-variance wealth model
# ---------------------------------------------------------------------------


@dataclass
class PortfolioParams:
    """Single-asset wealth dynamics under noisy wealth observation.

    Terminal cost integrates to (risk_aversion / 2) Var[X_T] - E[X_T]; the
    stage cost is zero.  Initial wealth is deterministic and the first
    observation equals it.
    """

    drift: float = 0.02
    volatility: float = 0.05
    time_step: float = 0.5
    risk_aversion: float = 2.0
    horizon: int = 5
    control_set: Sequence = (0.5, 0.75, 1.0, 2.0)
    initial_wealth: float = 1.0
    obs_noise_std: float = 1.0

    def __post_init__(self):
        if self.volatility <= 0 or self.risk_aversion <= 0 or self.time_step <= 0:
            raise ValueError("volatility, risk_aversion, time_step must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


def portfolio_model(params: PortfolioParams) -> ModelSpec:
    """Wealth model: X' = X + a (b dt + sigma sqrt(dt) eps), Y' = X' + eta."""
    b, sig, dt = params.drift, params.volatility, params.time_step
    gamma = params.risk_aversion
    std = params.obs_noise_std

    def step_hidden(n, x, law, a, eps):
        a = np.asarray(a, dtype=float).reshape(-1)[0]
        ret = b * dt + sig * np.sqrt(dt) * np.asarray(eps, dtype=float)[..., 0]
        return np.asarray(x, dtype=float) + (a * ret)[..., None]

    def step_obs(n, x_new, y, a, eta):
        return np.asarray(x_new, dtype=float) + std * np.asarray(eta, dtype=float)

    def obs_density(n, x_new, y, a, y_new):
        resid = (np.asarray(y_new, dtype=float) - np.asarray(x_new, dtype=float)) / std
        sq = (np.atleast_2d(resid) ** 2).sum(axis=-1)
        out = np.exp(-0.5 * sq) / (std * np.sqrt(2.0 * np.pi))
        return out if np.ndim(y_new) > 1 or np.ndim(x_new) > 1 else float(out[0])

    def running_cost(n, x, law, a):
        if np.ndim(x) == 1:
            return 0.0
        return np.zeros(np.atleast_2d(x).shape[0])

    def terminal_cost(x, law):
        # Integrates against the law to (gamma/2) Var - mean; the variance
        # here is the population form E[(x - mean)^2].
        single = np.ndim(x) == 1
        x = np.atleast_2d(np.asarray(x, dtype=float))[:, 0]
        m = law.mean[0]
        vals = 0.5 * gamma * (x - m) ** 2 - x
        return float(vals[0]) if single else vals

    def sample_initial(rng, size):
        x0 = np.full((size, 1), params.initial_wealth)
        return x0, x0.copy()

    return ModelSpec(
        dim_hidden=1,
        dim_obs=1,
        dim_control=1,
        horizon=params.horizon,
        control_set=[np.atleast_1d(float(a)) for a in params.control_set],
        step_hidden=step_hidden,
        step_obs=step_obs,
        obs_density=obs_density,
        running_cost=running_cost,
        terminal_cost=terminal_cost,
        sample_hidden_noise=lambda rng, size: rng.standard_normal((size, 1)),
        sample_obs_noise=lambda rng, size: rng.standard_normal((size, 1)),
        sample_initial=sample_initial,
        mean_field_in_hidden=False,
        name="portfolio",
        params={
            "drift": b,
            "volatility": sig,
            "time_step": dt,
            "risk_aversion": gamma,
            "horizon": params.horizon,
            "initial_wealth": params.initial_wealth,
            "obs_noise_std": std,
        },
    )
