"""Seeded Monte-Carlo simulation of the controlled pair under strategies.

All paths advance in lockstep; the mean-field argument at step k is the
empirical hidden law of the batch (particle approximation of the law of X_k).
Per-path noise comes from independent child streams of one seed sequence, so
batches are reproducible bit for bit given (config, seed).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import HiddenLaw
from .quantize import project_batch

BOOTSTRAP_RESAMPLES = 100
_BOOTSTRAP_TAG = 999


@dataclass
class BatchResult:
    """Empirical outcome of one lockstep batch simulation."""

    n_paths: int
    seed: int
    terminal_hidden: np.ndarray  # (n_paths, p)
    path_costs: np.ndarray  # realized per-path cost against the batch law
    hidden_means: np.ndarray  # (T+1, p) batch hidden means per step
    hidden_covs: np.ndarray  # (T+1, p, p)
    mean_terminal: np.ndarray  # (p,)
    var_terminal: np.ndarray  # (p,) unbiased, per coordinate
    criterion: float | None = None  # portfolio: (gamma/2) var - mean
    cost_mean: float = 0.0
    cost_se: float = 0.0


class Strategy:
    """Maps the observation history (and the batch law) to controls."""

    def controls(self, model, n, y_history, hidden_law, joint_mean):
        raise NotImplementedError

    def describe(self) -> str:
        return type(self).__name__


class ConstantControl(Strategy):
    def __init__(self, control):
        self.control = np.atleast_1d(np.asarray(control, dtype=float))

    def controls(self, model, n, y_history, hidden_law, joint_mean):
        return np.broadcast_to(self.control, (y_history.shape[0], self.control.size))

    def describe(self):
        return "constant(%s)" % self.control.tolist()


class BuyAndHold(Strategy):
    """Stay fully invested: unit control at every step."""

    def controls(self, model, n, y_history, hidden_law, joint_mean):
        return np.ones((y_history.shape[0], model.dim_control))

    def describe(self):
        return "buy_and_hold"


class Trending(Strategy):
    """Follow the sign of the last observed increment; long at the start."""

    def controls(self, model, n, y_history, hidden_law, joint_mean):
        n_paths = y_history.shape[0]
        if n == 0:
            return np.ones((n_paths, model.dim_control))
        inc = y_history[:, n, 0] - y_history[:, n - 1, 0]
        sign = np.where(inc > 0.0, 1.0, -1.0)
        return sign[:, None] * np.ones((1, model.dim_control))

    def describe(self):
        return "trending"


class QuantizedPolicy(Strategy):
    """Closed-loop DP policy: project the observation, look up the control."""

    def __init__(self, policy_maps, grids):
        self.policy_maps = [np.asarray(a, dtype=int) for a in policy_maps]
        self.grids = grids

    def controls(self, model, n, y_history, hidden_law, joint_mean):
        cells = project_batch(self.grids.obs(n), y_history[:, n, :])
        indices = self.policy_maps[n][cells]
        controls = np.stack([model.control_set[c] for c in indices])
        return controls

    def describe(self):
        return "quantized_policy"


class LQFeedback(Strategy):
    """Analytic LQ feedback with the one-step Gaussian posterior mean.

    The posterior mean conditions the current observation against the
    unconditional hidden marginal, whose moments are taken from the batch
    (the empirical version of the law the feedback formula expects).
    """

    def __init__(self, solution):
        self.solution = solution

    def controls(self, model, n, y_history, hidden_law, joint_mean):
        sol = self.solution
        J = sol.obs_matrix(n)
        m = hidden_law.mean
        cov = hidden_law.cov()
        y = y_history[:, n, :]
        innov_cov = J @ cov @ J.T + np.eye(J.shape[0])
        gain_k = cov @ J.T @ np.linalg.inv(innov_cov)
        posts = m[None, :] + (y - (J @ m)[None, :]) @ gain_k.T
        lift = posts @ sol.posterior_gain[n].T + (sol.mean_gain[n].T @ joint_mean)[None, :]
        return lift @ sol.gain[n].T

    def describe(self):
        return "lq_feedback"


def baseline_buy_and_hold() -> Strategy:
    return BuyAndHold()


def baseline_trending() -> Strategy:
    return Trending()


def _per_path_noise(model, n_paths, seed):
    """Initial draws and per-step noise blocks from per-path child streams."""
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(n_paths)
    T = model.horizon
    x0 = np.empty((n_paths, model.dim_hidden))
    y0 = np.empty((n_paths, model.dim_obs))
    eps_blocks = []
    eta_blocks = []
    for i, child in enumerate(children):
        g = np.random.default_rng(child)
        xi, zi = model.sample_initial(g, 1)
        x0[i], y0[i] = xi[0], zi[0]
        eps_blocks.append(model.sample_hidden_noise(g, T))
        eta_blocks.append(model.sample_obs_noise(g, T))
    return x0, y0, np.stack(eps_blocks), np.stack(eta_blocks)


def simulate_batch(model, strategy: Strategy, n_paths: int, seed: int) -> BatchResult:
    """Lockstep batch simulation of a strategy.

    Deterministic given (model config, seed): path i owns child stream i of
    the seed sequence regardless of batch size evaluation order.
    """
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2 for a defined variance")
    T = model.horizon
    x0, y0, eps, eta = _per_path_noise(model, n_paths, seed)

    xs = np.empty((n_paths, T + 1, model.dim_hidden))
    ys = np.empty((n_paths, T + 1, model.dim_obs))
    xs[:, 0, :], ys[:, 0, :] = x0, y0
    controls_taken = np.empty((n_paths, T, model.dim_control))
    hidden_means = np.empty((T + 1, model.dim_hidden))
    hidden_covs = np.empty((T + 1, model.dim_hidden, model.dim_hidden))
    stage_costs = np.zeros(n_paths)

    for n in range(T):
        law = HiddenLaw(xs[:, n, :])
        hidden_means[n] = law.mean
        hidden_covs[n] = law.cov()
        joint_mean = np.concatenate([law.mean, ys[:, n, :].mean(axis=0)])
        a = np.asarray(
            strategy.controls(model, n, ys[:, : n + 1, :], law, joint_mean),
            dtype=float,
        )
        controls_taken[:, n, :] = a
        stage_costs += _stage_cost_batch(model, n, xs[:, n, :], law, a)
        xs[:, n + 1, :] = _step_hidden_batch(model, n, xs[:, n, :], law, a, eps[:, n, :])
        ys[:, n + 1, :] = model.step_obs(n, xs[:, n + 1, :], ys[:, n, :], a, eta[:, n, :])

    law_T = HiddenLaw(xs[:, T, :])
    hidden_means[T] = law_T.mean
    hidden_covs[T] = law_T.cov()
    terminal = np.asarray(model.terminal_cost(xs[:, T, :], law_T), dtype=float)
    path_costs = stage_costs + terminal

    term_x = xs[:, T, :]
    mean_terminal = term_x.mean(axis=0)
    var_terminal = term_x.var(axis=0, ddof=1)
    criterion = None
    if model.name == "portfolio":
        gamma = model.params["risk_aversion"]
        criterion = float(0.5 * gamma * var_terminal[0] - mean_terminal[0])
    cost_mean = float(path_costs.mean())
    cost_se = float(path_costs.std(ddof=1) / np.sqrt(n_paths))
    return BatchResult(
        n_paths=n_paths,
        seed=seed,
        terminal_hidden=term_x,
        path_costs=path_costs,
        hidden_means=hidden_means,
        hidden_covs=hidden_covs,
        mean_terminal=mean_terminal,
        var_terminal=var_terminal,
        criterion=criterion,
        cost_mean=cost_mean,
        cost_se=cost_se,
    )


def _step_hidden_batch(model, n, x, law, a, eps):
    if np.all(a == a[0]):
        return model.step_hidden(n, x, law, a[0], eps)
    out = np.empty_like(x)
    # Group identical controls to keep the step map calls vectorized.
    uniq, inv = np.unique(a, axis=0, return_inverse=True)
    for k in range(uniq.shape[0]):
        mask = inv == k
        out[mask] = model.step_hidden(n, x[mask], law, uniq[k], eps[mask])
    return out


def _stage_cost_batch(model, n, x, law, a):
    uniq, inv = np.unique(a, axis=0, return_inverse=True)
    out = np.empty(x.shape[0])
    for k in range(uniq.shape[0]):
        mask = inv == k
        out[mask] = np.asarray(model.running_cost(n, x[mask], law, uniq[k]), dtype=float)
    return out


def evaluate_policy_cost(model, strategy: Strategy, n_paths: int, seed: int):
    """Empirical criterion estimate with a standard error.

    Returns ``(estimate, standard error, batch)``.  For the portfolio model
    the estimate is the mean-variance criterion of the batch and the error a
    bootstrap standard error over path resamples; otherwise the estimate is
    the mean per-path cost with its CLT standard error.
    """
    batch = simulate_batch(model, strategy, n_paths, seed)
    if model.name == "portfolio":
        gamma = model.params["risk_aversion"]
        wealth = batch.terminal_hidden[:, 0]
        rng = np.random.default_rng([seed, _BOOTSTRAP_TAG])
        stats = np.empty(BOOTSTRAP_RESAMPLES)
        for b in range(BOOTSTRAP_RESAMPLES):
            take = rng.integers(0, n_paths, size=n_paths)
            w = wealth[take]
            stats[b] = 0.5 * gamma * w.var(ddof=1) - w.mean()
        return float(batch.criterion), float(stats.std(ddof=1)), batch
    return batch.cost_mean, batch.cost_se, batch
