"""Exact conditional-law computation on quantization grids.

The grid filter runs the Bayes-type Kallianpur-Streibel recursion on the
quantized kernels, tracking both the normalized conditional law of the hidden
state and the mass of its unnormalized counterpart.  The mean-field argument
of the hidden kernel is always the unconditional hidden marginal, never the
filter itself; callers must supply it explicitly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .measures import DiscreteMeasure, first_marginal
from .model import HiddenLaw

MASS_UNDERFLOW = 1e-300


@dataclass(frozen=True)
class FilterState:
    """Conditional law of the hidden state given observations up to time n.

    ``weights`` is the normalized filter over the time-n hidden grid;
    ``log_mass`` the log of the unnormalized measure's total mass (zero at
    initialization); ``obs_index`` the grid cell of the last observation,
    which the next update's observation kernel conditions on.
    """

    time: int
    weights: np.ndarray
    log_mass: float
    obs_index: int

    @property
    def mass(self) -> float:
        return math.exp(self.log_mass)

    def normalized(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.weights, normalized=True)

    def unnormalized(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.weights * self.mass, normalized=False)


def ks_init(initial_joint: DiscreteMeasure, y0_index: int) -> FilterState:
    """Condition the quantized initial joint law on the observed Y_0 cell."""
    w = initial_joint.weights
    if w.ndim != 2:
        raise ValueError("initial joint law must be a pair measure")
    col = w[:, y0_index]
    total = col.sum()
    if total <= 0.0:
        raise ValueError("unreachable observation: initial cell %d has zero mass" % y0_index)
    return FilterState(time=0, weights=col / total, log_mass=0.0, obs_index=int(y0_index))


def ks_update(
    state: FilterState,
    kernels,
    hidden_marginal: DiscreteMeasure,
    control_index: int,
    y_new_index: int,
    grids=None,
    log_domain: bool = False,
) -> FilterState:
    """One Bayes step of the grid filter, consuming one observation.

    ``hidden_marginal`` is the unconditional law of the hidden state at the
    current time (the mean-field argument of the transition kernel), not the
    filter.  Raises on mass underflow in linear mode, suggesting the
    log-domain flag.
    """
    n = state.time
    grids = grids if grids is not None else kernels.grids
    law = HiddenLaw.from_measure(hidden_marginal, grids.hidden(n))
    trans = kernels.hidden_matrix(n, control_index, law)  # (i -> k)
    obs = kernels.obs_table(n, state.obs_index, control_index)  # (k, l)
    likelihood = obs[:, y_new_index]  # over new hidden k

    if log_domain:
        with np.errstate(divide="ignore"):
            log_prior = np.log(state.weights)
            log_trans = np.log(trans)
            log_lik = np.log(likelihood)
        stacked = log_prior[:, None] + log_trans  # (i, k)
        top = stacked.max(axis=0)
        log_pred = np.full(stacked.shape[1], -np.inf)
        finite = np.isfinite(top)
        if np.any(finite):
            log_pred[finite] = top[finite] + np.log(
                np.exp(stacked[:, finite] - top[finite][None, :]).sum(axis=0)
            )
        log_post = log_pred + log_lik
        top_post = log_post.max()
        if not np.isfinite(top_post):
            raise FloatingPointError("filter collapse: all posterior mass vanished")
        post = np.exp(log_post - top_post)
        total = post.sum()
        return FilterState(
            time=n + 1,
            weights=post / total,
            log_mass=state.log_mass + top_post + math.log(total),
            obs_index=int(y_new_index),
        )

    predicted = state.weights @ trans  # (k,)
    post = predicted * likelihood
    total = post.sum()
    if total < MASS_UNDERFLOW:
        raise FloatingPointError(
            "filter collapse: unnormalized mass underflow; retry with log_domain=True"
        )
    return FilterState(
        time=n + 1,
        weights=post / total,
        log_mass=state.log_mass + math.log(total),
        obs_index=int(y_new_index),
    )


def hidden_marginal_flow(model, grids, kernels, initial_joint, policy, horizon):
    """Unconditional hidden marginals mu_0..mu_T under a closed-loop policy.

    The joint (x, y) marginal is pushed forward step by step; each hidden
    marginal is the x-marginal of the pushed joint.  ``policy`` maps each time
    to an array of control indices per observation cell.
    """
    from .dp import push_marginal

    joint = initial_joint
    flow = [first_marginal(joint)]
    for n in range(horizon):
        joint = push_marginal(joint, model, grids, kernels, policy[n], n)
        flow.append(first_marginal(joint))
    return flow


def posterior_mean(hidden_measure: DiscreteMeasure, centers, obs_matrix, y) -> np.ndarray:
    """Bayes posterior mean of the hidden state given one observation.

    The observation is Gaussian around ``obs_matrix @ x`` with identity
    covariance; exponents are shifted by their maximum before exponentiation
    so the largest term is exactly one.
    """
    pts = np.asarray(centers, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    obs_matrix = np.atleast_2d(np.asarray(obs_matrix, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    expo = -0.5 * ((pts @ obs_matrix.T - y[None, :]) ** 2).sum(axis=1)
    expo = expo - expo.max()
    w = hidden_measure.weights * np.exp(expo)
    return (w[:, None] * pts).sum(axis=0) / w.sum()


def gaussian_posterior_mean(mean, cov, obs_matrix, y) -> np.ndarray:
    """Closed-form posterior mean for a Gaussian prior and linear observation.

    With prior N(mean, cov) and observation y = obs_matrix x + standard
    normal noise the posterior mean is
    ``mean + cov J^T (J cov J^T + I)^{-1} (y - J mean)``.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    J = np.atleast_2d(np.asarray(obs_matrix, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    innov_cov = J @ cov @ J.T + np.eye(J.shape[0])
    if np.linalg.cond(innov_cov) > 1e12:
        raise np.linalg.LinAlgError("innovation covariance badly conditioned")
    gain = cov @ J.T @ np.linalg.solve(innov_cov, np.eye(J.shape[0]))
    return mean + gain @ (y - J @ mean)


def brute_force_filter(path_measure, y_indices, time_index) -> np.ndarray:
    """Conditional hidden law by full path enumeration (test oracle).

    Conditions the exact path measure on the observed y-index path
    ``y_indices[0..time_index]`` and marginalizes to the hidden state at
    ``time_index``.
    """
    target = tuple(int(j) for j in y_indices[: time_index + 1])
    w = np.zeros(path_measure.n_hidden)
    for path, weight in path_measure.entries.items():
        if tuple(j for _, j in path[: time_index + 1]) == target:
            w[path[time_index][0]] += weight
    total = w.sum()
    if total <= 0:
        raise ValueError("unreachable observation path %r" % (target,))
    return w / total
