"""Closed-form solution of the partially observed mean-field LQ problem.

The value of the problem is quadratic in the joint (x, y) marginal: a trace
term against a matrix ``quad_coeff[n]``, a quadratic form in the stacked mean
against ``mean_coeff[n]``, and a scalar ``const_coeff[n]``.  The backward
recursion below carries those coefficients together with the feedback
matrices of the optimal closed-loop strategy

    a*_n(y) = gain[n] (posterior_gain[n] PostMean_n(mu, y) + mean_gain[n]^T mu_bar)

where PostMean_n is the one-step Bayes posterior mean of X_n given Y_n under
the current marginal.  All displayed intermediates are stored so each formula
has its own unit test.

The quadratic ansatz closes exactly when every state_gain (the coefficient of
X_n itself in the hidden dynamics) vanishes: the posterior-mean term then
drops out of the first-order condition and the minimized one-step objective
stays quadratic in the marginal.  For nonzero state_gain the recursion keeps
the unambiguous quadratic terms and the feedback stays the exact root of the
first-order condition given the quadratic continuation; ``exact`` records
which regime a solution is in.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .filtering import gaussian_posterior_mean, posterior_mean
from .measures import MomentPair
from .model import LQParams

COND_LIMIT = 1e12


def _solve(mat, rhs, name, time_index):
    if np.linalg.cond(mat) > COND_LIMIT:
        raise np.linalg.LinAlgError(
            "%s at time %d has condition number > %g" % (name, time_index, COND_LIMIT)
        )
    return np.linalg.solve(mat, rhs)


def _sym(mat):
    return (mat + mat.T) / 2.0


@dataclass
class RiccatiSolution:
    """Backward value coefficients and feedback matrices, one slice per time.

    quad_coeff[n] (2d x 2d), mean_coeff[n] (2d x 2d) and const_coeff[n] are
    the value coefficients for n = 0..T.  For n < T the feedback matrices are
    gain (d x d), posterior_gain (d x d) and mean_gain (2d x d), and the
    retained intermediates are mean_quad_update (the mean-quadratic carry),
    mean_control_quad, mean_control_cross, mean_control_cross_total,
    control_hessian and mean_control_hessian.
    """

    params: LQParams
    quad_coeff: list = field(default_factory=list)
    mean_coeff: list = field(default_factory=list)
    const_coeff: list = field(default_factory=list)
    gain: list = field(default_factory=list)
    posterior_gain: list = field(default_factory=list)
    mean_gain: list = field(default_factory=list)
    mean_quad_update: list = field(default_factory=list)
    mean_control_quad: list = field(default_factory=list)
    mean_control_cross: list = field(default_factory=list)
    mean_control_cross_total: list = field(default_factory=list)
    control_hessian: list = field(default_factory=list)
    mean_control_hessian: list = field(default_factory=list)
    exact: bool = True

    @property
    def dim(self) -> int:
        return self.params.dim

    def obs_matrix(self, n: int) -> np.ndarray:
        """Observation matrix entering the time-n posterior mean.

        Y_n = J_n X_n + noise for n >= 1; Y_0 is independent of X_0, which the
        zero matrix encodes (the posterior mean is then the prior mean).
        """
        d = self.dim
        if n == 0:
            return np.zeros((d, d))
        return self.params.obs_gain[n - 1]

    def to_json_dict(self) -> dict:
        out = {"dim": self.dim, "horizon": self.params.horizon, "exact": self.exact}
        for name in (
            "quad_coeff",
            "mean_coeff",
            "const_coeff",
            "gain",
            "posterior_gain",
            "mean_gain",
        ):
            out[name] = [np.asarray(m).tolist() for m in getattr(self, name)]
        return out


def riccati_backward(params: LQParams) -> RiccatiSolution:
    """Backward sweep computing all value coefficients and feedback matrices.

    Terminal slice: quad_coeff[T] = blkdiag(Q_T, 0), mean_coeff[T] =
    blkdiag(mean-cost_T, 0), const_coeff[T] = 0.  Inverses go through solves
    with a conditioning check that names the offending matrix and time.
    """
    d, T = params.dim, params.horizon
    sol = RiccatiSolution(params=params)
    zeros = np.zeros((d, d))
    eye = np.eye(d)

    def blk(top):
        return np.block([[top, zeros], [zeros, zeros]])

    lam = blk(params.quad[T])
    theta = blk(params.mean_quad[T])
    chi = 0.0
    sol.quad_coeff = [None] * (T + 1)
    sol.mean_coeff = [None] * (T + 1)
    sol.const_coeff = [None] * (T + 1)
    for name in (
        "gain",
        "posterior_gain",
        "mean_gain",
        "mean_quad_update",
        "mean_control_quad",
        "mean_control_cross",
        "mean_control_cross_total",
        "control_hessian",
        "mean_control_hessian",
    ):
        setattr(sol, name, [None] * T)
    sol.quad_coeff[T] = lam
    sol.mean_coeff[T] = theta
    sol.const_coeff[T] = 0.0
    sol.exact = not bool(np.any(params.state_gain != 0.0))

    for n in range(T - 1, -1, -1):
        B = params.state_gain[n]
        Bbar = params.mean_gain[n]
        D = params.control_gain[n]
        J = params.obs_gain[n]  # maps X_{n+1} to Y_{n+1}
        Q = blk(params.quad[n])
        Qbar = blk(params.mean_quad[n])
        R = params.control_quad[n]
        stack = np.vstack([eye, J])  # (2d, d): lifts x' to (x', Jx')
        noise_lift = np.vstack([zeros, eye])  # (2d, d): observation noise slot

        quad_next = _sym(stack.T @ lam @ stack)  # d x d sandwich of quad_coeff
        mean_next = _sym(stack.T @ theta @ stack)
        B2 = np.hstack([B, zeros])  # d x 2d, acts on stacked (x, y)
        Bbar2 = np.hstack([Bbar, zeros])
        Bsum2 = B2 + Bbar2

        control_hessian = _sym(D.T @ quad_next @ D + R)
        mean_control_hessian = _sym(D.T @ (quad_next + mean_next) @ D + R)
        mean_control_quad = _sym(D.T @ mean_next @ D)
        mean_control_cross = Bsum2.T @ mean_next @ D + Bbar2.T @ quad_next @ D
        mean_control_cross_total = mean_control_cross + B2.T @ quad_next @ D
        gain = -_solve(control_hessian, eye, "control Hessian", n)
        posterior_gain = D.T @ quad_next @ B
        mean_response = _solve(
            mean_control_hessian, mean_control_cross_total.T, "mean control Hessian", n
        )  # (d, 2d): average control = -mean_response @ mu_bar
        mean_gain = mean_control_cross - mean_control_cross_total @ _solve(
            mean_control_hessian, mean_control_quad, "mean control Hessian", n
        )

        mean_quad_update = _sym(
            Qbar
            + Bsum2.T @ mean_next @ Bsum2
            + Bbar2.T @ quad_next @ Bbar2
            + B2.T @ quad_next @ Bbar2
            + Bbar2.T @ quad_next @ B2
        )
        # Plugging the optimal average control back into the mean terms.
        hess_inv_mean_gain_t = _solve(control_hessian, mean_gain.T, "control Hessian", n)
        mean_plug = (
            mean_gain @ hess_inv_mean_gain_t
            - mean_control_cross @ mean_response
            - mean_response.T @ mean_control_cross.T
            + mean_response.T @ mean_control_quad @ mean_response
        )
        new_theta = _sym(mean_quad_update) + _sym(mean_plug)
        new_lam = _sym(Q + B2.T @ quad_next @ B2)
        new_chi = (
            float(np.trace(stack.T @ lam @ stack))
            + float(np.trace(noise_lift.T @ lam @ noise_lift))
            + chi
        )

        sol.gain[n] = gain
        sol.posterior_gain[n] = posterior_gain
        sol.mean_gain[n] = mean_gain
        sol.mean_quad_update[n] = mean_quad_update
        sol.mean_control_quad[n] = mean_control_quad
        sol.mean_control_cross[n] = mean_control_cross
        sol.mean_control_cross_total[n] = mean_control_cross_total
        sol.control_hessian[n] = control_hessian
        sol.mean_control_hessian[n] = mean_control_hessian
        sol.quad_coeff[n] = new_lam
        sol.mean_coeff[n] = new_theta
        sol.const_coeff[n] = new_chi
        lam, theta, chi = new_lam, new_theta, new_chi

    return sol


def average_control(sol: RiccatiSolution, n: int, mu_bar) -> np.ndarray:
    """Mean of the optimal feedback over the time-n observation marginal."""
    mu_bar = np.asarray(mu_bar, dtype=float)
    rhs = sol.mean_control_cross_total[n].T @ mu_bar
    return -_solve(sol.mean_control_hessian[n], rhs, "mean control Hessian", n)


def optimal_feedback(sol: RiccatiSolution, n: int, hidden, mu_bar, y) -> np.ndarray:
    """Optimal control at time n given the observation y.

    ``hidden`` describes the unconditional hidden marginal: either a pair
    ``(mean, cov)`` of the Gaussian case or ``(points, weights)`` of a grid
    measure; the one-step posterior mean is evaluated accordingly.
    ``mu_bar`` is the stacked (x, y) mean of the joint time-n marginal.
    """
    J = sol.obs_matrix(n)
    post = _posterior(hidden, J, y)
    mu_bar = np.asarray(mu_bar, dtype=float)
    return sol.gain[n] @ (sol.posterior_gain[n] @ post + sol.mean_gain[n].T @ mu_bar)


def _posterior(hidden, obs_matrix, y):
    from .measures import DiscreteMeasure
    from .model import HiddenLaw

    if isinstance(hidden, HiddenLaw):
        return posterior_mean(
            DiscreteMeasure(hidden.weights), hidden.points, obs_matrix, y
        )
    mean, cov = hidden
    return gaussian_posterior_mean(
        np.atleast_1d(mean), np.atleast_2d(cov), obs_matrix, y
    )


def foc_residual(sol: RiccatiSolution, n: int, moments: MomentPair, mean_control, y_samples, hidden=None) -> float:
    """Max norm of the first-order condition at the analytic feedback.

    The condition at observation y reads
    ``N a_bar + S^T mu_bar + D^T J'^T L J' B PostMean(y) + H a(y) = 0``
    with H the control Hessian.  ``mean_control`` is the average control
    entering the mean coupling; passing the analytic average makes the
    residual vanish to rounding.
    """
    d = sol.dim
    mu_bar = moments.mean
    if hidden is None:
        cov_joint = moments.cov()
        hidden = (mu_bar[:d], cov_joint[:d, :d])
    mean_control = np.asarray(mean_control, dtype=float)
    worst = 0.0
    for y in np.atleast_2d(np.asarray(y_samples, dtype=float)):
        a_star = optimal_feedback(sol, n, hidden, mu_bar, y)
        resid = foc_lhs(sol, n, hidden, mu_bar, mean_control, y, a_star)
        worst = max(worst, float(np.max(np.abs(resid))))
    return worst


def foc_lhs(sol: RiccatiSolution, n: int, hidden, mu_bar, mean_control, y, control) -> np.ndarray:
    """Left side of the first-order condition at an arbitrary control value."""
    J = sol.obs_matrix(n)
    post = _posterior(hidden, J, y)
    return (
        sol.mean_control_quad[n] @ np.asarray(mean_control, dtype=float)
        + sol.mean_control_cross[n].T @ np.asarray(mu_bar, dtype=float)
        + sol.posterior_gain[n] @ post
        + sol.control_hessian[n] @ np.asarray(control, dtype=float)
    )


def w0_value(sol: RiccatiSolution, initial_moments: MomentPair) -> float:
    """Value of the problem at the initial joint moments.

    ``trace(quad_coeff[0] @ quad) + mean^T mean_coeff[0] mean + const_coeff[0]``.
    """
    lam0 = sol.quad_coeff[0]
    theta0 = sol.mean_coeff[0]
    m = initial_moments.mean
    return float(
        np.trace(lam0 @ initial_moments.quad) + m @ theta0 @ m + sol.const_coeff[0]
    )


def standard_initial_moments(dim: int) -> MomentPair:
    """Moments of independent standard normal X_0, Y_0 (the benchmark law)."""
    return MomentPair(mean=np.zeros(2 * dim), quad=np.eye(2 * dim))
