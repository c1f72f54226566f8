import numpy as np
import pytest

from mfcontrol.lq_analytic import (
    average_control,
    foc_lhs,
    foc_residual,
    optimal_feedback,
    riccati_backward,
    standard_initial_moments,
    w0_value,
)
from mfcontrol.measures import MomentPair
from mfcontrol.model import LQParams, paper_benchmark_lq_params


def make_params(
    dim=1,
    horizon=1,
    B=None,
    Bbar=None,
    D=None,
    J=None,
    Q=None,
    Qbar=None,
    R=None,
):
    eye = np.eye(dim)
    zero = np.zeros((dim, dim))
    return LQParams(
        dim=dim,
        horizon=horizon,
        state_gain=zero if B is None else np.asarray(B, dtype=float),
        mean_gain=zero if Bbar is None else np.asarray(Bbar, dtype=float),
        control_gain=eye if D is None else np.asarray(D, dtype=float),
        obs_gain=eye if J is None else np.asarray(J, dtype=float),
        quad=eye if Q is None else np.asarray(Q, dtype=float),
        mean_quad=zero if Qbar is None else np.asarray(Qbar, dtype=float),
        control_quad=eye if R is None else np.asarray(R, dtype=float),
    )


def random_admissible_params(rng, dim=2, horizon=3, zero_state_gain=False):
    def psd(scale=1.0):
        m = rng.standard_normal((dim, dim))
        return scale * (m @ m.T) / dim

    def invertible():
        while True:
            m = rng.standard_normal((dim, dim))
            if np.linalg.cond(m) < 50:
                return m

    return LQParams(
        dim=dim,
        horizon=horizon,
        state_gain=np.zeros((dim, dim)) if zero_state_gain else 0.5 * rng.standard_normal((dim, dim)),
        mean_gain=0.5 * rng.standard_normal((dim, dim)),
        control_gain=invertible(),
        obs_gain=invertible(),
        quad=psd(),
        mean_quad=psd(0.5),
        control_quad=psd() + np.eye(dim),
    )


def push_moments_constant_control(params, n, moments, a):
    """Exact one-step pushed moments of the stacked pair for a constant control.

    x' = B x + Bbar x_bar + D a + eps,  y' = J x' + eta, both noises standard
    normal.  Returns the new MomentPair.
    """
    d = params.dim
    B, Bbar = params.state_gain[n], params.mean_gain[n]
    D, J = params.control_gain[n], params.obs_gain[n]
    mean = moments.mean
    quad = moments.quad
    m_x = mean[:d]
    q_xx = quad[:d, :d]
    shift = Bbar @ m_x + D @ a
    m_xn = B @ m_x + shift
    q_xn = (
        B @ q_xx @ B.T
        + np.outer(B @ m_x, shift)
        + np.outer(shift, B @ m_x)
        + np.outer(shift, shift)
        + np.eye(d)
    )
    m_yn = J @ m_xn
    q_yn = J @ q_xn @ J.T + np.eye(d)
    q_xy = q_xn @ J.T
    new_mean = np.concatenate([m_xn, m_yn])
    new_quad = np.block([[q_xn, q_xy], [q_xy.T, q_yn]])
    return MomentPair(mean=new_mean, quad=(new_quad + new_quad.T) / 2)


def stage_cost_constant(params, n, moments, a):
    d = params.dim
    q_xx = moments.quad[:d, :d]
    m_x = moments.mean[:d]
    return (
        float(np.trace(params.quad[n] @ q_xx))
        + float(m_x @ params.mean_quad[n] @ m_x)
        + float(a @ params.control_quad[n] @ a)
    )


def ansatz_value(sol, n, moments):
    return float(
        np.trace(sol.quad_coeff[n] @ moments.quad)
        + moments.mean @ sol.mean_coeff[n] @ moments.mean
        + sol.const_coeff[n]
    )


class TestTerminalAndDegenerate:
    def test_terminal_slice(self):
        params = make_params(dim=2, horizon=2, Q=np.diag([1.0, 2.0]), Qbar=np.diag([0.5, 0.5]))
        sol = riccati_backward(params)
        want_lam = np.zeros((4, 4)); want_lam[:2, :2] = np.diag([1.0, 2.0])
        want_theta = np.zeros((4, 4)); want_theta[:2, :2] = np.diag([0.5, 0.5])
        np.testing.assert_allclose(sol.quad_coeff[2], want_lam)
        np.testing.assert_allclose(sol.mean_coeff[2], want_theta)
        assert sol.const_coeff[2] == 0.0

    def test_zero_continuation(self):
        # Terminal cost zero: gain = -R^{-1}, posterior gain 0, const carries.
        params = make_params(dim=2, horizon=1, R=np.diag([2.0, 4.0]))
        params.quad[-1] = 0.0
        params.mean_quad[-1] = 0.0
        sol = riccati_backward(params)
        np.testing.assert_allclose(sol.gain[0], -np.diag([0.5, 0.25]))
        np.testing.assert_allclose(sol.posterior_gain[0], 0.0)
        assert sol.const_coeff[0] == pytest.approx(0.0)
        want = np.zeros((4, 4)); want[:2, :2] = np.eye(2)
        np.testing.assert_allclose(sol.quad_coeff[0], want)

    def test_zero_costs_zero_value(self):
        params = make_params(dim=1, horizon=3, Q=np.zeros((1, 1)), R=np.eye(1))
        params.quad[:] = 0.0
        sol = riccati_backward(params)
        assert w0_value(sol, standard_initial_moments(1)) == pytest.approx(0.0)


class TestScalarHandCase:
    def test_unit_scalar_case(self):
        # d=1, T=1, B=Bbar=0, D=J=Q=Qbar=R=1.  Direct computation:
        # cost = Q x0^2 + Qbar E[x0]^2 + R a^2 + Q x1^2 + Qbar E[x1]^2 with
        # x1 = a(y0) + eps; optimum a = 0; value at standard moments = 2.
        params = make_params(Qbar=np.eye(1))
        sol = riccati_backward(params)
        assert w0_value(sol, standard_initial_moments(1)) == pytest.approx(2.0, abs=1e-12)

    def test_mean_coupling_hand_case(self):
        # d=1, T=1, B=0, Bbar=1: optimum constant control -2/3 xbar and
        # value q + (5/3) xbar^2 + 1 at moments (q, xbar); worked by hand.
        params = make_params(Bbar=np.eye(1), Qbar=np.eye(1))
        sol = riccati_backward(params)
        assert sol.mean_coeff[0][0, 0] == pytest.approx(5.0 / 3.0, abs=1e-12)
        assert sol.const_coeff[0] == pytest.approx(1.0, abs=1e-12)
        xbar = 0.7
        abar = average_control(sol, 0, np.array([xbar, 0.0]))
        assert abar[0] == pytest.approx(-2.0 / 3.0 * xbar, abs=1e-12)


class TestPSDInvariants:
    @pytest.mark.parametrize("zero_state_gain", [True, False])
    def test_psd_across_random_draws(self, zero_state_gain):
        rng = np.random.default_rng(7)
        for _ in range(50):
            params = random_admissible_params(rng, zero_state_gain=zero_state_gain)
            sol = riccati_backward(params)
            for n in range(params.horizon + 1):
                lam = sol.quad_coeff[n]
                np.testing.assert_allclose(lam, lam.T, atol=1e-10)
                assert np.linalg.eigvalsh(lam).min() >= -1e-9
                both = lam + sol.mean_coeff[n]
                assert np.linalg.eigvalsh((both + both.T) / 2).min() >= -1e-9


class TestFOC:
    def test_residual_vanishes_at_feedback(self):
        rng = np.random.default_rng(3)
        params = random_admissible_params(rng, dim=2, horizon=3)
        sol = riccati_backward(params)
        moments = standard_initial_moments(2)
        ys = rng.standard_normal((12, 2))
        for n in range(params.horizon):
            abar = average_control(sol, n, moments.mean)
            res = foc_residual(sol, n, moments, abar, ys)
            scale = 1.0 + max(
                np.linalg.norm(sol.control_hessian[n]),
                np.linalg.norm(sol.mean_control_cross[n]),
            )
            assert res <= 1e-8 * scale

    def test_perturbation_lower_bound(self):
        # Residual at a* + delta is H delta, bounded below by the smallest
        # Hessian eigenvalue times |delta|.
        rng = np.random.default_rng(4)
        params = random_admissible_params(rng, dim=2, horizon=2)
        sol = riccati_backward(params)
        moments = standard_initial_moments(2)
        n = 0
        y = np.array([0.3, -0.4])
        hidden = (moments.mean[:2], moments.cov()[:2, :2])
        abar = average_control(sol, n, moments.mean)
        a_star = optimal_feedback(sol, n, hidden, moments.mean, y)
        lo = np.linalg.eigvalsh(sol.control_hessian[n]).min()
        delta = 1e-2
        for coord in range(2):
            bump = np.zeros(2); bump[coord] = delta
            res = foc_lhs(sol, n, hidden, moments.mean, abar, y, a_star + bump)
            assert np.linalg.norm(res) >= lo * delta - 1e-12

    def test_residual_linear_growth(self):
        rng = np.random.default_rng(5)
        params = random_admissible_params(rng, dim=2, horizon=2)
        sol = riccati_backward(params)
        moments = standard_initial_moments(2)
        y = np.array([0.1, 0.9])
        hidden = (moments.mean[:2], moments.cov()[:2, :2])
        abar = average_control(sol, 0, moments.mean)
        a_star = optimal_feedback(sol, 0, hidden, moments.mean, y)
        direction = rng.standard_normal(2)
        direction /= np.linalg.norm(direction)
        res = []
        deltas = [1e-4, 2e-4, 4e-4]
        for d in deltas:
            r = foc_lhs(sol, 0, hidden, moments.mean, abar, y, a_star + d * direction)
            res.append(np.linalg.norm(r))
        # Linear growth: residual doubles with the step.
        assert res[1] == pytest.approx(2 * res[0], rel=1e-6)
        assert res[2] == pytest.approx(4 * res[0], rel=1e-6)


class TestFeedbackShape:
    def test_zero_posterior_gain_and_mean(self):
        params = make_params(dim=2, horizon=1)  # B = 0 -> posterior gain 0
        sol = riccati_backward(params)
        hidden = (np.zeros(2), np.eye(2))
        for y in np.random.default_rng(0).standard_normal((5, 2)):
            a = optimal_feedback(sol, 0, hidden, np.zeros(4), y)
            np.testing.assert_allclose(a, 0.0, atol=1e-14)

    def test_affine_in_observation(self):
        rng = np.random.default_rng(6)
        params = random_admissible_params(rng, dim=2, horizon=2)
        sol = riccati_backward(params)
        hidden = (np.array([0.2, -0.1]), 0.5 * np.eye(2))
        mu_bar = rng.standard_normal(4)
        y0 = rng.standard_normal(2)
        d = rng.standard_normal(2)
        a0 = optimal_feedback(sol, 1, hidden, mu_bar, y0)
        a1 = optimal_feedback(sol, 1, hidden, mu_bar, y0 + d)
        a2 = optimal_feedback(sol, 1, hidden, mu_bar, y0 + 2 * d)
        np.testing.assert_allclose(a2 - a1, a1 - a0, atol=1e-10)

    def test_benchmark_feedback_at_centered_measure(self):
        # Benchmark config has zero state gain: the feedback at a centered
        # marginal is exactly zero; frozen regression value.
        params = paper_benchmark_lq_params()
        sol = riccati_backward(params)
        n = params.horizon - 1
        hidden = (np.zeros(2), np.eye(2))
        a = optimal_feedback(sol, n, hidden, np.zeros(4), np.zeros(2))
        np.testing.assert_allclose(a, 0.0, atol=1e-14)


class TestBellmanOneStep:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_one_step_consistency_d1(self, seed):
        # For zero state gain the quadratic value closes exactly: the ansatz
        # at time n equals the min over constant controls of stage cost plus
        # the pushed ansatz at n+1 (constants are optimal there).
        rng = np.random.default_rng(seed)
        params = random_admissible_params(rng, dim=1, horizon=3, zero_state_gain=True)
        sol = riccati_backward(params)
        assert sol.exact
        mean = rng.standard_normal(2)
        cov = rng.standard_normal((2, 2))
        cov = cov @ cov.T + 0.2 * np.eye(2)
        moments = MomentPair(mean=mean, quad=cov + np.outer(mean, mean))
        for n in range(params.horizon):
            target = ansatz_value(sol, n, moments)

            def objective(a_val):
                a = np.atleast_1d(a_val)
                pushed = push_moments_constant_control(params, n, moments, a)
                return stage_cost_constant(params, n, moments, a) + ansatz_value(
                    sol, n + 1, pushed
                )

            grid_pts = np.linspace(-8, 8, 3001)
            vals = [objective(a) for a in grid_pts]
            k = int(np.argmin(vals))
            # Parabolic refinement around the dense-grid minimum.
            a_lo, a_hi = grid_pts[max(k - 1, 0)], grid_pts[min(k + 1, 3000)]
            fine = np.linspace(a_lo, a_hi, 2001)
            best = min(objective(a) for a in fine)
            assert best == pytest.approx(target, rel=1e-6, abs=1e-8)

    def test_w0_matches_direct_forward_cost(self):
        # Unit scalar case with the known optimum a = 0: forward moments give
        # the same number as the ansatz.
        params = make_params(Qbar=np.eye(1), horizon=2)
        sol = riccati_backward(params)
        moments = standard_initial_moments(1)
        total = 0.0
        cur = moments
        for n in range(2):
            a = average_control(sol, n, cur.mean)
            total += stage_cost_constant(params, n, cur, a)
            cur = push_moments_constant_control(params, n, cur, a)
        total += float(np.trace(params.quad[-1] @ cur.quad[:1, :1])) + float(
            cur.mean[:1] @ params.mean_quad[-1] @ cur.mean[:1]
        )
        assert total == pytest.approx(w0_value(sol, moments), rel=1e-10)


class TestScalingAndValues:
    def test_cost_scaling(self):
        rng = np.random.default_rng(8)
        base = random_admissible_params(rng, dim=2, horizon=2, zero_state_gain=True)
        sol1 = riccati_backward(base)
        for s in (0.5, 2.0):
            scaled = LQParams(
                dim=2,
                horizon=2,
                state_gain=base.state_gain,
                mean_gain=base.mean_gain,
                control_gain=base.control_gain,
                obs_gain=base.obs_gain,
                quad=s * base.quad,
                mean_quad=s * base.mean_quad,
                control_quad=s * base.control_quad,
            )
            sol2 = riccati_backward(scaled)
            for n in range(3):
                np.testing.assert_allclose(
                    sol2.quad_coeff[n], s * sol1.quad_coeff[n], atol=1e-9
                )
                np.testing.assert_allclose(
                    sol2.mean_coeff[n], s * sol1.mean_coeff[n], atol=1e-9
                )
                assert sol2.const_coeff[n] == pytest.approx(
                    s * sol1.const_coeff[n], rel=1e-12, abs=1e-12
                )
            hidden = (np.array([0.1, 0.2]), np.eye(2))
            mu_bar = np.array([0.1, 0.2, -0.3, 0.4])
            y = np.array([0.5, -0.5])
            a1 = optimal_feedback(sol1, 0, hidden, mu_bar, y)
            a2 = optimal_feedback(sol2, 0, hidden, mu_bar, y)
            np.testing.assert_allclose(a1, a2, atol=1e-10)

    def test_w0_standard_moments_is_trace_plus_const(self):
        rng = np.random.default_rng(9)
        params = random_admissible_params(rng, dim=2, horizon=2, zero_state_gain=True)
        sol = riccati_backward(params)
        val = w0_value(sol, standard_initial_moments(2))
        assert val == pytest.approx(
            float(np.trace(sol.quad_coeff[0])) + sol.const_coeff[0], rel=1e-12
        )

    def test_benchmark_value_is_eight(self):
        # Reference value of the d=2, T=3 benchmark configuration: costs of
        # the uncontrolled standard-normal chain, 2 per time slice.
        sol = riccati_backward(paper_benchmark_lq_params())
        assert w0_value(sol, standard_initial_moments(2)) == pytest.approx(8.0, abs=1e-10)
