import numpy as np
import pytest

from oclearn import ilqc, lq
from oclearn import policy_gradient as pg
from oclearn.errors import DivergenceError, SingularDesignError, ZeroCurvatureError


def scalar_plant(a=0.9, b=1.0):
    sys = ilqc.NonlinearDiscreteSystem.linear([[a]], [[b]])
    cost = ilqc.quadratic_stage_cost([[1.0]], [[1.0]], [[1.0]])
    return sys, cost


class TestReturns:
    def test_zero_cost(self):
        sys, _ = scalar_plant()
        zero = ilqc.StageCostModel(lambda n, x, u: 0.0, lambda x: 0.0)
        assert pg.evaluate_return(sys, zero, pg.linear_feedback(1, 1), [0.3], [1.0], 10) == 0.0

    def test_deterministic_matches_lq_evaluation(self, rng):
        A = np.array([[1.0, 0.1], [0.0, 1.0]])
        B = np.array([[0.0], [0.1]])
        Q, R = np.diag([1.0, 0.5]), np.array([[0.2]])
        sys = ilqc.NonlinearDiscreteSystem.linear(A, B)
        cost = ilqc.quadratic_stage_cost(Q, R, Q)
        pol = pg.linear_feedback(1, 2)
        theta = np.array([-1.0, -1.5])
        x0 = np.array([1.0, -0.5])
        got = pg.evaluate_return(sys, cost, pol, theta, x0, 30)
        exact = lq.linear_policy_cost(lq.LinearSystemDiscrete(A, B), lq.QuadraticCost(Q, R, Q_final=Q),
                                      theta.reshape(1, 2), x0, horizon=30)
        assert got == pytest.approx(exact, rel=1e-10)

    def test_stochastic_mean_matches_expectation(self):
        sys, cost = scalar_plant(a=1.0)
        s, theta, x0 = 0.3, -0.4, 1.0
        expected = 0.5 * x0 ** 2 * (1 + theta ** 2) + 0.5 * ((1 + theta) ** 2 * x0 ** 2 + s ** 2)
        R = np.array([pg.evaluate_return(sys, cost, pg.linear_feedback(1, 1), [theta], [x0], 1, seed=k,
                                         noise=lambda g, n: s * g.standard_normal(1)) for k in range(10_000)])
        assert abs(R.mean() - expected) < 3 * R.std(ddof=1) / np.sqrt(R.size)

    def test_divergence(self):
        sys, cost = scalar_plant(a=1e100)
        with pytest.raises(DivergenceError):
            pg.evaluate_return(sys, cost, pg.linear_feedback(1, 1), [0.0], [1.0], 10)


class TestCoordinateDifferences:
    def test_scalar_examples(self):
        J = lambda th: float(th[0] ** 2)
        assert pg.fd_coordinate_gradient(J, [1.0], 0.01, "double").grad[0] == pytest.approx(2.0, abs=1e-9)
        assert pg.fd_coordinate_gradient(J, [1.0], 0.01, "single").grad[0] == pytest.approx(2.01, abs=1e-9)
        const = pg.fd_coordinate_gradient(lambda th: 3.0, [1.0, 2.0], 0.1, "single")
        assert not const.grad.any() and const.value == 3.0

    def test_evaluation_counts(self):
        calls = []

        def J(th):
            calls.append(th.copy())
            return float(th.sum())
        pg.fd_coordinate_gradient(J, np.zeros(4), 0.1, "single")
        assert len(calls) == 5
        calls.clear()
        pg.fd_coordinate_gradient(J, np.zeros(4), 0.1, "double")
        assert len(calls) == 8

    def test_quadratic_exact_for_any_step(self, rng):
        M = rng.normal(size=(3, 3))
        H = M @ M.T
        b = rng.normal(size=3)
        theta = rng.normal(size=3)
        J = lambda th: 0.5 * th @ H @ th + b @ th
        for delta in (1e-4, 1e-3, 1e-2, 1e-1):
            est = pg.fd_coordinate_gradient(J, theta, delta, "double")
            assert np.abs(est.grad - (H @ theta + b)).max() < 1e-8

    def test_second_order_convergence(self):
        J = lambda th: float(np.exp(th[0]) * np.sin(th[1]))
        theta = np.array([0.3, 0.7])
        exact = np.array([np.exp(0.3) * np.sin(0.7), np.exp(0.3) * np.cos(0.7)])
        e1 = np.abs(pg.fd_coordinate_gradient(J, theta, 0.1).grad - exact).max()
        e2 = np.abs(pg.fd_coordinate_gradient(J, theta, 0.05).grad - exact).max()
        assert e1 / e2 >= 3.5

    def test_non_finite_probe_names_coordinate(self):
        J = lambda th: np.inf if th[1] > 0.5 else 0.0
        with pytest.raises(DivergenceError, match="coordinate 1"):
            pg.fd_coordinate_gradient(J, [0.0, 0.45], 0.1, "double")


class TestRandomPerturbations:
    def test_linear_example(self):
        batch = pg.PerturbationBatch([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]], [1.0, 2.0, -3.0])
        est = pg.fd_random_gradient(batch)
        np.testing.assert_allclose(est.grad, [1.0, 2.0], atol=1e-14)
        assert abs(est.value) < 1e-14

    def test_parallel_perturbations(self):
        batch = pg.PerturbationBatch([[1.0, 1.0], [2.0, 2.0]], [1.0, 2.0])
        with pytest.raises(SingularDesignError):
            pg.fd_random_gradient(batch)
        est = pg.fd_random_gradient(batch, ridge=1e-3)
        assert np.all(np.isfinite(est.grad)) and est.ill_conditioned

    def test_affine_exact_on_random_instances(self):
        for seed in range(100):
            g = np.random.default_rng(seed)
            p = int(g.integers(1, 6))
            N = p + 1 + int(g.integers(0, 5))
            grad, J0 = g.normal(size=p), g.normal()
            theta = g.normal(size=p)
            D = g.normal(size=(N, p))
            R = J0 + grad @ theta + D @ grad
            est = pg.fd_random_gradient(pg.PerturbationBatch(D, R))
            assert np.abs(est.grad - grad).max() < 1e-9
            assert abs(est.value - (J0 + grad @ theta)) < 1e-9


class TestDescent:
    def test_quadratic_bowl(self):
        res = pg.gradient_descent_fd(lambda th, s: float(th @ th), np.ones(3), perturbations=8, iterations=100,
                                     lr=0.2, explore_std=0.01, ridge=1e-6, seed=0)
        assert np.linalg.norm(res.theta) < 1e-2 and not res.diverged
        assert res.theta_history.shape == (101, 3)

    def test_zero_learning_rate_keeps_theta(self):
        res = pg.gradient_descent_fd(lambda th, s: float(th @ th), [1.0, -2.0], 4, 5, lr=0.0, seed=1)
        assert np.all(res.theta_history == [1.0, -2.0])

    def test_convex_descent_is_monotone(self):
        H = np.diag([1.0, 3.0])
        J = lambda th, s: float(0.5 * th @ H @ th)
        res = pg.gradient_descent_fd(J, [1.0, 1.0], 10, 40, lr=0.2, explore_std=1e-3, seed=2)
        values = np.array([J(th, 0) for th in res.theta_history])
        # below ~c^2 the fitted gradient is dominated by curvature seen through the perturbations
        above = values[values > 1e-5]
        assert above.size > 10 and np.all(np.diff(above) <= 0)
        assert values[-1] < 1e-5

    def test_learns_lqr_gain(self):
        a, b = 0.9, 1.0
        sys, _ = scalar_plant(a, b)
        cost = ilqc.quadratic_stage_cost([[1.0]], [[1.0]], [[0.0]])
        R = pg.return_function(sys, cost, pg.linear_feedback(1, 1), [1.0], 60)
        ref = lq.lqr_discrete_infinite(lq.LinearSystemDiscrete([[a]], [[b]]),
                                       lq.QuadraticCost([[1.0]], [[1.0]])).K[0, 0]
        res = pg.gradient_descent_fd(R, [0.0], 4, 100, lr=0.05, explore_std=0.05, seed=0)
        assert abs(res.theta[0] / ref - 1) < 0.1

    def test_divergence_stops_early(self):
        sys, cost = scalar_plant(a=1e100)
        R = pg.return_function(sys, cost, pg.linear_feedback(1, 1), [1.0], 10)
        res = pg.gradient_descent_fd(R, [0.0], 3, 5, seed=0)
        assert res.diverged and res.theta_history.shape[0] == 1

    def test_workers_and_csv(self):
        J = lambda th, s: float(th @ th) + 0.01 * np.random.default_rng(s).normal()
        a = pg.gradient_descent_fd(J, [1.0, 1.0], 6, 4, seed=3)
        b = pg.gradient_descent_fd(J, [1.0, 1.0], 6, 4, seed=3, workers=3)
        np.testing.assert_array_equal(a.theta_history, b.theta_history)
        assert a.to_csv() == b.to_csv()
        assert a.to_csv().splitlines()[0] == "iter,J_est,grad_norm"


class TestNewton:
    def test_quadratic_one_step(self):
        for x0 in (-7.0, 0.0, 3.5, 100.0):
            res = pg.newton_raphson_1d(lambda x: 2 * x - 4, lambda x: 2.0, x0)
            assert res.x == 2.0 and res.iterations == 1 and res.converged

    def test_sine_root(self):
        res = pg.newton_raphson_1d(np.sin, np.cos, 3.0)
        assert abs(res.x - np.pi) < 1e-10 and res.converged

    def test_start_at_root(self):
        res = pg.newton_raphson_1d(lambda x: x - 1.5, lambda x: 1.0, 1.5)
        assert res.x == 1.5 and res.iterations == 0

    def test_zero_curvature(self):
        with pytest.raises(ZeroCurvatureError):
            pg.newton_raphson_1d(lambda x: 1.0, lambda x: 0.0, 0.0)
