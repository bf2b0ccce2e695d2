import numpy as np
import pytest

from oclearn import lq
from oclearn import tabular_rl as rl
from oclearn import testbeds as tb
from oclearn.errors import InvalidSpecError, LmdpConditionError
from oclearn.path_integral import estimate_desirability

GOLDEN = (1 + np.sqrt(5)) / 2


class TestScalarLq:
    def test_golden_ratio_instance(self):
        sys, cost = tb.make_scalar_lq()
        assert lq.lqr_discrete_infinite(sys, cost).S[0, 0] == pytest.approx(GOLDEN, abs=1e-9)

    def test_terminal_weight(self):
        _, cost = tb.make_scalar_lq(q_T=0.0)
        assert cost.Q_final[0, 0] == 0.0
        _, cost = tb.make_scalar_lq(q=2.0)
        assert cost.Q_final[0, 0] == 2.0

    def test_rejects_nonpositive_r(self):
        with pytest.raises(InvalidSpecError):
            tb.make_scalar_lq(r=0.0)


class TestDoubleIntegrator:
    def test_unit_step(self):
        sys, _ = tb.make_double_integrator(dt=1.0)
        np.testing.assert_array_equal(sys.A, [[1.0, 1.0], [0.0, 1.0]])
        np.testing.assert_array_equal(sys.B, [[0.5], [1.0]])

    def test_zero_step(self):
        sys, _ = tb.make_double_integrator(dt=0.0)
        np.testing.assert_array_equal(sys.A, np.eye(2))
        assert not sys.B.any()

    def test_matches_constant_input_motion(self):
        dt, u = 0.3, 2.0
        sys, _ = tb.make_double_integrator(dt=dt)
        x = sys.A @ [1.0, -0.5] + sys.B[:, 0] * u
        np.testing.assert_allclose(x, [1.0 - 0.5 * dt + 0.5 * u * dt ** 2, -0.5 + u * dt], atol=1e-15)


class TestPendulum:
    def test_upright_equilibrium(self):
        p = tb.make_pendulum()
        x = np.array([np.pi, 0.0])
        np.testing.assert_allclose(p.step(0, x, [0.0]), x, atol=1e-14)

    def test_jacobian_at_downward_equilibrium(self):
        m, l, d, dt = 1.3, 0.7, 0.2, 0.01
        p = tb.make_pendulum(m, l, d, dt)
        w2 = tb.GRAVITY / l
        linear = np.array([[1 - dt ** 2 * w2, dt * (1 - d * dt)], [-dt * w2, 1 - d * dt]])
        np.testing.assert_allclose(p.jac_x(0, np.zeros(2), [0.0]), linear, atol=1e-6)
        np.testing.assert_allclose(p.jac_u(0, np.zeros(2), [0.0])[:, 0], [dt ** 2 / (m * l * l), dt / (m * l * l)])

    def test_jacobians_match_finite_differences(self, rng):
        p = tb.make_pendulum(damping=0.3)
        h = 1e-6
        for _ in range(5):
            x, u = rng.normal(size=2), rng.normal(size=1)
            fd_x = np.column_stack([(p.step(0, x + h * e, u) - p.step(0, x - h * e, u)) / (2 * h) for e in np.eye(2)])
            fd_u = (p.step(0, x, u + h) - p.step(0, x, u - h))[:, None] / (2 * h)
            np.testing.assert_allclose(p.jac_x(0, x, u), fd_x, atol=1e-8)
            np.testing.assert_allclose(p.jac_u(0, x, u), fd_u, atol=1e-8)

    @pytest.mark.parametrize("damping", [0.01, 0.1, 0.5])
    def test_energy_decays_without_input(self, damping):
        p = tb.make_pendulum(damping=damping)
        x = np.array([2.5, 0.0])
        energy = []
        for n in range(1000):
            energy.append(p.energy(x))
            x = p.step(n, x, [0.0])
        # the discrete map oscillates within a swing, so compare per-window maxima
        peaks = np.array(energy).reshape(-1, 50).max(axis=1)
        assert np.all(np.diff(peaks) <= 1e-12) and peaks[-1] < peaks[0]

    def test_invalid_parameters(self):
        with pytest.raises(InvalidSpecError):
            tb.make_pendulum(m=0.0)

    def test_swingup_instance(self):
        task = tb.make_pendulum_swingup()
        assert task.horizon == 100 and task.system.state_dim == 2
        assert task.cost.terminal(np.array([np.pi, 0.0])) == pytest.approx(0.0)


class TestLmdp:
    def test_lambda(self):
        assert tb.make_lmdp_scalar(r=1.0, sigma=1.0).lam == 1.0
        assert tb.make_lmdp_scalar(r=2.0, sigma=0.5).lam == pytest.approx(1.0)
        assert tb.make_lmdp_scalar(r=3.0, sigma=2.0).lam == pytest.approx(6.0)

    def test_diagonal_condition(self):
        assert tb.make_lmdp_diagonal([0.1, 0.2], [1.0, 2.0], [2.0, 1.0], [1.0, 1.0]).lam == pytest.approx(2.0)
        with pytest.raises(LmdpConditionError):
            tb.make_lmdp_diagonal([0.1, 0.2], [1.0, 2.0], [1.0, 1.0], [1.0, 1.0])

    def test_zero_cost_has_unit_desirability(self):
        prob = tb.make_lmdp_scalar(q=0.0, phi_T=0.0, T=0.2)
        est = estimate_desirability(prob, 0.0, [0.7], 100, seed=0)
        assert est.value == 1.0 and est.se == 0.0

    def test_reaching_task(self):
        prob = tb.make_point_mass_reaching()
        assert prob.terminal(np.array([1.0, 0.0])) == 0.0
        assert prob.grid.steps == 100


class TestGridworld:
    def test_two_cells(self):
        mdp = tb.make_gridworld(2, 1, terminals=[])
        assert mdp.num_states == 2 and mdp.num_actions == 4
        np.testing.assert_allclose(mdp.P.sum(axis=2), 1.0)
        # N, S and W from the left cell hit walls; E moves right
        np.testing.assert_array_equal(mdp.P[:, 0, 0], [1, 1, 0, 1])

    def test_slip_rows_sum_to_one(self):
        mdp = tb.make_gridworld(3, 3, slip=0.2)
        np.testing.assert_allclose(mdp.P.sum(axis=2), 1.0, atol=1e-12)

    def test_value_iteration_matches_enumeration(self):
        mdp = tb.make_gridworld(2, 2, terminals=[(1, 1)])
        vi = rl.value_iteration(mdp, 1e-12)
        brute = rl.optimal_by_enumeration(mdp)
        np.testing.assert_allclose(vi.V, brute.V, atol=1e-9)

    def test_terminal_values_are_zero(self):
        mdp = tb.make_gridworld()
        V = rl.value_iteration(mdp).V
        assert V[0] == 0.0 and V[15] == 0.0
        # one step from a goal costs nothing, two steps cost one move
        assert V[1] == 0.0 and V[2] == pytest.approx(-1.0)

    def test_bad_terminal(self):
        with pytest.raises(InvalidSpecError):
            tb.make_gridworld(2, 2, terminals=[(5, 5)])


class TestRegistry:
    def test_every_key_builds(self):
        for name in tb.TESTBEDS:
            assert tb.make(name) is not None

    def test_parameters_pass_through(self):
        assert tb.make("gridworld", width=3, height=2).num_states == 6

    def test_unknown_key(self):
        with pytest.raises(InvalidSpecError):
            tb.make("cartpole")

    def test_pure(self):
        a, b = tb.make("gridworld"), tb.make("gridworld")
        np.testing.assert_array_equal(a.P, b.P)
        np.testing.assert_array_equal(a.R, b.R)
