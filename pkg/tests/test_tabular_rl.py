import itertools

import numpy as np
import pytest
from scipy import stats

from oclearn import tabular_rl as rl
from oclearn import testbeds as tb
from oclearn.errors import EpisodeCapError, InvalidSpecError, NoPathError, SingularSystemError


def random_mdp(seed, X=5, U=2, alpha=0.9, nonneg=False):
    g = np.random.default_rng(seed)
    P = g.random((U, X, X)) ** 3
    P /= P.sum(axis=2, keepdims=True)
    R = g.random((U, X, X)) if nonneg else g.normal(size=(U, X, X))
    return rl.TabularMdp(P, R, alpha)


def single_state(r=1.0, alpha=0.5):
    return rl.TabularMdp(np.ones((1, 1, 1)), [[[r]]], alpha)


def optimal_set_agreement(mdp, Qstar, policy, tol=1e-6):
    states = np.flatnonzero(mdp.nonterminal)
    return np.mean([Qstar[x, policy[x]] >= Qstar[x].max() - tol for x in states])


class TestMdp:
    def test_validation(self):
        with pytest.raises(InvalidSpecError):
            rl.TabularMdp(np.full((1, 2, 2), 0.6), 0.0, 0.9)
        with pytest.raises(InvalidSpecError):
            rl.TabularMdp(np.ones((1, 1, 1)), 0.0, 1.5)

    def test_text_round_trip(self):
        mdp = random_mdp(0, X=3)
        again = rl.TabularMdp.from_text(mdp.to_text())
        np.testing.assert_array_equal(again.P, mdp.P)
        np.testing.assert_array_equal(again.R, mdp.R)
        grid = tb.make_gridworld(2, 2, terminals=[(1, 1)])
        assert rl.TabularMdp.from_text(grid.to_text()).terminal == grid.terminal

    def test_text_errors_name_the_line(self):
        with pytest.raises(InvalidSpecError, match="line 3"):
            rl.TabularMdp.from_text("1,1,0.5\nP 0 0 0 1\nQ 0 0 0 1\n")
        with pytest.raises(InvalidSpecError, match="line 1"):
            rl.TabularMdp.from_text("states\n")


class TestEvaluation:
    def test_geometric_series(self):
        mdp = single_state()
        assert rl.policy_evaluation_exact(mdp, [0])[0] == pytest.approx(2.0)
        assert rl.policy_evaluation_iterative(mdp, [0]).V[0] == pytest.approx(2.0, abs=1e-9)

    def test_zero_discount_is_expected_reward(self):
        mdp = random_mdp(1, alpha=0.0)
        pi = rl.epsilon_greedy(np.random.default_rng(1).normal(size=(5, 2)), 0.3)
        expected = (pi * mdp.expected_reward()).sum(axis=1)
        np.testing.assert_allclose(rl.policy_evaluation_exact(mdp, pi), expected, atol=1e-14)
        np.testing.assert_allclose(rl.policy_evaluation_iterative(mdp, pi).V, expected, atol=1e-14)

    def test_identity_transitions(self):
        mdp = rl.TabularMdp(np.eye(3)[None], 2.5, 0.9)
        np.testing.assert_allclose(rl.policy_evaluation_exact(mdp, [0, 0, 0]), 25.0)

    def test_iterative_matches_exact(self):
        mdp = random_mdp(2, X=2)
        pi = np.array([[0.3, 0.7], [0.5, 0.5]])
        tol = 1e-8
        exact = rl.policy_evaluation_exact(mdp, pi)
        res = rl.policy_evaluation_iterative(mdp, pi, tol)
        assert res.converged and np.abs(res.V - exact).max() < tol / (1 - mdp.discount) + 1e-10

    def test_exact_residual_on_random_mdps(self):
        for seed in range(20):
            mdp = random_mdp(seed, X=6, U=3)
            pi = rl.epsilon_greedy(np.random.default_rng(seed).normal(size=(6, 3)), 0.5)
            A, B = rl.policy_matrices(mdp, pi)
            V = rl.policy_evaluation_exact(mdp, pi)
            assert np.abs(V - A @ V - B).max() < 1e-10

    def test_undiscounted_without_terminals(self):
        mdp = single_state(alpha=1.0)
        with pytest.raises(SingularSystemError):
            rl.policy_evaluation_exact(mdp, [0])
        res = rl.policy_evaluation_iterative(mdp, [0], max_sweeps=50)
        assert not res.converged and res.sweeps == 50

    def test_undiscounted_with_terminal(self):
        # 0 -> 1 -> 2 (terminal), reward 1 per move
        P = np.zeros((1, 3, 3))
        P[0, 0, 1] = P[0, 1, 2] = P[0, 2, 2] = 1.0
        mdp = rl.TabularMdp(P, 1.0, 1.0, terminal=(2,))
        np.testing.assert_allclose(rl.policy_evaluation_exact(mdp, [0, 0, 0]), [2.0, 1.0, 0.0])


class TestQ:
    def test_zero_discount(self):
        mdp = random_mdp(3, alpha=0.0)
        np.testing.assert_allclose(rl.q_from_policy(mdp, [0] * 5), mdp.expected_reward(), atol=1e-14)

    def test_consistency_with_v(self):
        mdp = random_mdp(4)
        pi = rl.epsilon_greedy(np.random.default_rng(4).normal(size=(5, 2)), 0.4)
        V = rl.policy_evaluation_exact(mdp, pi)
        Q = rl.q_from_policy(mdp, pi)
        assert np.abs((pi * Q).sum(axis=1) - V).max() < 1e-10
        acts = np.array([0, 1, 1, 0, 1])
        Qd = rl.q_from_policy(mdp, acts)
        np.testing.assert_allclose(Qd[np.arange(5), acts], rl.policy_evaluation_exact(mdp, acts), atol=1e-10)


class TestImprovement:
    def test_zero_values_pick_best_immediate_reward(self):
        mdp = random_mdp(5)
        np.testing.assert_array_equal(rl.policy_improvement(mdp, np.zeros(5)),
                                      np.argmax(mdp.expected_reward(), axis=1))

    def test_ties_go_to_lowest_action(self):
        mdp = rl.TabularMdp(np.ones((2, 1, 1)), 1.0, 0.5)
        assert rl.policy_improvement(mdp, [0.0])[0] == 0

    def test_improvement_theorem(self):
        for seed in range(100):
            mdp = random_mdp(seed)
            acts = np.random.default_rng(seed).integers(2, size=5)
            V = rl.policy_evaluation_exact(mdp, acts)
            V_new = rl.policy_evaluation_exact(mdp, rl.policy_improvement(mdp, V))
            assert np.all(V_new >= V - 1e-10)

    def test_epsilon_greedy_formula(self):
        Q = np.array([[0.0, 1.0], [2.0, 2.0]])
        np.testing.assert_allclose(rl.epsilon_greedy(Q, 0.1), [[0.05, 0.95], [0.95, 0.05]])
        np.testing.assert_allclose(rl.epsilon_greedy(Q, 1.0), 0.5)
        with pytest.raises(InvalidSpecError):
            rl.epsilon_greedy(Q, 0.0)

    def test_epsilon_greedy_improvement(self):
        for seed in range(50):
            mdp = random_mdp(seed, X=4, U=3)
            pi = rl.epsilon_greedy(np.random.default_rng(seed + 1000).normal(size=(4, 3)), 0.2)
            V = rl.policy_evaluation_exact(mdp, pi)
            improved = rl.epsilon_greedy(rl.q_from_policy(mdp, pi, V), 0.2)
            assert np.all(rl.policy_evaluation_exact(mdp, improved) >= V - 1e-10)


class TestPlanning:
    def test_single_action(self):
        mdp = random_mdp(6, U=1)
        res = rl.policy_iteration(mdp)
        assert np.all(res.policy == 0) and res.iterations == 1
        np.testing.assert_allclose(res.V, rl.policy_evaluation_exact(mdp, [0] * 5))

    def test_policy_and_value_iteration_match_enumeration(self):
        tol = 1e-10
        for seed in range(100):
            mdp = random_mdp(seed)
            brute = rl.optimal_by_enumeration(mdp)
            pi_res = rl.policy_iteration(mdp)
            vi_res = rl.value_iteration(mdp, tol)
            np.testing.assert_array_equal(pi_res.policy, brute.policy)
            np.testing.assert_array_equal(vi_res.policy, brute.policy)
            assert np.abs(vi_res.V - pi_res.V).max() < 2 * tol / (1 - mdp.discount)
            assert pi_res.iterations <= 2 ** 5

    def test_iterative_policy_iteration(self):
        mdp = random_mdp(7)
        np.testing.assert_array_equal(rl.policy_iteration(mdp, tol=1e-10).policy, rl.policy_iteration(mdp).policy)

    def test_value_iteration_zero_discount(self):
        mdp = random_mdp(8, alpha=0.0)
        res = rl.value_iteration(mdp, 1e-12)
        assert res.iterations <= 2
        np.testing.assert_allclose(res.V, mdp.expected_reward().max(axis=1))

    def test_value_iteration_monotone_for_nonnegative_rewards(self):
        mdp = random_mdp(9, nonneg=True)
        res = rl.value_iteration(mdp, 1e-8, record=True)
        assert np.all(np.diff(np.array(res.history), axis=0) >= 0)

    def test_bellman_residual(self):
        tol = 1e-8
        mdp = random_mdp(10)
        res = rl.value_iteration(mdp, tol)
        bound = tol * (1 + mdp.discount) / (1 - mdp.discount)
        assert rl.bellman_residual(mdp, V=res.V) < bound
        assert rl.bellman_residual(mdp, Q=res.Q) < bound
        assert rl.bellman_residual(mdp, V=rl.policy_iteration(mdp).V) < 1e-10

    def test_reward_scaling(self):
        mdp = random_mdp(11)
        scaled = rl.TabularMdp(mdp.P, 3.0 * mdp.R, mdp.discount)
        a, b = rl.policy_iteration(mdp), rl.policy_iteration(scaled)
        np.testing.assert_allclose(b.V, 3.0 * a.V, rtol=1e-10)
        np.testing.assert_array_equal(a.policy, b.policy)

    def test_value_csv(self):
        res = rl.policy_iteration(random_mdp(12, X=2))
        lines = res.value_csv().splitlines()
        assert lines[0] == "x,V,pi" and len(lines) == 3
        assert rl.q_table_csv(res.Q).splitlines()[0] == "x,u,Q"


class TestSimulator:
    def test_transition_frequencies(self):
        mdp = random_mdp(13, X=4)
        sim = rl.EpisodeSimulator(mdp)
        gen = np.random.default_rng(0)
        n = 20_000
        counts = np.bincount([sim.step(gen, 1, 1)[1] for _ in range(n)], minlength=4)
        p = stats.chisquare(counts, n * mdp.P[1, 1]).pvalue
        assert p > 1e-3

    def test_reward_noise_is_zero_mean(self):
        mdp = single_state(r=2.0)
        sim = rl.EpisodeSimulator(mdp, reward_noise=0.5)
        gen = np.random.default_rng(1)
        r = np.array([sim.step(gen, 0, 0)[0] for _ in range(10_000)])
        assert abs(r.mean() - 2.0) < 3 * 0.5 / 100


def one_step_mdp():
    """Three actions from state 0, each ending in terminal state 1 or 2 with action-dependent odds and rewards."""
    P = np.zeros((3, 3, 3))
    P[:, 0, 1:] = [[0.5, 0.5], [0.2, 0.8], [0.7, 0.3]]
    P[:, 1, 1] = P[:, 2, 2] = 1.0
    R = np.zeros((3, 3, 3))
    R[:, 0, 1] = [0.25, -0.35, 1.05]
    R[:, 0, 2] = [0.15, -0.45, 0.95]
    return rl.TabularMdp(P, R, 0.9, terminal=(1, 2))


class TestMonteCarlo:
    def test_one_step_episodes(self):
        mdp = one_step_mdp()
        res = rl.mc_exploring_starts(rl.EpisodeSimulator(mdp, start=0), 10_000, 0.05, seed=0)
        assert np.abs(res.Q[0] - mdp.expected_reward()[0]).max() < 0.02

    def test_zero_rate_keeps_q(self):
        Q0 = np.array([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        res = rl.mc_exploring_starts(rl.EpisodeSimulator(one_step_mdp()), 100, 0.0, seed=1, Q0=Q0)
        np.testing.assert_array_equal(res.Q, Q0)

    def test_cap_raises_or_truncates(self):
        mdp = single_state()
        with pytest.raises(EpisodeCapError):
            rl.mc_exploring_starts(rl.EpisodeSimulator(mdp, cap=50), 1, 0.1, seed=0)
        res = rl.mc_exploring_starts(rl.EpisodeSimulator(mdp, cap=60), 1, 1.0, seed=0, truncate=True)
        assert res.Q[0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_robbins_monro_evaluation(self):
        g = np.random.default_rng(14)
        P = g.random((2, 2, 2))
        P /= P.sum(axis=2, keepdims=True)
        mdp = rl.TabularMdp(P, g.normal(size=(2, 2, 2)), 0.5)
        acts = np.array([1, 0])
        sim = rl.EpisodeSimulator(mdp, cap=60)
        res = rl.mc_exploring_starts(sim, 50_000, None, seed=2, truncate=True, policy=acts)
        assert res.visits.min() >= 10_000 and res.visits.sum() >= 100_000
        assert np.abs(res.Q - rl.q_from_policy(mdp, acts)).max() < 0.01

    def test_gridworld_exploring_starts(self):
        mdp = tb.make_gridworld()
        Qstar = rl.value_iteration(mdp).Q
        res = rl.mc_exploring_starts(rl.EpisodeSimulator(mdp, cap=200), 200_000, 0.05, seed=3, truncate=True)
        assert optimal_set_agreement(mdp, Qstar, res.policy) >= 0.95

    def test_gridworld_epsilon_soft(self):
        mdp = tb.make_gridworld()
        Qstar = rl.value_iteration(mdp).Q
        sim = rl.EpisodeSimulator(mdp, start=5, cap=1000)
        res = rl.mc_epsilon_soft(sim, 0.5, 0.05, 200_000, seed=4, eps_decay=0.9999, eps_min=0.01, truncate=True)
        assert optimal_set_agreement(mdp, Qstar, res.policy) >= 0.90
        assert res.epsilon == pytest.approx(0.01)

    def test_epsilon_validation(self):
        with pytest.raises(InvalidSpecError):
            rl.mc_epsilon_soft(rl.EpisodeSimulator(one_step_mdp()), 1.5, 0.1, 10, seed=0)


class TestQLearning:
    def test_hand_update(self):
        sim = rl.EpisodeSimulator(single_state(), cap=10 ** 6)
        assert rl.q_learning(sim, 1.0, 1.0, max_steps=1).Q[0, 0] == 1.0
        assert rl.q_learning(sim, 1.0, 1.0, max_steps=200).Q[0, 0] == pytest.approx(2.0, abs=1e-12)

    def test_gridworld(self):
        mdp = tb.make_gridworld()
        Qstar = rl.value_iteration(mdp, 1e-12).Q
        res = rl.q_learning(rl.EpisodeSimulator(mdp), 0.1, 0.1, max_steps=500_000, seed=5)
        assert res.steps == 500_000
        assert np.abs(res.Q - Qstar).max() < 0.05
        assert optimal_set_agreement(mdp, Qstar, res.policy) == 1.0


class TestGraphSearch:
    def test_single_edge(self):
        res = rl.backward_shortest_path(rl.Dag([("A", "E", 5)], "A", "E"))
        assert res.cost == 5 and res.path == ["A", "E"]

    def test_diamond(self):
        dag = rl.Dag([("A", "B", 1), ("B", "E", 3), ("A", "C", 2), ("C", "E", 1)], "A", "E")
        res = rl.backward_shortest_path(dag)
        assert res.cost == 3 and res.path == ["A", "C", "E"] and res.cost_to_go["E"] == 0

    def test_unreachable_and_cycle(self):
        with pytest.raises(NoPathError):
            rl.backward_shortest_path(rl.Dag([("A", "B", 1), ("C", "E", 1)], "A", "E"))
        with pytest.raises(InvalidSpecError):
            rl.Dag([("A", "B", 1), ("B", "A", 1)], "A", "B")

    def test_random_dags_match_enumeration(self):
        for seed in range(100):
            g = np.random.default_rng(seed)
            n = 20
            edges = [(i, j, float(g.integers(1, 10))) for i in range(n) for j in range(i + 1, min(n, i + 5))
                     if g.random() < 0.5]
            if not any((a, b) == (n - 2, n - 1) for a, b, _ in edges):
                edges.append((n - 2, n - 1, 50.0))
            weight = {(a, b): w for a, b, w in edges}
            children = {}
            for a, b, w in edges:
                children.setdefault(a, []).append((b, w))

            def best(v):
                if v == n - 1:
                    return 0.0
                return min((w + best(c) for c, w in children.get(v, [])), default=np.inf)
            # forward oracle: explicit enumeration of every path from the start
            def paths(v, acc):
                if v == n - 1:
                    yield acc
                for c, w in children.get(v, []):
                    yield from paths(c, acc + w)
            start = next(a for a, _, _ in edges)
            oracle = min(paths(start, 0.0), default=np.inf)
            if not np.isfinite(oracle):
                continue
            res = rl.backward_shortest_path(rl.Dag(edges, start, n - 1))
            assert res.cost == oracle == best(start)
            assert sum(weight[e] for e in itertools.pairwise(res.path)) == oracle
