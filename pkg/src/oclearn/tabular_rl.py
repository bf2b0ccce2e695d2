"""Finite MDPs: exact and iterative dynamic programming, sample-based control, and DAG search.

Rewards are maximised. ``P[u, x, x']`` and ``R[u, x, x']`` hold transition
probabilities and expected rewards, ``discount`` is the factor ``alpha``.
Terminal states are absorbing, have value zero and are never updated.
Greedy choices break ties towards the lowest action index.
"""

from __future__ import annotations

import bisect
import itertools
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from typing import Hashable, Iterable

import numpy as np

from . import _csv
from .errors import (EpisodeCapError, InvalidSpecError, NoPathError, SingularSystemError)

Array = np.ndarray

EPISODE_CAP = 10_000
STOCHASTIC_TOL = 1e-12
# relative margin an action must win by before policy iteration switches to it
SWITCH_MARGIN = 1e-12


@dataclass(frozen=True)
class TabularMdp:
    P: Array
    R: Array
    discount: float
    terminal: tuple = ()

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        R = np.broadcast_to(np.asarray(self.R, dtype=float), P.shape).copy()
        if P.ndim != 3 or P.shape[1] != P.shape[2]:
            raise InvalidSpecError("P must have shape (actions, states, states)")
        if np.any(P < 0) or np.abs(P.sum(axis=2) - 1).max() > STOCHASTIC_TOL:
            raise InvalidSpecError("every transition row must be a probability distribution")
        if not np.all(np.isfinite(R)):
            raise InvalidSpecError("rewards must be finite")
        if not 0 <= self.discount <= 1:
            raise InvalidSpecError("discount must lie in [0, 1]")
        term = tuple(sorted({int(x) for x in self.terminal}))
        if any(not 0 <= x < P.shape[1] for x in term):
            raise InvalidSpecError("terminal state out of range")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "terminal", term)

    @property
    def num_states(self) -> int:
        return self.P.shape[1]

    @property
    def num_actions(self) -> int:
        return self.P.shape[0]

    @property
    def nonterminal(self) -> Array:
        mask = np.ones(self.num_states, dtype=bool)
        mask[list(self.terminal)] = False
        return mask

    def expected_reward(self) -> Array:
        """``sum_x' P R`` as an ``(X, U)`` table."""
        return np.einsum("uxy,uxy->xu", self.P, self.R)

    def backup(self, V: Array) -> Array:
        """``sum_x' P [R + alpha V(x')]`` as an ``(X, U)`` table, zero on terminal rows."""
        Q = self.expected_reward() + self.discount * np.einsum("uxy,y->xu", self.P, V)
        Q[list(self.terminal)] = 0.0
        return Q

    def to_text(self) -> str:
        lines = [f"{self.num_states},{self.num_actions},{_csv.fmt(self.discount)}"]
        for u, x, y in zip(*np.nonzero(self.P)):
            lines.append(f"P {u} {x} {y} {_csv.fmt(self.P[u, x, y])}")
        for u, x, y in zip(*np.nonzero(self.R)):
            lines.append(f"R {u} {x} {y} {_csv.fmt(self.R[u, x, y])}")
        lines.extend(f"T {x}" for x in self.terminal)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TabularMdp":
        """Parse the header ``states,actions,discount`` then ``P u x x' p``, ``R u x x' r`` and ``T x`` lines."""
        rows = [(i + 1, ln.split("#", 1)[0].strip()) for i, ln in enumerate(text.splitlines())]
        rows = [(i, ln) for i, ln in rows if ln]
        if not rows:
            raise InvalidSpecError("empty MDP file")
        try:
            X, U, alpha = rows[0][1].split(",")
            X, U, alpha = int(X), int(U), float(alpha)
        except ValueError:
            raise InvalidSpecError(f"line {rows[0][0]}: header must be 'states,actions,discount'") from None
        P, R, term = np.zeros((U, X, X)), np.zeros((U, X, X)), []
        for line_no, ln in rows[1:]:
            parts = ln.split()
            try:
                if parts[0] in ("P", "R") and len(parts) == 5:
                    u, x, y = (int(v) for v in parts[1:4])
                    (P if parts[0] == "P" else R)[u, x, y] = float(parts[4])
                elif parts[0] == "T" and len(parts) == 2:
                    term.append(int(parts[1]))
                else:
                    raise ValueError
            except (ValueError, IndexError):
                raise InvalidSpecError(f"line {line_no}: cannot parse {ln!r}") from None
        return cls(P, R, alpha, tuple(term))


# ------------------------------------------------------------- policies

def deterministic_policy(actions, num_actions: int) -> Array:
    """One-hot ``(X, U)`` matrix for an action index per state."""
    actions = np.asarray(actions, dtype=int)
    pi = np.zeros((actions.size, num_actions))
    pi[np.arange(actions.size), actions] = 1.0
    return pi


def check_policy(pi, mdp: TabularMdp) -> Array:
    pi = np.asarray(pi, dtype=float)
    if pi.ndim == 1:
        pi = deterministic_policy(pi, mdp.num_actions)
    if pi.shape != (mdp.num_states, mdp.num_actions):
        raise InvalidSpecError("policy must have shape (states, actions)")
    if np.any(pi < 0) or np.abs(pi.sum(axis=1) - 1).max() > STOCHASTIC_TOL:
        raise InvalidSpecError("policy rows must be probability distributions")
    return pi


def greedy(Q: Array) -> Array:
    return np.argmax(Q, axis=1)


def epsilon_greedy(Q: Array, eps: float) -> Array:
    """``eps/|U|`` on every action plus ``1 - eps`` on the greedy one."""
    if not 0 < eps <= 1:
        raise InvalidSpecError("epsilon must lie in (0, 1]")
    X, U = Q.shape
    pi = np.full((X, U), eps / U)
    pi[np.arange(X), greedy(Q)] = 1 - eps * (1 - 1 / U)
    return pi


# ----------------------------------------------------- policy evaluation

def policy_matrices(mdp: TabularMdp, pi) -> tuple[Array, Array]:
    """``A`` and ``B`` of the linear system ``V = A V + B`` for policy ``pi``."""
    pi = check_policy(pi, mdp)
    A = mdp.discount * np.einsum("xu,uxy->xy", pi, mdp.P)
    B = (pi * mdp.expected_reward()).sum(axis=1)
    A[list(mdp.terminal)] = 0.0
    B[list(mdp.terminal)] = 0.0
    return A, B


def policy_evaluation_exact(mdp: TabularMdp, pi) -> Array:
    A, B = policy_matrices(mdp, pi)
    M = np.eye(mdp.num_states) - A
    if np.linalg.matrix_rank(M) < mdp.num_states:
        raise SingularSystemError("I - A is singular: the policy never terminates without discounting")
    return np.linalg.solve(M, B)


@dataclass(frozen=True)
class EvaluationResult:
    V: Array
    sweeps: int
    converged: bool


def policy_evaluation_iterative(mdp: TabularMdp, pi, tol: float = 1e-10, max_sweeps: int = 100_000,
                                V0=None) -> EvaluationResult:
    """In-place sweeps of ``V(x) <- sum_u pi sum_x' P [R + alpha V(x')]`` until ``max |dV| < tol``."""
    A, B = policy_matrices(mdp, pi)
    V = np.zeros(mdp.num_states) if V0 is None else np.array(V0, dtype=float)
    V[list(mdp.terminal)] = 0.0
    states = np.flatnonzero(mdp.nonterminal)
    for sweep in range(1, max_sweeps + 1):
        delta = 0.0
        for x in states:
            v = V[x]
            V[x] = A[x] @ V + B[x]
            delta = max(delta, abs(v - V[x]))
        if delta < tol:
            return EvaluationResult(V, sweep, True)
    return EvaluationResult(V, max_sweeps, False)


def q_from_policy(mdp: TabularMdp, pi, V=None) -> Array:
    """``Q(x, u) = sum_x' P [R + alpha V(x')]`` with ``V = V^pi`` (solved exactly when omitted)."""
    if V is None:
        V = policy_evaluation_exact(mdp, pi)
    return mdp.backup(np.asarray(V, dtype=float))


def policy_improvement(mdp: TabularMdp, V) -> Array:
    return greedy(mdp.backup(np.asarray(V, dtype=float)))


# ------------------------------------------------------------- planning

@dataclass(frozen=True)
class PlanningResult:
    policy: Array       # action index per state
    V: Array
    Q: Array
    iterations: int
    history: list = field(default_factory=list)

    def value_csv(self, target=None):
        rows = ([x, v, a] for x, (v, a) in enumerate(zip(self.V, self.policy)))
        return _csv.write_rows(target, ["x", "V", "pi"], rows)


def policy_iteration(mdp: TabularMdp, tol: float | None = None, initial=None,
                     max_improvements: int | None = None) -> PlanningResult:
    """Alternate evaluation and greedy improvement until the policy is stable.

    Evaluation is exact unless ``tol`` is given, in which case iterative
    sweeps warm-started from the previous values are used. An action is only
    replaced when another one is better by a relative ``1e-12`` margin, which
    prevents cycling between numerically tied actions.
    """
    X, U = mdp.num_states, mdp.num_actions
    actions = np.zeros(X, dtype=int) if initial is None else np.array(initial, dtype=int)
    cap = U ** X if max_improvements is None else max_improvements
    V = np.zeros(X)
    for it in range(1, cap + 2):
        pi = deterministic_policy(actions, U)
        V = policy_evaluation_exact(mdp, pi) if tol is None else \
            policy_evaluation_iterative(mdp, pi, tol, V0=V).V
        Q = mdp.backup(V)
        best = greedy(Q)
        current = Q[np.arange(X), actions]
        margin = SWITCH_MARGIN * (1 + np.abs(Q).max())
        switch = Q[np.arange(X), best] > current + margin
        if not switch.any():
            return PlanningResult(actions, V, Q, it)
        actions = np.where(switch, best, actions)
    raise SingularSystemError("policy iteration exceeded the number of deterministic policies")


def value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_sweeps: int = 100_000, V0=None,
                    record: bool = False) -> PlanningResult:
    """In-place sweeps of ``V(x) <- max_u sum_x' P [R + alpha V(x')]``; the greedy policy is extracted at the end.

    Without discounting and without reachable terminal states the sweeps may
    never settle; ``max_sweeps`` then ends the loop and ``iterations`` equals it.
    """
    V = np.zeros(mdp.num_states) if V0 is None else np.array(V0, dtype=float)
    V[list(mdp.terminal)] = 0.0
    r = mdp.expected_reward()
    states = np.flatnonzero(mdp.nonterminal)
    history = [V.copy()] if record else []
    sweeps = max_sweeps
    for sweep in range(1, max_sweeps + 1):
        delta = 0.0
        for x in states:
            v = V[x]
            V[x] = (r[x] + mdp.discount * mdp.P[:, x] @ V).max()
            delta = max(delta, abs(v - V[x]))
        if record:
            history.append(V.copy())
        if delta < tol:
            sweeps = sweep
            break
    Q = mdp.backup(V)
    return PlanningResult(greedy(Q), V, Q, sweeps, history)


def optimal_by_enumeration(mdp: TabularMdp, limit: int = 1 << 16) -> PlanningResult:
    """Exhaustive search over all deterministic policies with exact evaluation (small MDPs only).

    Returns the policy with the largest value summed over states; the optimal
    policy dominates every other one, so that sum identifies it.
    """
    X, U = mdp.num_states, mdp.num_actions
    if U ** X > limit:
        raise InvalidSpecError(f"{U ** X} policies exceed the enumeration limit {limit}")
    best, best_V = None, None
    for combo in itertools.product(range(U), repeat=X):
        V = policy_evaluation_exact(mdp, np.array(combo))
        if best_V is None or V.sum() > best_V.sum():
            best, best_V = np.array(combo), V
    return PlanningResult(best, best_V, mdp.backup(best_V), U ** X)


def bellman_residual(mdp: TabularMdp, V=None, Q=None) -> float:
    """Residual of the optimal Bellman equation for ``V`` (or for ``Q`` when given)."""
    if Q is not None:
        Q = np.asarray(Q, dtype=float)
        return float(np.abs(mdp.backup(Q.max(axis=1)) - Q).max())
    V = np.asarray(V, dtype=float)
    target = mdp.backup(V).max(axis=1)
    return float(np.abs(target - V)[mdp.nonterminal].max(initial=0.0))


def q_table_csv(Q: Array, target=None):
    rows = ([x, u, Q[x, u]] for x in range(Q.shape[0]) for u in range(Q.shape[1]))
    return _csv.write_rows(target, ["x", "u", "Q"], rows)


# ------------------------------------------------------------- sampling

class EpisodeSimulator:
    """Samples transitions of an MDP; rewards are the expected ``R`` plus optional Gaussian noise.

    ``start`` fixes the initial state of on-policy episodes; ``None`` draws
    it uniformly from the non-terminal states.
    """

    def __init__(self, mdp: TabularMdp, start: int | None = None, reward_noise: float = 0.0,
                 cap: int = EPISODE_CAP):
        if reward_noise < 0 or cap < 1:
            raise InvalidSpecError("reward_noise must be >= 0 and cap >= 1")
        self.mdp = mdp
        self.start = start
        self.reward_noise = float(reward_noise)
        self.cap = int(cap)
        self._cum = [[np.cumsum(mdp.P[u, x]).tolist() for x in range(mdp.num_states)]
                     for u in range(mdp.num_actions)]
        self._R = mdp.R.tolist()
        self._term = frozenset(mdp.terminal)
        self._starts = np.flatnonzero(mdp.nonterminal)
        if self._starts.size == 0:
            raise InvalidSpecError("every state is terminal")

    def is_terminal(self, x: int) -> bool:
        return x in self._term

    def initial_state(self, gen: np.random.Generator) -> int:
        return int(self.start) if self.start is not None else int(gen.choice(self._starts))

    def step(self, gen: np.random.Generator, x: int, u: int) -> tuple[float, int]:
        row = self._cum[u][x]
        y = min(bisect.bisect_right(row, gen.random() * row[-1]), len(row) - 1)
        r = self._R[u][x][y]
        if self.reward_noise:
            r += self.reward_noise * gen.standard_normal()
        return r, y


def _episode(sim: EpisodeSimulator, gen, x: int, u: int | None, choose, truncate: bool):
    """Run one episode from ``x`` (first action ``u`` if given); returns lists of states, actions, rewards."""
    xs, us, rs = [], [], []
    for _ in range(sim.cap):
        if sim.is_terminal(x):
            return xs, us, rs
        if u is None:
            u = choose(x)
        r, y = sim.step(gen, x, u)
        xs.append(x)
        us.append(u)
        rs.append(r)
        x, u = y, None
    if sim.is_terminal(x) or truncate:
        return xs, us, rs
    raise EpisodeCapError(f"no terminal state reached within {sim.cap} steps")


def _first_visit_update(Q: Array, counts: Array, xs, us, rs, alpha: float, omega) -> None:
    G = 0.0
    returns = np.empty(len(rs))
    for k in range(len(rs) - 1, -1, -1):
        G = rs[k] + alpha * G
        returns[k] = G
    seen = set()
    for k, (x, u) in enumerate(zip(xs, us)):
        if (x, u) in seen:
            continue
        seen.add((x, u))
        counts[x, u] += 1
        w = omega if omega is not None else 1.0 / counts[x, u]
        Q[x, u] += w * (returns[k] - Q[x, u])


@dataclass(frozen=True)
class LearningResult:
    Q: Array
    policy: Array        # greedy action per state
    visits: Array        # first visits (MC) or updates (Q-learning) per pair
    episodes: int
    steps: int
    epsilon: float | None = None

    def q_csv(self, target=None):
        return q_table_csv(self.Q, target)


def mc_exploring_starts(sim: EpisodeSimulator, episodes: int, omega: float | None, seed: int,
                        Q0=None, truncate: bool = False, policy=None) -> LearningResult:
    """First-visit Monte Carlo control from uniformly random non-terminal ``(x, u)`` starts.

    After every episode the greedy policy is recomputed for the states it
    visited. ``omega=None`` uses the sample-average rate ``1/N``. Passing a
    fixed ``policy`` (action per state) turns this into evaluation of ``Q^pi``.
    ``truncate`` accepts episodes that hit the step cap instead of raising.
    """
    mdp = sim.mdp
    gen = np.random.default_rng(seed)
    Q = np.zeros((mdp.num_states, mdp.num_actions)) if Q0 is None else np.array(Q0, dtype=float)
    counts = np.zeros(Q.shape, dtype=np.int64)
    fixed = policy is not None
    actions = np.asarray(policy, dtype=int).copy() if fixed else greedy(Q)
    starts = np.flatnonzero(mdp.nonterminal)
    steps = 0
    for _ in range(episodes):
        x0 = int(starts[gen.integers(starts.size)])
        u0 = int(gen.integers(mdp.num_actions))
        xs, us, rs = _episode(sim, gen, x0, u0, lambda x: int(actions[x]), truncate)
        steps += len(rs)
        _first_visit_update(Q, counts, xs, us, rs, mdp.discount, omega)
        if not fixed:
            for x in set(xs):
                actions[x] = int(np.argmax(Q[x]))
    return LearningResult(Q, actions, counts, episodes, steps)


def mc_epsilon_soft(sim: EpisodeSimulator, eps: float, omega: float | None, episodes: int, seed: int,
                    eps_decay: float = 1.0, eps_min: float = 0.0, Q0=None,
                    truncate: bool = False) -> LearningResult:
    """On-policy first-visit Monte Carlo with an epsilon-greedy behaviour policy.

    ``eps`` is multiplied by ``eps_decay`` after each episode, never dropping
    below ``eps_min`` (and never reaching zero).
    """
    if not 0 < eps <= 1 or not 0 < eps_decay <= 1:
        raise InvalidSpecError("epsilon must lie in (0, 1] and its decay in (0, 1]")
    mdp = sim.mdp
    U = mdp.num_actions
    gen = np.random.default_rng(seed)
    Q = np.zeros((mdp.num_states, U)) if Q0 is None else np.array(Q0, dtype=float)
    counts = np.zeros(Q.shape, dtype=np.int64)
    actions = greedy(Q)
    steps = 0
    for _ in range(episodes):
        e = eps

        def choose(x):
            return int(gen.integers(U)) if gen.random() < e else int(actions[x])
        # drawing uniformly with probability eps gives eps/|U| to every action plus 1-eps to the greedy one
        xs, us, rs = _episode(sim, gen, sim.initial_state(gen), None, choose, truncate)
        steps += len(rs)
        _first_visit_update(Q, counts, xs, us, rs, mdp.discount, omega)
        for x in set(xs):
            actions[x] = int(np.argmax(Q[x]))
        if eps * eps_decay > 0:
            eps = max(eps * eps_decay, eps_min)
    return LearningResult(Q, actions, counts, episodes, steps, eps)


def q_learning(sim: EpisodeSimulator, omega: float, eps: float, episodes: int | None = None, seed: int = 0,
               max_steps: int | None = None, Q0=None) -> LearningResult:
    """Off-policy TD control: ``Q <- Q + omega [r + alpha max Q(x', .) - Q]`` under epsilon-greedy behaviour.

    Runs ``episodes`` episodes, or until ``max_steps`` transitions in total,
    whichever comes first (at least one must be given).
    """
    if episodes is None and max_steps is None:
        raise InvalidSpecError("give episodes or max_steps")
    if not 0 < eps <= 1:
        raise InvalidSpecError("epsilon must lie in (0, 1]")
    mdp = sim.mdp
    U = mdp.num_actions
    alpha = mdp.discount
    gen = np.random.default_rng(seed)
    Q = np.zeros((mdp.num_states, U)) if Q0 is None else np.array(Q0, dtype=float)
    counts = np.zeros(Q.shape, dtype=np.int64)
    budget = np.inf if max_steps is None else max_steps
    steps, done = 0, 0
    while (episodes is None or done < episodes) and steps < budget:
        x = sim.initial_state(gen)
        for k in range(sim.cap + 1):
            if sim.is_terminal(x) or steps >= budget:
                break
            if k == sim.cap:
                raise EpisodeCapError(f"no terminal state reached within {sim.cap} steps")
            u = int(gen.integers(U)) if gen.random() < eps else int(np.argmax(Q[x]))
            r, y = sim.step(gen, x, u)
            target = r if sim.is_terminal(y) else r + alpha * Q[y].max()
            Q[x, u] += omega * (target - Q[x, u])
            counts[x, u] += 1
            steps += 1
            x = y
        done += 1
    return LearningResult(Q, greedy(Q), counts, done, steps, eps)


# ----------------------------------------------------------- graph search

@dataclass(frozen=True)
class Dag:
    edges: tuple        # (tail, head, weight) triples
    start: Hashable
    goal: Hashable

    def __post_init__(self):
        edges = tuple((a, b, float(w)) for a, b, w in self.edges)
        object.__setattr__(self, "edges", edges)
        try:
            order = list(TopologicalSorter(_predecessors(edges)).static_order())
        except CycleError:
            raise InvalidSpecError("graph contains a cycle") from None
        object.__setattr__(self, "_order", order)

    @property
    def nodes(self) -> list:
        seen = dict.fromkeys([self.start, self.goal])
        for a, b, _ in self.edges:
            seen.setdefault(a)
            seen.setdefault(b)
        return list(seen)


def _predecessors(edges: Iterable) -> dict:
    preds: dict = {}
    for a, b, _ in edges:
        preds.setdefault(a, set())
        preds.setdefault(b, set()).add(a)
    return preds


@dataclass(frozen=True)
class ShortestPath:
    cost_to_go: dict
    path: list
    cost: float


def backward_shortest_path(dag: Dag) -> ShortestPath:
    """Cost-to-go by backward induction from the goal, then greedy descent from the start."""
    children: dict = {}
    for a, b, w in dag.edges:
        children.setdefault(a, []).append((b, w))
    ctg = {n: np.inf for n in dag.nodes}
    ctg[dag.goal] = 0.0
    for node in reversed(dag._order):
        if node == dag.goal:
            continue
        for child, w in children.get(node, []):
            ctg[node] = min(ctg[node], w + ctg[child])
    if not np.isfinite(ctg[dag.start]):
        raise NoPathError(f"goal {dag.goal!r} is unreachable from {dag.start!r}")
    path = [dag.start]
    node = dag.start
    while node != dag.goal:
        node = min(children[node], key=lambda cw: cw[1] + ctg[cw[0]])[0]
        path.append(node)
    return ShortestPath(ctg, path, ctg[dag.start])
