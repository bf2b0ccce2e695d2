"""Path-integral control for linearly solvable problems, and the PI2 family.

Problems have the control-affine form ``dx = f dt + g (u dt + dw)`` with
``dw ~ N(0, Sigma dt)``, cost ``Phi(x(T)) + int q + 1/2 u'Ru dt`` and
``R Sigma = lambda I``. Under that condition the desirability
``Psi = exp(-V/lambda)`` is an expectation over uncontrolled rollouts and the
optimal input is a weighted average of the first noise sample.

White noise is ``eps = dw/dt``, i.e. the recorded Σ-distributed draw divided
by ``sqrt(dt)``; its variance is ``Sigma/dt`` on the grid.

Sample weights are computed with the minimum return subtracted first, which
leaves them unchanged mathematically and keeps the exponentials finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _csv
from ._linalg import as_matrix, check_pd
from .errors import (BasisDegeneracyError, DegenerateWeightsError, DimensionError,
                     InvalidSpecError, LmdpConditionError)
from .rng import batch_draws, path_generator, sub_seed
from .sde import ControlAffineSystem, RolloutBatch, TimeGrid, path_noise, require_noises, simulate

Array = np.ndarray

LMDP_TOL = 1e-8
ANNIHILATION_STREAM = 5
PARAMETER_STREAM = 4
SAMPLER_STREAM = 3


def validate_lmdp(R, sigma, tol: float = LMDP_TOL) -> float:
    """Return the scalar ``lambda`` with ``R Sigma = lambda I``, or raise."""
    R, sigma = as_matrix(R, "R"), as_matrix(sigma, "Sigma")
    if R.shape != sigma.shape:
        raise DimensionError(f"R {R.shape} and Sigma {sigma.shape} differ in shape")
    check_pd(R, "R")
    M = R @ sigma
    lam = float(np.trace(M)) / M.shape[0]
    residual = float(np.abs(M - lam * np.eye(M.shape[0])).max())
    if residual > tol or not lam > 0:
        raise LmdpConditionError(f"R Sigma is not a positive multiple of I (residual {residual:.3e})",
                                 residual=residual)
    return lam


@dataclass(frozen=True)
class LmdpProblem:
    """A control-affine problem satisfying ``R Sigma = lambda I`` on a fixed time grid.

    ``q(t, x)`` and ``terminal(x)`` receive batches ``x`` of shape ``(..., n)``.
    ``input_cost(t, x, u)`` replaces ``1/2 u'Ru`` when the input seen by the
    learner is not the physical input (feedback-gain learning).
    """

    sys: ControlAffineSystem
    R: Array
    q: Callable[[float, Array], Array]
    terminal: Callable[[Array], Array]
    grid: TimeGrid
    tol: float = LMDP_TOL
    input_cost: Callable[[float, Array, Array], Array] | None = None
    lam: float = field(init=False)

    def __post_init__(self):
        R = as_matrix(self.R, "R")
        if R.shape != (self.sys.input_dim, self.sys.input_dim):
            raise DimensionError("R must be m x m")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "lam", validate_lmdp(R, self.sys.noise_cov, self.tol))

    def xi(self, t: float, x: Array) -> Array:
        """``g R^-1 g'`` at ``(t, x)``."""
        g = self.sys.input_map(t, np.asarray(x, dtype=float))
        return g @ np.linalg.solve(self.R, np.swapaxes(g, -1, -2))

    def control_cost(self, t: float, x: Array, u: Array) -> Array:
        if self.input_cost is not None:
            return np.asarray(self.input_cost(t, x, u), dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", u, self.R, u)

    def stage_cost(self, t: float, x: Array) -> Array:
        return np.broadcast_to(np.asarray(self.q(t, x), dtype=float), np.shape(x)[:-1])


@dataclass(frozen=True)
class RbfBasis:
    """Gaussian bumps ``exp(-(t - mu_n)^2 / (2 sigma_n^2))`` in time."""

    centers: Array
    widths: Array

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.centers, dtype=float))
        w = np.broadcast_to(np.asarray(self.widths, dtype=float), c.shape).copy()
        if np.any(w <= 0):
            raise InvalidSpecError("basis widths must be positive")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "widths", w)

    @classmethod
    def uniform(cls, count: int, t0: float, tf: float, width: float | None = None) -> "RbfBasis":
        centers = np.linspace(t0, tf, count)
        if width is None:
            width = (tf - t0) / max(count - 1, 1)
        return cls(centers, width)

    @property
    def size(self) -> int:
        return self.centers.size

    def __call__(self, t) -> Array:
        t = np.asarray(t, dtype=float)[..., None]
        return np.exp(-0.5 * ((t - self.centers) / self.widths) ** 2)


@dataclass(frozen=True)
class Estimate:
    value: Array | float
    se: Array | float
    weights: Array | None = None
    returns: Array | None = None


def normalized_weights(returns, lam: float, mode: str = "mean") -> Array:
    """Stable ``exp(-R/lambda)`` weights; ``mode='mean'`` gives mean 1, ``'sum'`` gives sum 1 (per column)."""
    returns = np.asarray(returns, dtype=float)
    if not np.all(np.isfinite(returns)):
        raise DegenerateWeightsError("returns contain non-finite values")
    w = np.exp(-(returns - returns.min(axis=0)) / lam)
    total = w.sum(axis=0)
    if np.any(total == 0) or not np.all(np.isfinite(total)):
        raise DegenerateWeightsError("all sample weights vanished")
    if mode == "mean":
        return w * (returns.shape[0] / total)
    if mode == "sum":
        return w / total
    raise InvalidSpecError(f"unknown weight normalization {mode!r}")


# ----------------------------------------------------------------- sampling

def _start(problem: LmdpProblem, s: float, y) -> tuple[int, Array]:
    i = problem.grid.index_of(s)
    if i >= problem.grid.steps:
        raise InvalidSpecError("start time must precede the final time")
    y = np.asarray(y, dtype=float)
    if y.shape != (problem.sys.state_dim,):
        raise DimensionError("start state has the wrong dimension")
    return i, y


def _costs(problem: LmdpProblem, batch: RolloutBatch, noise_term: bool) -> tuple[Array, Array]:
    """Per-step costs ``(q + control cost) dt [+ u'R dw]`` of shape (K, steps) and terminal costs (K,)."""
    dt = problem.grid.dt
    times = batch.times
    steps = batch.inputs.shape[1]
    stage = np.empty((batch.size, steps))
    for i in range(steps):
        x, u = batch.states[:, i], batch.inputs[:, i]
        stage[:, i] = (problem.stage_cost(times[i], x) + problem.control_cost(times[i], x, u)) * dt
    if noise_term:
        dw = np.sqrt(dt) * require_noises(batch)
        stage = stage + np.einsum("kti,ij,ktj->kt", batch.inputs, problem.R, dw)
    terminal = np.broadcast_to(np.asarray(problem.terminal(batch.states[:, -1]), dtype=float), (batch.size,))
    return stage, terminal


def compute_return(rollout, problem: LmdpProblem, noise_term: bool = True) -> float | Array:
    """``Phi + sum (q + 1/2 u'Ru) dt + sum u'R dw`` for a rollout or (vectorised) a batch."""
    batch = rollout
    single = not isinstance(rollout, RolloutBatch)
    if single:
        noises = None if rollout.noises is None else rollout.noises[None]
        if noise_term:
            require_noises(rollout)
        batch = RolloutBatch(rollout.grid, rollout.states[None], rollout.inputs[None],
                             noises, rollout.start_index)
    stage, terminal = _costs(problem, batch, noise_term)
    out = terminal + stage.sum(axis=1)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class AnnihilationResult:
    states: Array      # (K, steps+1, n), paths continue after annihilation but are flagged
    alive: Array       # (K,) survived to the final time
    death_step: Array  # (K,) first step at which the path was discarded, -1 if it survived

    @property
    def survivors(self) -> Array:
        return self.states[self.alive, -1]


def simulate_annihilated(problem: LmdpProblem, s: float, y, K: int, seed: int,
                         workers: int = 1) -> AnnihilationResult:
    """Uncontrolled diffusion from ``x(s) = y`` where each step survives with probability ``exp(-q dt/lambda)``."""
    i0, y = _start(problem, s, y)
    steps = problem.grid.steps - i0
    noise, uni = path_noise(problem.sys, steps, seed, K, stream=ANNIHILATION_STREAM, uniforms=True,
                            workers=workers)
    batch = simulate(problem.sys, y, None, problem.grid, seed, K, start_index=i0, noise=noise)
    times = batch.times
    alive = np.ones(K, dtype=bool)
    death = np.full(K, -1)
    for i in range(steps):
        q = problem.stage_cost(times[i], batch.states[:, i])
        killed = alive & (uni[:, i] >= np.exp(-q * problem.grid.dt / problem.lam))
        death[killed] = i0 + i
        alive &= ~killed
    return AnnihilationResult(batch.states, alive, death)


def estimate_desirability(problem: LmdpProblem, s: float, y, K: int, seed: int,
                          workers: int = 1) -> Estimate:
    """Monte-Carlo ``Psi(s, y) = E[exp(-(Phi + int q dt)/lambda)]`` over uncontrolled rollouts."""
    if K < 1:
        raise InvalidSpecError("K must be >= 1")
    i0, y = _start(problem, s, y)
    batch = simulate(problem.sys, y, None, problem.grid, seed, K, start_index=i0, workers=workers)
    stage, terminal = _costs(problem, batch, noise_term=False)
    samples = np.exp(-(terminal + stage.sum(axis=1)) / problem.lam)
    se = float(samples.std(ddof=1) / np.sqrt(K)) if K > 1 else 0.0
    return Estimate(float(samples.mean()), se, returns=terminal + stage.sum(axis=1))


def _weighted_noise_mean(batch: RolloutBatch, returns: Array, lam: float, dt: float) -> Estimate:
    eps = require_noises(batch)[:, 0] / np.sqrt(dt)
    alpha = normalized_weights(returns, lam, "mean")
    K = returns.shape[0]
    u = (alpha[:, None] * eps).sum(axis=0) / K
    se = np.sqrt(((alpha[:, None] * (eps - u)) ** 2).sum(axis=0)) / K
    return Estimate(u, se, alpha, returns)


def pi_optimal_control(problem: LmdpProblem, s: float, y, K: int, seed: int,
                       workers: int = 1) -> Estimate:
    """``u*(s, y) = sum_k alpha_k eps_k(s) / K`` from uncontrolled rollouts."""
    return pi_importance_sampled_control(problem, None, s, y, K, seed, workers)


def pi_importance_sampled_control(problem: LmdpProblem, policy: Callable | None, s: float, y, K: int,
                                  seed: int, workers: int = 1, noise_term: bool = True) -> Estimate:
    """``u*(s, y) = u(s, y) + sum_k alpha_k eps_k(s) / K`` from rollouts under ``policy``.

    Weights use the full return including ``1/2 u'Ru`` and ``u'R dw``; with
    ``policy=None`` (no control) this is the plain path-integral estimator.
    """
    if K < 1:
        raise InvalidSpecError("K must be >= 1")
    i0, y = _start(problem, s, y)
    batch = simulate(problem.sys, y, policy, problem.grid, seed, K, start_index=i0, workers=workers)
    stage, terminal = _costs(problem, batch, noise_term)
    est = _weighted_noise_mean(batch, terminal + stage.sum(axis=1), problem.lam, problem.grid.dt)
    if policy is None:
        return est
    base = np.asarray(policy(problem.grid.times[i0], y), dtype=float)
    return Estimate(base + est.value, est.se, est.weights, est.returns)


# ------------------------------------------------- general path integral

@dataclass(frozen=True)
class GeneralPiDiagnostics:
    starts: list
    weights: Array
    returns: Array
    delta: list
    ridge: list


def _linear_policy(bases: Sequence[Callable], theta: Sequence[Array]):
    def control(t, x):
        return np.stack([np.asarray(b(t, x)) @ th for b, th in zip(bases, theta)], axis=-1)
    return control


def general_pi_step(problem: LmdpProblem, bases: Sequence[Callable], theta: Sequence[Array],
                    sampler: Callable[[np.random.Generator], tuple[float, Array]], K: int,
                    omega: float, seed: int, points: int = 1, noise_term: bool = True,
                    ridge: float = 1e-8, cond_limit: float = 1e10, workers: int = 1):
    """One pass of sampling, weighting and weighted regression for ``u_i = Upsilon_i(t, x)' theta_i``.

    ``bases[i](t, x)`` maps a batch of states ``(..., n)`` to features
    ``(..., p_i)``. ``sampler`` draws ``points`` start pairs ``(s, y)``; each
    gets ``K`` controlled rollouts and all samples enter one regression per
    input. The normal equations are solved directly when well conditioned
    and with a trace-scaled ridge otherwise. Returns ``(theta_new, diagnostics)``.
    """
    m = problem.sys.input_dim
    if len(bases) != m or len(theta) != m:
        raise DimensionError("need one basis and one parameter vector per input")
    theta = [np.asarray(th, dtype=float) for th in theta]
    policy = _linear_policy(bases, theta)
    gen = path_generator(seed, 0, SAMPLER_STREAM)
    feats = [[] for _ in range(m)]
    targets, weights, returns, starts = [], [], [], []
    for p in range(points):
        s, y = sampler(gen)
        i0, y = _start(problem, s, y)
        batch = simulate(problem.sys, y, policy, problem.grid, sub_seed(seed, p), K, start_index=i0,
                         workers=workers)
        stage, terminal = _costs(problem, batch, noise_term)
        R = terminal + stage.sum(axis=1)
        alpha = normalized_weights(R, problem.lam, "mean")
        eps = batch.noises[:, 0] / np.sqrt(problem.grid.dt)
        t = problem.grid.times[i0]
        for i in range(m):
            feats[i].append(np.broadcast_to(np.asarray(bases[i](t, y), dtype=float), (K, theta[i].size)))
        targets.append(eps)
        weights.append(alpha)
        returns.append(R)
        starts.append((float(t), y))
    alpha = np.concatenate(weights)
    eps = np.concatenate(targets)
    new_theta, deltas, ridges = [], [], []
    for i in range(m):
        X = np.concatenate(feats[i])
        A = X.T @ (alpha[:, None] * X)
        b = X.T @ (alpha * eps[:, i])
        lam_r = 0.0
        if np.linalg.cond(A) > cond_limit:
            lam_r = ridge * max(np.trace(A) / A.shape[0], 1e-300)
        delta = np.linalg.solve(A + lam_r * np.eye(A.shape[0]), b)
        deltas.append(delta)
        ridges.append(lam_r)
        new_theta.append(theta[i] + omega * delta)
    return new_theta, GeneralPiDiagnostics(starts, alpha, np.concatenate(returns), deltas, ridges)


# ---------------------------------------------------------------------- PI2

@dataclass(frozen=True)
class Pi2Result:
    """Learned parameters (``(m, N)`` time-only or ``(m, N, 1+n)`` general) and per-iteration statistics.

    ``cost_history[0]`` is the noise-free cost of the initial parameters and
    ``cost_history[k]`` the cost after update ``k``.
    """

    theta: Array
    theta_history: Array
    cost_history: Array
    mean_returns: Array
    min_returns: Array
    exploration: Array

    def to_csv(self, target=None):
        rows = [[k, a, b, c] for k, (a, b, c) in
                enumerate(zip(self.mean_returns, self.min_returns, self.exploration))]
        return _csv.write_rows(target, ["iter", "mean_return", "min_return", "c"], rows)

    def theta_csv(self, target=None):
        flat = self.theta.reshape(self.theta.shape[0], -1)
        header = [f"theta_{j}" for j in range(flat.shape[1])]
        return _csv.write_rows(target, header, flat)


def _pi2_control(basis: RbfBasis, params: Array, J: int):
    """``params`` has shape (K, m, N, J); input ``i`` of rollout ``k`` is grand_sum(Upsilon [1 x'] o theta)."""
    def control(t, x):
        ups = basis(t)
        xb = np.ones(x.shape[:-1] + (1,)) if J == 1 else np.concatenate([np.ones(x.shape[:-1] + (1,)), x], -1)
        u = (params[..., 0] @ ups) * xb[..., None, 0]
        for j in range(1, J):
            u = u + (params[..., j] @ ups) * xb[..., None, j]
        return u
    return control


def _pi2(problem: LmdpProblem, basis: RbfBasis, theta: Array, x0, K: int, iterations: int, c: float,
         anneal: float, seed: int, frozen: Array | None, temperature: float | None,
         noise_term: bool, process_noise: bool, workers: int) -> Pi2Result:
    theta = np.array(theta, dtype=float)
    m, N, J = theta.shape
    if m != problem.sys.input_dim or N != basis.size:
        raise DimensionError(f"theta must have shape ({problem.sys.input_dim}, {basis.size}, ...)")
    if K < 1 or iterations < 0 or c < 0:
        raise InvalidSpecError("K >= 1, iterations >= 0 and c >= 0 are required")
    x0 = np.asarray(x0, dtype=float)
    lam = problem.lam if temperature is None else float(temperature)
    grid = problem.grid
    steps = grid.steps
    ups = basis(grid.times[:steps])                       # (steps, N)
    norms = np.einsum("sn,sn->s", ups, ups)
    if np.any(norms == 0):
        raise BasisDegeneracyError("basis vector is zero at some time step")
    ups_int = ups.sum(axis=0) * grid.dt
    if np.any(ups_int == 0):
        raise BasisDegeneracyError("a basis function integrates to zero over the horizon")
    keep = np.ones((N, J), dtype=bool) if frozen is None else ~np.asarray(frozen, dtype=bool)

    def draw(g):
        out = np.zeros((m, N, J))
        out[:, :, 0] = g.standard_normal((m, N))
        if J > 1:
            out[:, :, 1:] = g.standard_normal((m, N, J - 1))
        return out

    def evaluate(th):
        ctrl = _pi2_control(basis, th[None], J)
        b = simulate(problem.sys, x0, ctrl, grid, 0, 1, stochastic=False)
        st, te = _costs(problem, b, noise_term=False)
        return float(te[0] + st.sum())

    history = [theta.copy()]
    costs = [evaluate(theta)]
    means, mins, cs = [], [], []
    for it in range(iterations):
        it_seed = sub_seed(seed, it)
        eps = c * np.stack(batch_draws(draw, it_seed, K, PARAMETER_STREAM, workers=workers)) * keep
        ctrl = _pi2_control(basis, theta[None] + eps, J)
        batch = simulate(problem.sys, x0, ctrl, grid, it_seed, K, stochastic=process_noise, workers=workers)
        stage, terminal = _costs(problem, batch, noise_term and process_noise)
        to_go = terminal[:, None] + np.cumsum(stage[:, ::-1], axis=1)[:, ::-1]     # (K, steps)
        alpha = normalized_weights(to_go, lam, "sum")                              # (K, steps)
        delta = np.zeros_like(theta)
        for i in range(m):
            for j in range(J):
                col = eps[:, i, :, j]                                              # (K, N)
                E = alpha.T @ col                                                  # (steps, N)
                step_delta = ups * (np.einsum("sn,sn->s", ups, E) / norms)[:, None]
                delta[i, :, j] = (step_delta * ups).sum(axis=0) * grid.dt / ups_int
        theta = theta + delta
        history.append(theta.copy())
        costs.append(evaluate(theta))
        means.append(float(to_go[:, 0].mean()))
        mins.append(float(to_go[:, 0].min()))
        cs.append(c)
        c *= anneal
    return Pi2Result(theta, np.array(history), np.array(costs), np.array(means), np.array(mins), np.array(cs))


def pi2_time_dependent(problem: LmdpProblem, basis: RbfBasis, theta_init, x0, K: int, iterations: int,
                       c: float, anneal_rate: float = 1.0, seed: int = 0, temperature: float | None = None,
                       noise_term: bool = False, process_noise: bool = False, workers: int = 1) -> Pi2Result:
    """PI2 for ``u_i(t) = Upsilon(t)' theta_i`` with parameter noise held fixed along each rollout.

    ``theta_init`` has shape ``(m, N)``. Returns are costs-to-go from every
    time step; weights are normalized to sum to one per step.
    """
    theta = np.asarray(theta_init, dtype=float)
    if theta.ndim != 2:
        raise DimensionError("theta_init must have shape (m, N)")
    res = _pi2(problem, basis, theta[..., None], x0, K, iterations, c, anneal_rate, seed, None,
               temperature, noise_term, process_noise, workers)
    return Pi2Result(res.theta[..., 0], res.theta_history[..., 0], res.cost_history, res.mean_returns,
                     res.min_returns, res.exploration)


def pi2_general(problem: LmdpProblem, basis: RbfBasis, theta_init, x0, K: int, iterations: int, c: float,
                anneal_rate: float = 1.0, seed: int = 0, frozen=None, temperature: float | None = None,
                noise_term: bool = False, process_noise: bool = False, workers: int = 1) -> Pi2Result:
    """PI2 for ``u_i(t, x) = grand_sum(Upsilon(t) [1 x'] o theta_i)`` with ``theta_i`` of shape ``(N, 1+n)``.

    ``frozen`` is an optional boolean ``(N, 1+n)`` mask of entries that get
    no exploration noise (and therefore no update).
    """
    theta = np.asarray(theta_init, dtype=float)
    n = problem.sys.state_dim
    if theta.ndim != 3 or theta.shape[2] != 1 + n:
        raise DimensionError(f"theta_init must have shape (m, N, {1 + n})")
    return _pi2(problem, basis, theta, x0, K, iterations, c, anneal_rate, seed, frozen,
                temperature, noise_term, process_noise, workers)


def general_features(basis: RbfBasis, t: float, x) -> Array:
    """``Upsilon(t) [1 x']``, the ``(N, 1+n)`` feature matrix of the general policy."""
    x = np.asarray(x, dtype=float)
    return np.outer(basis(t), np.concatenate([[1.0], x]))


# ------------------------------------------------------ feedback gains

@dataclass(frozen=True)
class GainTask:
    """Tracking problem whose learner input is the gain matrix ``K(t)`` with ``u = K (x - x_ref(t))``."""

    problem: LmdpProblem
    x_ref: Callable[[float], Array]

    @property
    def gain_dim(self) -> int:
        return self.problem.sys.state_dim * self.problem.sys.input_dim

    def wrapped(self) -> LmdpProblem:
        base = self.problem
        n, m = base.sys.state_dim, base.sys.input_dim
        x_ref = self.x_ref

        def error(t, x):
            return x - np.asarray(x_ref(t), dtype=float)

        def physical(t, x, v):
            Km = v.reshape(v.shape[:-1] + (m, n))
            return np.einsum("...ij,...j->...i", Km, error(t, x))

        def input_map(t, x):
            g = np.asarray(base.sys.input_map(t, x), dtype=float)       # (..., n, m)
            e = error(t, x)                                              # (..., n)
            # d u_i / d K_ij = e_j, so the map from vec(K) to the state is g_i e_j
            return np.einsum("...ai,...j->...aij", g, e).reshape(np.broadcast_shapes(g.shape[:-2], e.shape[:-1]) + (n, m * n))

        def input_cost(t, x, v):
            return base.control_cost(t, x, physical(t, x, v))

        sys = ControlAffineSystem(n, m * n, base.sys.drift, input_map, noise_cov=base.lam * np.eye(m * n))
        return LmdpProblem(sys, np.eye(m * n), base.q, base.terminal, base.grid, base.tol, input_cost)


def pi2_feedback_gains(task: GainTask, basis: RbfBasis, theta_init, x0, K: int, iterations: int, c: float,
                       anneal_rate: float = 1.0, seed: int = 0, temperature: float | None = None,
                       workers: int = 1) -> Pi2Result:
    """Learn time-varying gains by treating ``vec(K(t))`` (row-major, ``m*n`` entries) as the PI2 input."""
    theta = np.asarray(theta_init, dtype=float)
    if theta.shape[0] != task.gain_dim:
        raise DimensionError(f"theta_init needs {task.gain_dim} rows, one per gain entry")
    return pi2_time_dependent(task.wrapped(), basis, theta, x0, K, iterations, c, anneal_rate, seed,
                              temperature=task.problem.lam if temperature is None else temperature,
                              workers=workers)


def gains_at(result_theta: Array, basis: RbfBasis, t, state_dim: int, input_dim: int) -> Array:
    """Gain matrices ``K(t)`` of shape ``(..., m, n)`` from learned feedback-gain parameters."""
    v = basis(t) @ np.asarray(result_theta).T
    return v.reshape(np.shape(t) + (input_dim, state_dim))
