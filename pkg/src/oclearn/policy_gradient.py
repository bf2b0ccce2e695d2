"""Black-box policy optimisation with finite-difference gradients.

A policy ``mu(n, x; theta)`` may depend on ``theta`` in any way; its cost
``J(theta)`` is only ever observed through rollout returns. Gradients come
either from per-coordinate differences or from a least-squares fit of
``R(theta + d) ~ J + d' grad`` over random perturbations ``d``, where the
ones column lets ``J`` be estimated jointly instead of evaluated separately.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _csv
from .errors import DivergenceError, InvalidSpecError, SingularDesignError, ZeroCurvatureError
from .ilqc import NonlinearDiscreteSystem, StageCostModel
from .rng import batch_draws, path_generator, sub_seed

Array = np.ndarray

PERTURBATION_STREAM = 6
PROCESS_STREAM = 7
COND_LIMIT = 1e10


@dataclass(frozen=True)
class ParamPolicy:
    """``u = evaluate(n, x, theta)`` with a ``dim``-dimensional parameter vector."""

    evaluate: Callable[[int, Array, Array], Array]
    dim: int

    def __post_init__(self):
        if int(self.dim) < 1:
            raise InvalidSpecError("a policy needs at least one parameter")

    def __call__(self, n: int, x: Array, theta: Array) -> Array:
        return np.atleast_1d(np.asarray(self.evaluate(n, x, theta), dtype=float))


def linear_feedback(input_dim: int, state_dim: int) -> ParamPolicy:
    """``u = K x`` with ``K`` stored row-major in ``theta``."""
    def evaluate(n, x, theta):
        return np.asarray(theta).reshape(input_dim, state_dim) @ x
    return ParamPolicy(evaluate, input_dim * state_dim)


def evaluate_return(system: NonlinearDiscreteSystem, cost: StageCostModel, policy: ParamPolicy, theta,
                    x0, horizon: int, seed: int = 0,
                    noise: Callable[[np.random.Generator, int], Array] | None = None) -> float:
    """Return ``Phi(x_N) + sum L_n(x_n, u_n)`` of one rollout of ``x' = f_n(x, u) + w_n``.

    ``noise(gen, n)`` draws ``w_n``; without it the rollout is deterministic
    and the return equals ``J(theta)``.
    """
    theta = np.asarray(theta, dtype=float)
    x = np.asarray(x0, dtype=float)
    gen = None if noise is None else path_generator(seed, 0, PROCESS_STREAM)
    total = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for n in range(horizon):
            u = policy(n, x, theta)
            total += float(cost.stage(n, x, u))
            x = np.asarray(system.step(n, x, u), dtype=float)
            if noise is not None:
                x = x + np.asarray(noise(gen, n), dtype=float)
            if not (np.all(np.isfinite(x)) and np.isfinite(total)):
                raise DivergenceError(f"rollout diverged at step {n + 1}", step=n + 1)
        total += float(cost.terminal(x))
    if not np.isfinite(total):
        raise DivergenceError("return is not finite", step=horizon)
    return total


def return_function(system: NonlinearDiscreteSystem, cost: StageCostModel, policy: ParamPolicy, x0,
                    horizon: int, noise=None) -> Callable[[Array, int], float]:
    """``R(theta, seed)`` for :func:`gradient_descent_fd`."""
    def R(theta, seed):
        return evaluate_return(system, cost, policy, theta, x0, horizon, seed, noise)
    return R


@dataclass(frozen=True)
class GradientEstimate:
    grad: Array
    value: float | None
    condition: float = 1.0
    ill_conditioned: bool = False


def fd_coordinate_gradient(J: Callable[[Array], float], theta, delta: float,
                           mode: str = "double") -> GradientEstimate:
    """Per-coordinate differences: ``single`` uses ``p+1`` evaluations, ``double`` uses ``2p``.

    ``value`` is ``J(theta)`` in single mode and the mean of each central pair
    (second-order accurate) in double mode.
    """
    if not delta > 0:
        raise InvalidSpecError("delta must be positive")
    if mode not in ("single", "double"):
        raise InvalidSpecError(f"unknown difference mode {mode!r}")
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    p = theta.size

    def probe(i, step):
        th = theta.copy()
        if i is not None:
            th[i] += step
        val = float(J(th))
        if not np.isfinite(val):
            where = "the nominal point" if i is None else f"coordinate {i}"
            raise DivergenceError(f"cost is not finite when probing {where}")
        return val

    grad = np.empty(p)
    if mode == "single":
        base = probe(None, 0.0)
        for i in range(p):
            grad[i] = (probe(i, delta) - base) / delta
        return GradientEstimate(grad, base)
    centre = 0.0
    for i in range(p):
        hi, lo = probe(i, delta), probe(i, -delta)
        grad[i] = (hi - lo) / (2 * delta)
        centre += 0.5 * (hi + lo)
    return GradientEstimate(grad, centre / p)


@dataclass(frozen=True)
class PerturbationBatch:
    deltas: Array    # (N, p)
    returns: Array   # (N,)

    def __post_init__(self):
        d = np.atleast_2d(np.asarray(self.deltas, dtype=float))
        r = np.asarray(self.returns, dtype=float).reshape(-1)
        if d.shape[0] < 1 or d.shape[0] != r.size:
            raise InvalidSpecError("need one return per perturbation and at least one perturbation")
        if not (np.all(np.isfinite(d)) and np.all(np.isfinite(r))):
            raise InvalidSpecError("perturbations and returns must be finite")
        object.__setattr__(self, "deltas", d)
        object.__setattr__(self, "returns", r)

    @property
    def design(self) -> Array:
        return np.hstack([self.deltas, np.ones((self.deltas.shape[0], 1))])


def fd_random_gradient(batch: PerturbationBatch, ridge: float = 0.0) -> GradientEstimate:
    """Solve ``(D'D + ridge I) [grad; J] = D'R`` for the design ``D = [deltas 1]``."""
    if ridge < 0:
        raise InvalidSpecError("ridge must be non-negative")
    D = batch.design
    k = D.shape[1]
    if ridge == 0 and np.linalg.matrix_rank(D) < k:
        raise SingularDesignError(f"perturbation design has rank below {k}; add perturbations or a ridge")
    A = D.T @ D
    cond = float(np.linalg.cond(A))
    sol = np.linalg.solve(A + ridge * np.eye(k), D.T @ batch.returns)
    return GradientEstimate(sol[:-1], float(sol[-1]), cond, not cond < COND_LIMIT)


@dataclass(frozen=True)
class DescentResult:
    theta: Array
    theta_history: Array    # (iters+1, p)
    J_history: Array        # estimated J at each visited theta
    grad_norms: Array
    diverged: bool

    def to_csv(self, target=None):
        rows = [[k, j, g] for k, (j, g) in enumerate(zip(self.J_history, self.grad_norms))]
        return _csv.write_rows(target, ["iter", "J_est", "grad_norm"], rows)


def gradient_descent_fd(returns: Callable[[Array, int], float], theta0, perturbations: int,
                        iterations: int, lr: float = 0.1, explore_std: float | None = None,
                        ridge: float = 0.0, decay: float = 1.0, seed: int = 0,
                        workers: int = 1) -> DescentResult:
    """Gradient descent where each gradient is fit from ``perturbations`` random rollouts.

    ``returns(theta, seed)`` yields one rollout return. Perturbations are
    ``N(0, c^2 I)`` with ``c`` defaulting to ``0.1 (1 + |theta0|_inf)``; the
    learning rate is multiplied by ``decay`` after every update. A diverging
    rollout stops the loop with ``diverged`` set.
    """
    theta = np.atleast_1d(np.asarray(theta0, dtype=float)).copy()
    p = theta.size
    if perturbations < 1 or iterations < 0:
        raise InvalidSpecError("need perturbations >= 1 and iterations >= 0")
    c = 0.1 * (1 + np.abs(theta).max()) if explore_std is None else float(explore_std)
    history, Js, norms = [theta.copy()], [], []
    diverged = False
    for it in range(iterations):
        it_seed = sub_seed(seed, it)
        deltas = c * np.stack(batch_draws(lambda g: g.standard_normal(p), it_seed, perturbations,
                                          PERTURBATION_STREAM, workers=workers))
        seeds = [sub_seed(it_seed, k) for k in range(perturbations)]
        try:
            if workers > 1:
                with ThreadPoolExecutor(max_workers=workers) as pool:
                    R = np.array(list(pool.map(lambda k: float(returns(theta + deltas[k], seeds[k])),
                                               range(perturbations))))
            else:
                R = np.array([float(returns(theta + d, s)) for d, s in zip(deltas, seeds)])
        except DivergenceError:
            diverged = True
            break
        if not np.all(np.isfinite(R)):
            diverged = True
            break
        est = fd_random_gradient(PerturbationBatch(deltas, R), ridge)
        theta = theta - lr * est.grad
        lr *= decay
        history.append(theta.copy())
        Js.append(est.value)
        norms.append(float(np.linalg.norm(est.grad)))
    return DescentResult(theta, np.array(history), np.array(Js), np.array(norms), diverged)


@dataclass(frozen=True)
class NewtonResult:
    x: float
    iterations: int
    converged: bool


def newton_raphson_1d(fprime: Callable[[float], float], fsecond: Callable[[float], float], x0: float,
                      iters: int = 50, tol: float = 1e-12) -> NewtonResult:
    """Find a stationary point of ``f`` with ``x <- x - f'(x)/f''(x)``, stopping once ``|f'| < tol``."""
    x = float(x0)
    for k in range(iters + 1):
        g = float(fprime(x))
        if abs(g) < tol:
            return NewtonResult(x, k, True)
        if k == iters:
            break
        h = float(fsecond(x))
        if h == 0:
            raise ZeroCurvatureError(f"second derivative vanishes at x={x!r}")
        x = x - g / h
    return NewtonResult(x, iters, False)
