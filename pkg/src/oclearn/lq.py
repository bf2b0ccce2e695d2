"""Linear-quadratic regulators: LQR and LQG in discrete and continuous time.

Conventions used throughout:

* stage cost ``1/2 x'Qx + 1/2 u'Ru + u'Px`` with ``P`` of shape ``(m, n)``,
  terminal cost ``1/2 x'Q_final x``;
* value function ``1/2 x'Sx + upsilon``;
* gains are returned so that the optimal input is ``u = K x``.

Infinite-horizon problems are solved by iterating the discrete Riccati map
to its fixed point, or by integrating the Riccati ODE backward until it is
stationary. Every Riccati step is symmetrised.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _csv
from ._linalg import as_matrix, check_pd, check_psd, symmetrize
from .errors import DimensionError, DivergenceError, FiniteEscapeError, InvalidSpecError
from .sde import TimeGrid

Array = np.ndarray

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITERS = 100_000
_BLOWUP = 1e12


def _stack(value, name):
    arr = np.asarray(value, dtype=float)
    if arr.ndim < 2:
        arr = np.atleast_2d(arr)
    if arr.ndim not in (2, 3):
        raise DimensionError(f"{name} must be a matrix or a sequence of matrices")
    return arr


def _pick(arr: Array, n: int) -> Array:
    return arr[n] if arr.ndim == 3 else arr


@dataclass(frozen=True)
class LinearSystemDiscrete:
    """``x[n+1] = A_n x[n] + B_n u[n] + C_n w[n]`` with ``w ~ N(0, I)``; ``C=None`` means LQR."""

    A: Array
    B: Array
    C: Array | None = None

    def __post_init__(self):
        A = _stack(self.A, "A")
        B = _stack(self.B, "B")
        if B.shape[-2] != A.shape[-1] or A.shape[-1] != A.shape[-2]:
            raise DimensionError(f"inconsistent A {A.shape} and B {B.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        if self.C is not None:
            C = _stack(self.C, "C")
            if C.shape[-2] != A.shape[-1]:
                raise DimensionError(f"C must have {A.shape[-1]} rows")
            object.__setattr__(self, "C", C)
        lengths = {a.shape[0] for a in (self.A, self.B, self.C) if a is not None and a.ndim == 3}
        if len(lengths) > 1:
            raise DimensionError("time-varying matrices have different horizons")

    @property
    def state_dim(self) -> int:
        return self.A.shape[-1]

    @property
    def input_dim(self) -> int:
        return self.B.shape[-1]

    @property
    def horizon(self) -> int | None:
        for a in (self.A, self.B, self.C):
            if a is not None and a.ndim == 3:
                return a.shape[0]
        return None

    def at(self, n: int):
        C = None if self.C is None else _pick(self.C, n)
        return _pick(self.A, n), _pick(self.B, n), C


def _const_or_fn(value):
    if callable(value):
        return value
    arr = as_matrix(value)
    return lambda t: arr


@dataclass(frozen=True)
class LinearSystemContinuous:
    """``dx = (A x + B u) dt + C dw``; each matrix may be a constant or a function of time."""

    A: Array | Callable
    B: Array | Callable
    C: Array | Callable | None = None

    def at(self, t: float):
        A = _const_or_fn(self.A)(t)
        B = _const_or_fn(self.B)(t)
        C = None if self.C is None else _const_or_fn(self.C)(t)
        return as_matrix(A), as_matrix(B), None if C is None else as_matrix(C)

    @property
    def is_constant(self) -> bool:
        return not any(callable(m) for m in (self.A, self.B, self.C))


@dataclass(frozen=True)
class QuadraticCost:
    """Quadratic stage/terminal weights plus a discount (discrete) or decay rate (continuous)."""

    Q: Array | Callable
    R: Array | Callable
    P: Array | Callable | None = None
    Q_final: Array | None = None
    discount: float = 1.0
    decay: float = 0.0

    def __post_init__(self):
        for name in ("Q", "R"):
            val = getattr(self, name)
            if not callable(val):
                object.__setattr__(self, name, _stack(val, name))
        if self.P is not None and not callable(self.P):
            object.__setattr__(self, "P", _stack(self.P, "P"))
        if self.Q_final is not None:
            object.__setattr__(self, "Q_final", as_matrix(self.Q_final, "Q_final"))
            check_psd(self.Q_final, "Q_final")
        if not callable(self.Q):
            for q in np.reshape(self.Q, (-1, *self.Q.shape[-2:])):
                check_psd(q, "Q")
        if not callable(self.R):
            for r in np.reshape(self.R, (-1, *self.R.shape[-2:])):
                check_pd(r, "R")
        if not 0.0 <= self.discount <= 1.0:
            raise InvalidSpecError("discount must lie in [0, 1]")
        if self.decay < 0:
            raise InvalidSpecError("decay must be non-negative")

    def at(self, n_or_t, n_states: int, n_inputs: int):
        def get(val):
            if callable(val):
                return as_matrix(val(n_or_t))
            return _pick(val, int(n_or_t)) if val.ndim == 3 else val
        P = np.zeros((n_inputs, n_states)) if self.P is None else get(self.P)
        return get(self.Q), get(self.R), P

    def final(self, n_states: int) -> Array:
        return np.zeros((n_states, n_states)) if self.Q_final is None else self.Q_final


@dataclass(frozen=True)
class RiccatiSolution:
    """Value matrices, gains (``u = K x``) and the stochastic value offset.

    Finite-horizon solutions hold sequences (``S``: ``(N+1, n, n)``, ``K``:
    ``(N, m, n)`` discrete or ``(N+1, m, n)`` continuous, ``upsilon``:
    ``(N+1,)``); stationary ones hold single matrices and a scalar.
    """

    S: Array
    K: Array
    upsilon: Array | float
    times: Array | None = None
    iterations: int = 0
    residual: float = 0.0
    stationary: bool = False

    def policy(self, x, index: int = 0) -> Array:
        K = self.K if self.stationary else self.K[index]
        return K @ np.asarray(x, dtype=float)

    def value(self, x, index: int = 0) -> float:
        x = np.asarray(x, dtype=float)
        S = self.S if self.stationary else self.S[index]
        ups = self.upsilon if self.stationary else self.upsilon[index]
        return float(0.5 * x @ S @ x + ups)

    def to_csv(self, target=None):
        S = self.S[None] if self.stationary else self.S
        K = self.K[None] if self.stationary else self.K
        ups = np.atleast_1d(self.upsilon)
        n, m = S.shape[-1], K.shape[-2]
        header = (["n_or_t"] + [f"S_{i}_{j}" for i in range(n) for j in range(n)]
                  + [f"K_{i}_{j}" for i in range(m) for j in range(n)] + ["upsilon"])
        index = self.times if self.times is not None else np.arange(S.shape[0])
        rows = []
        for r in range(S.shape[0]):
            k = K[r].ravel() if r < K.shape[0] else [None] * (m * n)
            rows.append([index[r], *S[r].ravel(), *k, ups[r]])
        return _csv.write_rows(target, header, rows)


# ---------------------------------------------------------------- discrete

def _riccati_step(S: Array, A: Array, B: Array, Q: Array, R: Array, P: Array, alpha: float):
    H = R + alpha * B.T @ S @ B
    G = P + alpha * B.T @ S @ A
    try:
        K = -np.linalg.solve(H, G)
    except np.linalg.LinAlgError:
        raise DivergenceError("R + B'SB is singular") from None
    S_new = symmetrize(Q + alpha * A.T @ S @ A + G.T @ K)
    return S_new, K


def _horizon(sys: LinearSystemDiscrete, horizon: int | None) -> int:
    N = horizon if horizon is not None else sys.horizon
    if N is None:
        raise InvalidSpecError("horizon is required for time-invariant matrices")
    if sys.horizon is not None and sys.horizon < N:
        raise DimensionError("system matrices are shorter than the horizon")
    if N < 1:
        raise InvalidSpecError("horizon must be >= 1")
    return int(N)


def _discrete_finite(sys, cost, horizon, alpha):
    N = _horizon(sys, horizon)
    n, m = sys.state_dim, sys.input_dim
    S = np.empty((N + 1, n, n))
    K = np.empty((N, m, n))
    ups = np.zeros(N + 1)
    S[N] = cost.final(n)
    for k in range(N - 1, -1, -1):
        A, B, C = sys.at(k)
        Q, R, P = cost.at(k, n, m)
        S[k], K[k] = _riccati_step(S[k + 1], A, B, Q, R, P, alpha)
        if C is not None:
            ups[k] = 0.5 * alpha * np.trace(S[k + 1] @ C @ C.T) + alpha * ups[k + 1]
    return RiccatiSolution(S, K, ups, iterations=N)


def lqr_discrete_finite(sys: LinearSystemDiscrete, cost: QuadraticCost,
                        horizon: int | None = None) -> RiccatiSolution:
    """Backward discrete Riccati recursion from ``S_N = Q_final`` (noise ignored)."""
    return _discrete_finite(LinearSystemDiscrete(sys.A, sys.B), cost, horizon, 1.0)


def lqg_discrete_finite(sys: LinearSystemDiscrete, cost: QuadraticCost,
                        horizon: int | None = None) -> RiccatiSolution:
    """Discounted Riccati recursion plus ``upsilon_n = a/2 tr(S' C C') + a upsilon'``."""
    alpha = cost.discount
    if not 0 < alpha <= 1:
        raise InvalidSpecError("discount must lie in (0, 1]")
    return _discrete_finite(sys, cost, horizon, alpha)


def _discrete_fixed_point(sys, cost, alpha, tol, max_iters, S0):
    if sys.horizon is not None or any(
            not callable(c) and np.ndim(c) == 3 for c in (cost.Q, cost.R, cost.P) if c is not None):
        raise InvalidSpecError("infinite-horizon solvers need constant matrices")
    A, B, _ = sys.at(0)
    n, m = sys.state_dim, sys.input_dim
    Q, R, P = cost.at(0, n, m)
    S = np.zeros((n, n)) if S0 is None else symmetrize(as_matrix(S0))
    delta = np.inf
    for it in range(1, max_iters + 1):
        S_new, K = _riccati_step(S, A, B, Q, R, P, alpha)
        if not np.all(np.isfinite(S_new)) or np.abs(S_new).max() > _BLOWUP:
            raise DivergenceError("Riccati iteration diverged", step=it, residual=float(delta))
        delta = float(np.abs(S_new - S).max())
        S = S_new
        if delta < tol:
            _, K = _riccati_step(S, A, B, Q, R, P, alpha)
            return S, K, it, delta
    raise DivergenceError(f"no convergence within {max_iters} iterations (last update {delta:.3e})",
                          step=max_iters, residual=delta)


def lqr_discrete_infinite(sys: LinearSystemDiscrete, cost: QuadraticCost, tol: float = DEFAULT_TOL,
                          max_iters: int = DEFAULT_MAX_ITERS, S0=None) -> RiccatiSolution:
    S, K, it, res = _discrete_fixed_point(sys, cost, 1.0, tol, max_iters, S0)
    return RiccatiSolution(S, K, 0.0, iterations=it, residual=res, stationary=True)


def lqg_discrete_infinite(sys: LinearSystemDiscrete, cost: QuadraticCost, tol: float = DEFAULT_TOL,
                          max_iters: int = DEFAULT_MAX_ITERS, S0=None) -> RiccatiSolution:
    """Discounted ARE fixed point with ``upsilon = a/(2(1-a)) tr(S C C')``; needs ``0 < a < 1``."""
    alpha = cost.discount
    if not 0 < alpha < 1:
        raise InvalidSpecError(
            f"discount must satisfy 0 < alpha < 1 (got {alpha}); the noise offset is unbounded at alpha = 1")
    S, K, it, res = _discrete_fixed_point(sys, cost, alpha, tol, max_iters, S0)
    ups = 0.0
    if sys.C is not None:
        C = sys.at(0)[2]
        ups = alpha / (2.0 * (1.0 - alpha)) * float(np.trace(S @ C @ C.T))
    return RiccatiSolution(S, K, ups, iterations=it, residual=res, stationary=True)


# -------------------------------------------------------------- continuous

def care_residual(S, A, B, Q, R, P=None, decay: float = 0.0) -> Array:
    """Left-hand side of ``SA + A'S - (P+B'S)'R^-1(P+B'S) + Q - decay*S = 0``."""
    S, A, B, Q, R = (as_matrix(v) for v in (S, A, B, Q, R))
    P = np.zeros((B.shape[1], A.shape[0])) if P is None else as_matrix(P)
    M = P + B.T @ S
    return S @ A + A.T @ S - M.T @ np.linalg.solve(R, M) + Q - decay * S


def _ode_rhs(S, U, A, B, C, Q, R, P, beta):
    """Derivatives in reversed time ``tau = T - t`` for ``(S, upsilon)``."""
    M = P + B.T @ S
    dS = Q + S @ A + A.T @ S - M.T @ np.linalg.solve(R, M) - beta * S
    dU = -beta * U
    if C is not None:
        dU += 0.5 * float(np.trace(S @ C @ C.T))
    return dS, dU


def _continuous_gain(S, B, R, P):
    return -np.linalg.solve(R, P + B.T @ S)


def _continuous_finite(sys: LinearSystemContinuous, cost: QuadraticCost, grid: TimeGrid,
                       with_noise: bool) -> RiccatiSolution:
    times = grid.times
    h = grid.dt
    beta = cost.decay
    A0, B0, _ = sys.at(times[-1])
    n, m = A0.shape[0], B0.shape[1]

    def mats(t):
        A, B, C = sys.at(t)
        Q, R, P = cost.at(t, n, m)
        return A, B, (C if with_noise else None), Q, R, P

    S = np.empty((grid.steps + 1, n, n))
    ups = np.zeros(grid.steps + 1)
    K = np.empty((grid.steps + 1, m, n))
    S[-1] = cost.final(n)
    for i in range(grid.steps, 0, -1):
        t = times[i]
        Si, Ui = S[i], ups[i]
        m_hi, m_mid, m_lo = mats(t), mats(t - 0.5 * h), mats(t - h)
        k1 = _ode_rhs(Si, Ui, *m_hi, beta)
        k2 = _ode_rhs(Si + 0.5 * h * k1[0], Ui + 0.5 * h * k1[1], *m_mid, beta)
        k3 = _ode_rhs(Si + 0.5 * h * k2[0], Ui + 0.5 * h * k2[1], *m_mid, beta)
        k4 = _ode_rhs(Si + h * k3[0], Ui + h * k3[1], *m_lo, beta)
        S_new = symmetrize(Si + h / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]))
        ups[i - 1] = Ui + h / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        if not np.all(np.isfinite(S_new)) or np.abs(S_new).max() > _BLOWUP:
            raise FiniteEscapeError(f"Riccati solution escapes near t={times[i - 1]:.6g}", time=times[i - 1])
        S[i - 1] = S_new
    for i, t in enumerate(times):
        _, B, _, _, R, P = mats(t)
        K[i] = _continuous_gain(S[i], B, R, P)
    return RiccatiSolution(S, K, ups, times=times, iterations=grid.steps)


def lqr_continuous_finite(sys: LinearSystemContinuous, cost: QuadraticCost,
                          grid: TimeGrid) -> RiccatiSolution:
    """Integrate the Riccati ODE backward from ``S(T) = Q_final`` with fixed-step RK4."""
    return _continuous_finite(sys, cost, grid, with_noise=False)


def lqg_continuous_finite(sys: LinearSystemContinuous, cost: QuadraticCost,
                          grid: TimeGrid) -> RiccatiSolution:
    """As :func:`lqr_continuous_finite`, plus ``upsilon(t) = 1/2 int_t^T tr(S C C') dtau``."""
    return _continuous_finite(sys, cost, grid, with_noise=True)


def _stationary_continuous(sys, cost, beta, tol, max_steps, step):
    if not sys.is_constant or any(callable(c) for c in (cost.Q, cost.R, cost.P)):
        raise InvalidSpecError("infinite-horizon solvers need constant matrices")
    A, B, _ = sys.at(0.0)
    n, m = A.shape[0], B.shape[1]
    Q, R, P = cost.at(0.0, n, m)
    if step is None:
        gain_scale = np.linalg.norm(B @ np.linalg.solve(R, B.T), 2)
        rate = 1.0 + 2 * np.linalg.norm(A, 2) + beta + 2 * np.sqrt(np.linalg.norm(Q, 2) * gain_scale) \
            + np.linalg.norm(P, 2) * np.sqrt(gain_scale)
        step = 0.25 / rate
    S = np.zeros((n, n))

    def F(X):
        return _ode_rhs(X, 0.0, A, B, None, Q, R, P, beta)[0]

    res = np.inf
    for it in range(1, max_steps + 1):
        k1 = F(S)
        res = float(np.abs(k1).max())
        if res < tol:
            return S, _continuous_gain(S, B, R, P), it, res
        k2 = F(S + 0.5 * step * k1)
        k3 = F(S + 0.5 * step * k2)
        k4 = F(S + step * k3)
        S = symmetrize(S + step / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4))
        if not np.all(np.isfinite(S)) or np.abs(S).max() > _BLOWUP:
            raise DivergenceError("Riccati integration diverged; the pair (A, B) may not be stabilizable",
                                  step=it, residual=res)
    raise DivergenceError(f"no stationary point within {max_steps} steps (residual {res:.3e})",
                          step=max_steps, residual=res)


def lqr_continuous_infinite(sys: LinearSystemContinuous, cost: QuadraticCost, tol: float = DEFAULT_TOL,
                            max_steps: int = 10 * DEFAULT_MAX_ITERS, step: float | None = None
                            ) -> RiccatiSolution:
    """Solve the CARE by integrating the Riccati ODE backward until its residual is below ``tol``."""
    S, K, it, res = _stationary_continuous(sys, cost, 0.0, tol, max_steps, step)
    return RiccatiSolution(S, K, 0.0, iterations=it, residual=res, stationary=True)


def lqg_continuous_infinite(sys: LinearSystemContinuous, cost: QuadraticCost, tol: float = DEFAULT_TOL,
                            max_steps: int = 10 * DEFAULT_MAX_ITERS, step: float | None = None
                            ) -> RiccatiSolution:
    """Decay-shifted CARE with ``upsilon = tr(S C C') / (2 beta)``; needs ``beta > 0``."""
    beta = cost.decay
    if not beta > 0:
        raise InvalidSpecError(f"decay must be > 0 for the infinite-horizon LQG (got {beta})")
    S, K, it, res = _stationary_continuous(sys, cost, beta, tol, max_steps, step)
    ups = 0.0
    C = sys.at(0.0)[2]
    if C is not None:
        ups = float(np.trace(S @ C @ C.T)) / (2.0 * beta)
    return RiccatiSolution(S, K, ups, iterations=it, residual=res, stationary=True)


# -------------------------------------------------------------- evaluation

def linear_policy_cost(sys: LinearSystemDiscrete, cost: QuadraticCost, gains, x0,
                       horizon: int | None = None) -> float:
    """Exact expected cost of ``u_n = K_n x_n`` by propagating the second moment ``E[x x']``."""
    N = _horizon(sys, horizon if horizon is not None else (None if np.ndim(gains) == 2 else len(gains)))
    n, m = sys.state_dim, sys.input_dim
    gains = np.asarray(gains, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    M = np.outer(x0, x0) if x0.ndim == 1 else x0
    alpha = cost.discount
    total = 0.0
    for k in range(N):
        A, B, C = sys.at(k)
        Q, R, P = cost.at(k, n, m)
        K = gains if gains.ndim == 2 else gains[k]
        W = Q + K.T @ R @ K + K.T @ P + P.T @ K
        total += alpha ** k * 0.5 * float(np.trace(W @ M))
        Acl = A + B @ K
        M = Acl @ M @ Acl.T
        if C is not None:
            M = M + C @ C.T
    total += alpha ** N * 0.5 * float(np.trace(cost.final(n) @ M))
    return total
