"""Iterative linear-quadratic control for deterministic discrete-time systems.

Each iteration rolls out the current affine policy, builds a local linear
model and quadratic cost around the nominal trajectory, solves the resulting
LQ subproblem backward in time and updates the policy with a backtracking
step on the feedforward term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _csv
from ._linalg import as_matrix, symmetrize
from .errors import DimensionError, DivergenceError, InvalidSpecError, RegularizationError

Array = np.ndarray

FD_STEP = 1e-5
HESSIAN_STEP = 1e-4
REG_BASE = 1e-6
REG_CAP = 1e6
DEFAULT_ALPHAS = tuple(0.5**k for k in range(12))


def _fd_scale(v: Array, h: float) -> Array:
    return h * (1.0 + np.abs(v))


def fd_jacobian(fn: Callable[[Array], Array], v: Array, h: float = FD_STEP) -> Array:
    """Central-difference Jacobian with the relative step ``h (1 + |v_i|)``."""
    v = np.asarray(v, dtype=float)
    steps = _fd_scale(v, h)
    cols = []
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = steps[i]
        cols.append((np.asarray(fn(v + e)) - np.asarray(fn(v - e))) / (2 * steps[i]))
    return np.stack(cols, axis=-1) if cols else np.zeros((np.size(fn(v)), 0))


def fd_gradient(fn: Callable[[Array], float], v: Array, h: float = FD_STEP) -> Array:
    return fd_jacobian(lambda z: np.array([fn(z)]), v, h)[0]


def fd_hessian(fn: Callable[[Array], float], v: Array, h: float = HESSIAN_STEP) -> Array:
    """Symmetric four-point second differences."""
    v = np.asarray(v, dtype=float)
    steps = _fd_scale(v, h)
    d = v.size
    H = np.empty((d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = steps[i]
        for j in range(i, d):
            ej = np.zeros(d)
            ej[j] = steps[j]
            val = (fn(v + ei + ej) - fn(v + ei - ej) - fn(v - ei + ej) + fn(v - ei - ej)) / (4 * steps[i] * steps[j])
            H[i, j] = H[j, i] = val
    return H


@dataclass(frozen=True)
class NonlinearDiscreteSystem:
    """``x[n+1] = f(n, x[n], u[n])``; Jacobians default to central differences."""

    state_dim: int
    input_dim: int
    step: Callable[[int, Array, Array], Array]
    jac_x: Callable[[int, Array, Array], Array] | None = None
    jac_u: Callable[[int, Array, Array], Array] | None = None
    fd_step: float = FD_STEP

    def __call__(self, n: int, x: Array, u: Array) -> Array:
        return np.asarray(self.step(n, x, u), dtype=float)

    def jacobians(self, n: int, x: Array, u: Array, analytic: bool = True) -> tuple[Array, Array]:
        if analytic and self.jac_x is not None:
            A = as_matrix(self.jac_x(n, x, u))
        else:
            A = fd_jacobian(lambda z: self(n, z, u), x, self.fd_step)
        if analytic and self.jac_u is not None:
            B = as_matrix(self.jac_u(n, x, u))
        else:
            B = fd_jacobian(lambda z: self(n, x, z), u, self.fd_step)
        return A, B

    @classmethod
    def linear(cls, A, B) -> "NonlinearDiscreteSystem":
        A, B = as_matrix(A), as_matrix(B)
        return cls(A.shape[0], B.shape[1], lambda n, x, u: A @ x + B @ u,
                   lambda n, x, u: A, lambda n, x, u: B)


@dataclass(frozen=True)
class StageCostModel:
    """Stage cost ``L(n, x, u)`` and terminal cost ``Phi(x)`` with optional analytic expansions.

    ``stage_expansion(n, x, u)`` returns ``(q, qx, Qxx, r, Ruu, Pux)`` and
    ``terminal_expansion(x)`` returns ``(q, qx, Qxx)``; missing expansions are
    computed by finite differences.
    """

    stage: Callable[[int, Array, Array], float]
    terminal: Callable[[Array], float]
    stage_expansion: Callable | None = None
    terminal_expansion: Callable | None = None
    fd_step: float = FD_STEP
    hessian_step: float = HESSIAN_STEP

    def expand_stage(self, n: int, x: Array, u: Array):
        if self.stage_expansion is not None:
            return self.stage_expansion(n, x, u)
        nx = x.size
        z = np.concatenate([x, u])

        def L(zz):
            return float(self.stage(n, zz[:nx], zz[nx:]))
        grad = fd_gradient(L, z, self.fd_step)
        hess = fd_hessian(L, z, self.hessian_step)
        return (L(z), grad[:nx], hess[:nx, :nx], grad[nx:], hess[nx:, nx:], hess[nx:, :nx])

    def expand_terminal(self, x: Array):
        if self.terminal_expansion is not None:
            return self.terminal_expansion(x)

        def phi(z):
            return float(self.terminal(z))
        return phi(x), fd_gradient(phi, x, self.fd_step), fd_hessian(phi, x, self.hessian_step)


def quadratic_stage_cost(Q, R, Q_final, P=None, x_ref=None, u_ref=None) -> StageCostModel:
    """``1/2 dx'Q dx + 1/2 du'R du + du'P dx`` around constant references, with exact expansions."""
    Q, R, Q_final = as_matrix(Q), as_matrix(R), as_matrix(Q_final)
    n, m = Q.shape[0], R.shape[0]
    P = np.zeros((m, n)) if P is None else as_matrix(P)
    xr = np.zeros(n) if x_ref is None else np.asarray(x_ref, dtype=float)
    ur = np.zeros(m) if u_ref is None else np.asarray(u_ref, dtype=float)

    def stage(k, x, u):
        dx, du = x - xr, u - ur
        return 0.5 * dx @ Q @ dx + 0.5 * du @ R @ du + du @ P @ dx

    def terminal(x):
        dx = x - xr
        return 0.5 * dx @ Q_final @ dx

    def stage_expansion(k, x, u):
        dx, du = x - xr, u - ur
        return stage(k, x, u), Q @ dx + P.T @ du, Q, R @ du + P @ dx, R, P

    def terminal_expansion(x):
        return terminal(x), Q_final @ (x - xr), Q_final

    return StageCostModel(stage, terminal, stage_expansion, terminal_expansion)


@dataclass(frozen=True)
class AffinePolicy:
    """``u_n(x) = u_bar_n + uff_n + K_n (x - x_bar_n)``."""

    u_bar: Array
    uff: Array
    K: Array
    x_bar: Array

    def __post_init__(self):
        u_bar = np.atleast_2d(np.asarray(self.u_bar, dtype=float))
        N, m = u_bar.shape
        object.__setattr__(self, "u_bar", u_bar)
        object.__setattr__(self, "uff", np.asarray(self.uff, dtype=float).reshape(N, m))
        K = np.asarray(self.K, dtype=float)
        x_bar = np.asarray(self.x_bar, dtype=float)
        if K.shape[:2] != (N, m) or x_bar.shape != (N + 1, K.shape[2]):
            raise DimensionError("policy arrays have inconsistent horizons or dimensions")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "x_bar", x_bar)

    @property
    def horizon(self) -> int:
        return self.u_bar.shape[0]

    def action(self, n: int, x: Array, alpha: float = 1.0) -> Array:
        return self.u_bar[n] + alpha * self.uff[n] + self.K[n] @ (x - self.x_bar[n])

    @classmethod
    def open_loop(cls, inputs, state_dim: int) -> "AffinePolicy":
        u = np.atleast_2d(np.asarray(inputs, dtype=float))
        N, m = u.shape
        return cls(u, np.zeros((N, m)), np.zeros((N, m, state_dim)), np.zeros((N + 1, state_dim)))

    def to_csv(self, target=None):
        """Rows ``n, uff..., K_flat...`` where ``uff`` is the full feedforward ``u_bar + uff``."""
        N, m, n = self.K.shape
        header = ["n"] + [f"uff_{j}" for j in range(m)] + [f"K_{i}_{j}" for i in range(m) for j in range(n)]
        ff = self.u_bar + self.uff
        rows = [[k, *ff[k], *self.K[k].ravel()] for k in range(N)]
        return _csv.write_rows(target, header, rows)


@dataclass(frozen=True)
class Trajectory:
    states: Array
    inputs: Array
    cost: float


def rollout(sys: NonlinearDiscreteSystem, cost: StageCostModel, policy: AffinePolicy, x0,
            alpha: float = 1.0) -> Trajectory:
    """Forward-simulate ``policy`` from ``x0`` and accumulate ``sum L + Phi``."""
    x0 = np.asarray(x0, dtype=float)
    if not np.all(np.isfinite(x0)) or x0.shape != (sys.state_dim,):
        raise InvalidSpecError("x0 must be a finite vector of the state dimension")
    N = policy.horizon
    xs = np.empty((N + 1, sys.state_dim))
    us = np.empty((N, sys.input_dim))
    xs[0] = x0
    total = 0.0
    for k in range(N):
        us[k] = policy.action(k, xs[k], alpha)
        total += float(cost.stage(k, xs[k], us[k]))
        xs[k + 1] = sys(k, xs[k], us[k])
        if not np.all(np.isfinite(xs[k + 1])):
            raise DivergenceError(f"state became non-finite at step {k + 1}", step=k + 1)
    total += float(cost.terminal(xs[N]))
    return Trajectory(xs, us, total)


@dataclass(frozen=True)
class LqApproximation:
    """Local model ``dx' = A dx + B du`` and the quadratic cost expansion along a trajectory."""

    A: Array
    B: Array
    q: Array
    qx: Array
    Qxx: Array
    r: Array
    Ruu: Array
    Pux: Array

    @property
    def horizon(self) -> int:
        return self.A.shape[0]


def linearize_quadratize(sys: NonlinearDiscreteSystem, cost: StageCostModel, traj: Trajectory,
                         analytic: bool = True) -> LqApproximation:
    N = traj.inputs.shape[0]
    n, m = sys.state_dim, sys.input_dim
    A = np.empty((N, n, n))
    B = np.empty((N, n, m))
    q = np.empty(N + 1)
    qx = np.empty((N + 1, n))
    Qxx = np.empty((N + 1, n, n))
    r = np.empty((N, m))
    Ruu = np.empty((N, m, m))
    Pux = np.empty((N, m, n))
    for k in range(N):
        x, u = traj.states[k], traj.inputs[k]
        A[k], B[k] = sys.jacobians(k, x, u, analytic)
        q[k], qx[k], Qxx[k], r[k], Ruu[k], Pux[k] = cost.expand_stage(k, x, u)
    q[N], qx[N], Qxx[N] = cost.expand_terminal(traj.states[N])
    return LqApproximation(A, B, q, qx, Qxx, r, Ruu, Pux)


@dataclass(frozen=True)
class BackwardPassResult:
    S: Array
    s: Array
    s0: Array
    g: Array
    G: Array
    H: Array
    uff: Array
    K: Array
    regularization: Array

    @property
    def regularized(self) -> bool:
        return bool(np.any(self.regularization > 0))


def _factor_with_regularization(H: Array, reg: float, cap: float):
    lam = reg
    eye = np.eye(H.shape[0])
    while True:
        Hr = H + lam * eye
        try:
            np.linalg.cholesky(Hr)
            return Hr, lam
        except np.linalg.LinAlgError:
            lam = REG_BASE if lam == 0 else lam * 10
            if lam > cap:
                raise RegularizationError(f"H is not positive definite even with regularization {cap:g}") from None


def backward_pass(lq: LqApproximation, regularization: float = 0.0, cap: float = REG_CAP) -> BackwardPassResult:
    N = lq.horizon
    n, m = lq.B.shape[1], lq.B.shape[2]
    S = np.empty((N + 1, n, n))
    s = np.empty((N + 1, n))
    s0 = np.empty(N + 1)
    g = np.empty((N, m))
    G = np.empty((N, m, n))
    H = np.empty((N, m, m))
    uff = np.empty((N, m))
    K = np.empty((N, m, n))
    lam = np.zeros(N)
    S[N], s[N], s0[N] = lq.Qxx[N], lq.qx[N], lq.q[N]
    for k in range(N - 1, -1, -1):
        A, B = lq.A[k], lq.B[k]
        g[k] = lq.r[k] + B.T @ s[k + 1]
        G[k] = lq.Pux[k] + B.T @ S[k + 1] @ A
        H[k], lam[k] = _factor_with_regularization(symmetrize(lq.Ruu[k] + B.T @ S[k + 1] @ B), regularization, cap)
        uff[k] = -np.linalg.solve(H[k], g[k])
        K[k] = -np.linalg.solve(H[k], G[k])
        Kt = K[k].T
        S[k] = symmetrize(lq.Qxx[k] + A.T @ S[k + 1] @ A + Kt @ H[k] @ K[k] + Kt @ G[k] + G[k].T @ K[k])
        s[k] = lq.qx[k] + A.T @ s[k + 1] + Kt @ H[k] @ uff[k] + Kt @ g[k] + G[k].T @ uff[k]
        s0[k] = lq.q[k] + s0[k + 1] + 0.5 * uff[k] @ H[k] @ uff[k] + uff[k] @ g[k]
    return BackwardPassResult(S, s, s0, g, G, H, uff, K, lam)


@dataclass(frozen=True)
class IlqcResult:
    policy: AffinePolicy
    trajectory: Trajectory
    cost_history: list = field(default_factory=list)
    alpha_history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    stalled: bool = False
    regularized: bool = False
    last_backward: BackwardPassResult | None = None

    def history_csv(self, target=None):
        rows = [[i, c, a] for i, (c, a) in enumerate(zip(self.cost_history, self.alpha_history))]
        return _csv.write_rows(target, ["iter", "cost", "alpha"], rows)


def ilqc_solve(sys: NonlinearDiscreteSystem, cost: StageCostModel, x0, initial_policy: AffinePolicy,
               max_iters: int = 50, alphas: Sequence[float] = DEFAULT_ALPHAS, cost_tol: float = 1e-10,
               u_tol: float = 1e-8, regularization: float = 0.0, analytic: bool = True) -> IlqcResult:
    """Iterate roll-out, local LQ approximation, backward pass and a backtracking update.

    Stops when the feedforward correction is below ``u_tol`` (the local
    problem is already solved), when an accepted step changes the cost by
    less than ``cost_tol`` and the inputs by less than ``u_tol``, or after
    ``max_iters`` accepted steps. When no step size lowers the cost the best
    trajectory so far is returned with ``stalled=True``.
    """
    traj = rollout(sys, cost, initial_policy, x0)
    costs, alpha_hist = [traj.cost], [None]
    converged = stalled = regularized = False
    iterations = 0
    bp = None
    while True:
        bp = backward_pass(linearize_quadratize(sys, cost, traj, analytic), regularization)
        regularized |= bp.regularized
        if np.abs(bp.uff).max(initial=0.0) < u_tol:
            converged = True
            break
        if iterations >= max_iters:
            break
        candidate = AffinePolicy(traj.inputs, bp.uff, bp.K, traj.states)
        accepted = None
        for a in alphas:
            try:
                trial = rollout(sys, cost, candidate, x0, a)
            except DivergenceError:
                continue
            if trial.cost < traj.cost:
                accepted = (trial, a)
                break
        if accepted is None:
            stalled = True
            break
        trial, a = accepted
        du = float(np.abs(trial.inputs - traj.inputs).max())
        dJ = traj.cost - trial.cost
        traj = trial
        costs.append(traj.cost)
        alpha_hist.append(a)
        iterations += 1
        if dJ < cost_tol and du < u_tol:
            converged = True
            break
    N, m = traj.inputs.shape
    policy = AffinePolicy(traj.inputs, np.zeros((N, m)), bp.K, traj.states)
    return IlqcResult(policy, traj, costs, alpha_hist, iterations, converged, stalled, regularized, bp)
