"""Canonical problem instances shared by the solvers, the tests and the command line.

Every constructor is pure: the same arguments give an equal instance.
:data:`TESTBEDS` maps a string key to each constructor and :func:`make`
builds one by key.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ilqc, lq
from .errors import InvalidSpecError
from .path_integral import LmdpProblem
from .sde import ControlAffineSystem, TimeGrid
from .tabular_rl import TabularMdp

Array = np.ndarray

GRAVITY = 9.81


def make_scalar_lq(a: float = 1.0, b: float = 1.0, q: float = 1.0, r: float = 1.0, q_T: float | None = None,
                   continuous: bool = False, noise: float | None = None, discount: float = 1.0,
                   decay: float = 0.0):
    """``x' = a x + b u`` (or ``dx = (a x + b u) dt``) with ``1/2 (q x^2 + r u^2)`` stage and ``1/2 q_T x^2`` final cost.

    ``q_T`` defaults to ``q``; ``noise`` sets ``C`` for the LQG variants.
    """
    if not r > 0:
        raise InvalidSpecError("r must be positive")
    C = None if noise is None else [[noise]]
    sys = (lq.LinearSystemContinuous([[a]], [[b]], C) if continuous
           else lq.LinearSystemDiscrete([[a]], [[b]], C))
    cost = lq.QuadraticCost([[q]], [[r]], Q_final=[[q if q_T is None else q_T]], discount=discount, decay=decay)
    return sys, cost


def make_double_integrator(dt: float = 0.1, q: float = 1.0, r: float = 1.0, noise: float | None = None):
    """Exact zero-order-hold discretisation of ``p'' = u`` with state ``(p, v)``."""
    if dt < 0:
        raise InvalidSpecError("dt must be non-negative")
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.5 * dt * dt], [dt]])
    C = None if noise is None else noise * np.eye(2)
    return lq.LinearSystemDiscrete(A, B, C), lq.QuadraticCost(q * np.eye(2), [[r]], Q_final=q * np.eye(2))


@dataclass(frozen=True)
class Pendulum:
    """``theta'' = -(g/l) sin theta - d theta' + u / (m l^2)`` with ``theta = 0`` hanging down.

    The step map is semi-implicit Euler: the velocity is updated first and
    the angle uses the new velocity.
    """

    mass: float = 1.0
    length: float = 1.0
    damping: float = 0.1
    dt: float = 0.05

    def __post_init__(self):
        if not (self.mass > 0 and self.length > 0 and self.dt > 0 and self.damping >= 0):
            raise InvalidSpecError("pendulum needs positive mass, length, dt and non-negative damping")

    @property
    def inertia(self) -> float:
        return self.mass * self.length ** 2

    def step(self, n, x, u):
        th, om = x
        om_new = om + self.dt * (-(GRAVITY / self.length) * np.sin(th) - self.damping * om + u[0] / self.inertia)
        return np.array([th + self.dt * om_new, om_new])

    def jac_x(self, n, x, u):
        h, w2 = self.dt, GRAVITY / self.length
        dom_dth = -h * w2 * np.cos(x[0])
        dom_dom = 1 - h * self.damping
        return np.array([[1 + h * dom_dth, h * dom_dom], [dom_dth, dom_dom]])

    def jac_u(self, n, x, u):
        h = self.dt
        return np.array([[h * h / self.inertia], [h / self.inertia]])

    def energy(self, x) -> float:
        th, om = x
        return 0.5 * self.inertia * om ** 2 + self.mass * GRAVITY * self.length * (1 - np.cos(th))

    def system(self) -> ilqc.NonlinearDiscreteSystem:
        return ilqc.NonlinearDiscreteSystem(2, 1, self.step, self.jac_x, self.jac_u)


def make_pendulum(m: float = 1.0, l: float = 1.0, damping: float = 0.1, dt: float = 0.05) -> Pendulum:
    return Pendulum(m, l, damping, dt)


@dataclass(frozen=True)
class SwingUp:
    system: ilqc.NonlinearDiscreteSystem
    cost: ilqc.StageCostModel
    x0: Array
    horizon: int


def make_pendulum_swingup(horizon: int = 100, dt: float = 0.05, damping: float = 0.1, q_angle: float = 0.1,
                          q_rate: float = 0.01, r: float = 0.01, final_angle: float = 100.0,
                          final_rate: float = 10.0) -> SwingUp:
    """Bring the pendulum from hanging still to upright at rest in ``horizon`` steps."""
    pend = Pendulum(damping=damping, dt=dt)
    cost = ilqc.quadratic_stage_cost(np.diag([q_angle, q_rate]) * dt, [[r * dt]], np.diag([final_angle, final_rate]),
                                     x_ref=[np.pi, 0.0])
    return SwingUp(pend.system(), cost, np.zeros(2), horizon)


def make_lmdp_scalar(a: float = 0.5, sigma: float = 1.0, r: float = 1.0, q: float = 1.0, phi_T: float = 1.0,
                     T: float = 1.0, dt: float = 0.01) -> LmdpProblem:
    """``dx = a x dt + (u dt + dw)``, ``Var dw = sigma dt``, cost ``1/2 q x^2``, ``1/2 r u^2`` and ``1/2 phi_T x(T)^2``.

    ``lambda = r sigma``.
    """
    sys = ControlAffineSystem(1, 1, lambda t, x: a * x, lambda t, x: np.ones(x.shape[:-1] + (1, 1)), [[sigma]])
    return LmdpProblem(sys, [[r]], lambda t, x: 0.5 * q * x[..., 0] ** 2, lambda x: 0.5 * phi_T * x[..., 0] ** 2,
                       TimeGrid(dt, int(round(T / dt))))


def make_lmdp_diagonal(a, sigma, r, q, phi_T: float = 1.0, T: float = 1.0, dt: float = 0.01) -> LmdpProblem:
    """Decoupled vector variant with diagonal ``A``, ``Sigma``, ``R`` and ``Q``; rejected unless ``R Sigma = lambda I``."""
    a, sigma, r, q = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (a, sigma, r, q))
    n = a.size
    sys = ControlAffineSystem(n, n, lambda t, x: a * x, lambda t, x: np.broadcast_to(np.eye(n), x.shape[:-1] + (n, n)),
                              np.diag(sigma))
    return LmdpProblem(sys, np.diag(r), lambda t, x: 0.5 * (q * x ** 2).sum(-1),
                       lambda x: 0.5 * phi_T * (x ** 2).sum(-1), TimeGrid(dt, int(round(T / dt))))


def make_point_mass_reaching(target: float = 1.0, r: float = 0.01, sigma: float = 1.0, T: float = 1.0,
                             dt: float = 0.01, w_position: float = 100.0, w_velocity: float = 10.0) -> LmdpProblem:
    """``p'' = u`` from rest at 0; only the terminal cost ``w_p (p - target)^2 + w_v v^2`` penalises the state."""
    def drift(t, x):
        return np.stack([x[..., 1], np.zeros_like(x[..., 1])], -1)

    def input_map(t, x):
        g = np.zeros(x.shape[:-1] + (2, 1))
        g[..., 1, 0] = 1.0
        return g
    sys = ControlAffineSystem(2, 1, drift, input_map, [[sigma]])
    return LmdpProblem(sys, [[r]], lambda t, x: np.zeros(x.shape[:-1]),
                       lambda x: w_position * (x[..., 0] - target) ** 2 + w_velocity * x[..., 1] ** 2,
                       TimeGrid(dt, int(round(T / dt))))


GRID_ACTIONS = ((-1, 0), (1, 0), (0, 1), (0, -1))   # N, S, E, W as (row, column) moves


def make_gridworld(width: int = 4, height: int = 4, terminals=None, step_reward: float = -1.0,
                   goal_reward: float = 0.0, discount: float = 0.9, slip: float = 0.0) -> TabularMdp:
    """Grid of ``height x width`` cells indexed ``row * width + col`` with actions N, S, E, W.

    Moves into a wall leave the agent in place. Entering a terminal cell
    pays ``goal_reward``, every other move ``step_reward``; terminal cells
    are absorbing with zero reward. With ``slip > 0`` the executed move is
    replaced by a uniformly random one with that probability. ``terminals``
    are ``(row, col)`` cells and default to the two opposite corners.
    """
    if width < 1 or height < 1 or not 0 <= slip <= 1:
        raise InvalidSpecError("grid needs positive size and slip in [0, 1]")
    X = width * height
    if terminals is None:
        terminals = ((0, 0), (height - 1, width - 1))
    if any(not (0 <= r < height and 0 <= c < width) for r, c in terminals):
        raise InvalidSpecError("terminal cell outside the grid")
    terms = sorted({r * width + c for r, c in terminals})
    P = np.zeros((4, X, X))
    R = np.zeros((4, X, X))
    for row in range(height):
        for col in range(width):
            x = row * width + col
            for u in range(4):
                if x in terms:
                    P[u, x, x] = 1.0
                    continue
                for v, (dr, dc) in enumerate(GRID_ACTIONS):
                    p = (1 - slip) * (u == v) + slip / 4
                    if p == 0:
                        continue
                    rr, cc = row + dr, col + dc
                    y = rr * width + cc if 0 <= rr < height and 0 <= cc < width else x
                    P[u, x, y] += p
                    R[u, x, y] = goal_reward if y in terms else step_reward
    return TabularMdp(P, R, discount, tuple(terms))


TESTBEDS: dict[str, Callable] = {
    "double_integrator": make_double_integrator,
    "gridworld": make_gridworld,
    "lmdp_scalar": make_lmdp_scalar,
    "pendulum": make_pendulum,
    "pendulum_swingup": make_pendulum_swingup,
    "point_mass_reaching": make_point_mass_reaching,
    "scalar_lq": make_scalar_lq,
}


def make(name: str, **params):
    try:
        ctor = TESTBEDS[name]
    except KeyError:
        raise InvalidSpecError(f"unknown testbed {name!r}") from None
    return ctor(**params)
