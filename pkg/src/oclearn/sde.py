"""Brownian motion, Euler-Maruyama integration and a 1-D Fokker-Planck grid solver.

Drift, input-map and control callables are evaluated on batches: they receive
``x`` with shape ``(..., n)`` and must broadcast over the leading axes
(``drift -> (..., n)``, ``input_map -> (..., n, m)``, ``control -> (..., m)``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _csv
from ._linalg import as_matrix, check_psd, psd_factor
from .errors import ContractError, DimensionError, DivergenceError, InvalidSpecError, StabilityError
from .rng import batch_draws

Array = np.ndarray
Control = Callable[[float, Array], Array]


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    steps: int
    t0: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidSpecError(f"dt must be positive, got {self.dt}")
        if int(self.steps) < 1:
            raise InvalidSpecError(f"steps must be >= 1, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))

    @classmethod
    def span(cls, t0: float, tf: float, steps: int) -> "TimeGrid":
        return cls(dt=(tf - t0) / steps, steps=steps, t0=t0)

    @property
    def tf(self) -> float:
        return self.t0 + self.steps * self.dt

    @property
    def times(self) -> Array:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    def index_of(self, t: float) -> int:
        i = int(round((t - self.t0) / self.dt))
        if i < 0 or i > self.steps or abs(self.t0 + i * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise InvalidSpecError(f"time {t} is not a node of the grid")
        return i


@dataclass(frozen=True)
class BrownianSpec:
    mu: Array
    sigma: Array

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        sigma = as_matrix(self.sigma, "sigma")
        if sigma.shape != (mu.size, mu.size):
            raise DimensionError(f"sigma shape {sigma.shape} does not match mu of size {mu.size}")
        check_psd(sigma, "sigma")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @property
    def dim(self) -> int:
        return self.mu.size


@dataclass(frozen=True)
class ControlAffineSystem:
    """``dx = f(t,x) dt + g(t,x) (u dt + dw)`` with ``dw ~ N(0, noise_cov dt)``."""

    state_dim: int
    input_dim: int
    drift: Callable[[float, Array], Array]
    input_map: Callable[[float, Array], Array]
    noise_cov: Array = None

    def __post_init__(self):
        cov = np.eye(self.input_dim) if self.noise_cov is None else as_matrix(self.noise_cov, "noise_cov")
        if cov.shape != (self.input_dim, self.input_dim):
            raise DimensionError(f"noise_cov must be {self.input_dim}x{self.input_dim}")
        check_psd(cov, "noise_cov")
        object.__setattr__(self, "noise_cov", cov)
        object.__setattr__(self, "_noise_factor", psd_factor(cov))

    @property
    def noise_factor(self) -> Array:
        return self._noise_factor


@dataclass(frozen=True)
class Rollout:
    """One sampled trajectory. ``noises`` are the Σ-distributed draws (``dw = sqrt(dt)*noise``)."""

    grid: TimeGrid
    states: Array
    inputs: Array
    noises: Array | None
    stage_costs: Array | None = None
    terminal_cost: float = 0.0
    start_index: int = 0

    def __post_init__(self):
        n_steps = self.grid.steps - self.start_index
        if self.states.shape[0] != n_steps + 1:
            raise DimensionError("states must have one more entry than steps")
        if self.inputs.shape[0] != n_steps:
            raise DimensionError("inputs must have one entry per step")
        if self.noises is not None and self.noises.shape[0] != n_steps:
            raise DimensionError("noises must have one entry per step")

    @property
    def times(self) -> Array:
        return self.grid.times[self.start_index:]

    @property
    def total(self) -> float:
        stage = 0.0 if self.stage_costs is None else float(np.sum(self.stage_costs))
        return stage + float(self.terminal_cost)

    def to_csv(self, target=None):
        n = self.states.shape[1]
        m = self.inputs.shape[1]
        header = ["t"] + [f"x_{i}" for i in range(n)] + [f"u_{j}" for j in range(m)]
        rows = []
        for i, t in enumerate(self.times):
            u = self.inputs[i] if i < self.inputs.shape[0] else [None] * m
            rows.append([t, *self.states[i], *u])
        return _csv.write_rows(target, header, rows)


@dataclass(frozen=True)
class RolloutBatch:
    grid: TimeGrid
    states: Array   # (K, steps+1, n)
    inputs: Array   # (K, steps, m)
    noises: Array   # (K, steps, m), Σ-distributed
    start_index: int = 0

    @property
    def size(self) -> int:
        return self.states.shape[0]

    @property
    def times(self) -> Array:
        return self.grid.times[self.start_index:]

    def __getitem__(self, k: int) -> Rollout:
        return Rollout(self.grid, self.states[k], self.inputs[k], self.noises[k],
                       start_index=self.start_index)


def sample_brownian(spec: BrownianSpec, grid: TimeGrid, paths: int, seed: int,
                    workers: int = 1) -> Array:
    """Brownian paths with drift, shape ``(paths, steps+1, dim)``; every path starts at 0."""
    if paths < 1:
        raise InvalidSpecError("paths must be >= 1")
    L = psd_factor(spec.sigma)
    z = np.stack(batch_draws(lambda g: g.standard_normal((grid.steps, spec.dim)), seed, paths,
                             stream=1, workers=workers))
    increments = spec.mu * grid.dt + np.sqrt(grid.dt) * (z @ L.T)
    out = np.zeros((paths, grid.steps + 1, spec.dim))
    np.cumsum(increments, axis=1, out=out[:, 1:])
    return out


def zero_control(m: int) -> Control:
    def control(t, x):
        return np.zeros(np.shape(x)[:-1] + (m,))
    return control


def path_noise(sys: ControlAffineSystem, steps: int, seed: int, paths: int, *, start: int = 0,
               stream: int = 2, uniforms: bool = False, workers: int = 1):
    """Σ-distributed noise per path (and optional per-step uniforms from the same stream)."""
    m = sys.input_dim

    def draw(g):
        z = g.standard_normal((steps, m))
        if uniforms:
            return z, g.random(steps)
        return z

    draws = batch_draws(draw, seed, paths, stream=stream, start=start, workers=workers)
    if uniforms:
        z = np.stack([d[0] for d in draws])
        uni = np.stack([d[1] for d in draws])
        return z @ sys.noise_factor.T, uni
    return np.stack(draws) @ sys.noise_factor.T


def simulate(sys: ControlAffineSystem, x0, control: Control | None, grid: TimeGrid, seed: int,
             paths: int, *, start_index: int = 0, noise: Array | None = None,
             stochastic: bool = True, stream: int = 2, workers: int = 1) -> RolloutBatch:
    """Vectorised Euler-Maruyama over ``paths`` independent rollouts.

    Path ``k`` draws its noise from its own counter-based stream, so the
    result does not depend on ``workers``. ``noise`` may be supplied directly
    (shape ``(paths, steps, m)``, Σ-distributed) to replay a batch.
    """
    n, m = sys.state_dim, sys.input_dim
    steps = grid.steps - start_index
    if steps < 1:
        raise InvalidSpecError("start index leaves no steps to simulate")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1] != n:
        raise DimensionError(f"x0 has dimension {x0.shape[-1]}, system has {n}")
    control = control or zero_control(m)
    if noise is None:
        noise = path_noise(sys, steps, seed, paths, stream=stream, workers=workers) if stochastic \
            else np.zeros((paths, steps, m))
    elif noise.shape != (paths, steps, m):
        raise DimensionError(f"noise must have shape {(paths, steps, m)}")
    sqdt = np.sqrt(grid.dt)
    states = np.empty((paths, steps + 1, n))
    inputs = np.empty((paths, steps, m))
    states[:, 0] = np.broadcast_to(x0, (paths, n))
    times = grid.times
    for i in range(steps):
        t = times[start_index + i]
        x = states[:, i]
        u = np.broadcast_to(control(t, x), (paths, m))
        inputs[:, i] = u
        f = np.broadcast_to(sys.drift(t, x), (paths, n))
        g = np.broadcast_to(sys.input_map(t, x), (paths, n, m))
        nxt = x + f * grid.dt + np.einsum("kij,kj->ki", g, u * grid.dt + sqdt * noise[:, i])
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(f"non-finite state at step {start_index + i + 1}",
                                  step=start_index + i + 1)
        states[:, i + 1] = nxt
    return RolloutBatch(grid, states, inputs, noise, start_index)


def euler_maruyama(sys: ControlAffineSystem, x0, control: Control | None, grid: TimeGrid,
                   seed: int, *, path_index: int = 0,
                   stage_cost: Callable | None = None,
                   terminal_cost: Callable | None = None) -> Rollout:
    """Single Euler-Maruyama rollout; ``stage_cost(t, x, u)`` is integrated as ``L dt``."""
    noise = path_noise(sys, grid.steps, seed, 1, start=path_index)
    batch = simulate(sys, x0, control, grid, seed, 1, noise=noise)
    roll = batch[0]
    if stage_cost is None and terminal_cost is None:
        return roll
    times = grid.times[:-1]
    costs = np.zeros(grid.steps) if stage_cost is None else np.array(
        [float(stage_cost(t, x, u)) * grid.dt for t, x, u in zip(times, roll.states[:-1], roll.inputs)])
    phi = 0.0 if terminal_cost is None else float(terminal_cost(roll.states[-1]))
    return Rollout(grid, roll.states, roll.inputs, roll.noises, costs, phi)


@dataclass(frozen=True)
class DensityGrid1d:
    x_min: float
    x_max: float
    cells: int
    values: Array
    t: float = 0.0

    def __post_init__(self):
        if not (self.x_max - self.x_min) / self.cells > 0:
            raise InvalidSpecError("cell width must be positive")
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.cells,):
            raise DimensionError(f"values must have {self.cells} entries")
        if np.any(vals < 0):
            raise InvalidSpecError("density values must be non-negative")
        object.__setattr__(self, "values", vals)

    @property
    def width(self) -> float:
        return (self.x_max - self.x_min) / self.cells

    @property
    def centers(self) -> Array:
        return self.x_min + self.width * (np.arange(self.cells) + 0.5)

    @property
    def mass(self) -> float:
        return float(self.values.sum() * self.width)

    @classmethod
    def delta(cls, x_min: float, x_max: float, cells: int, y: float) -> "DensityGrid1d":
        """Unit mass at ``y``, split linearly between the two nearest centres (mean preserved)."""
        width = (x_max - x_min) / cells
        pos = (y - x_min) / width - 0.5
        lo = int(np.floor(pos))
        frac = pos - lo
        vals = np.zeros(cells)
        if not 0 <= lo < cells - 1:
            raise InvalidSpecError("delta location must lie strictly inside the grid")
        vals[lo] = (1.0 - frac) / width
        vals[lo + 1] = frac / width
        return cls(x_min, x_max, cells, vals)

    @classmethod
    def from_function(cls, x_min: float, x_max: float, cells: int, pdf) -> "DensityGrid1d":
        tmp = cls(x_min, x_max, cells, np.zeros(cells))
        return cls(x_min, x_max, cells, np.asarray(pdf(tmp.centers), dtype=float))

    def l1_distance(self, other) -> float:
        """L1 distance to another grid on the same cells or to a density callable."""
        ref = other.values if isinstance(other, DensityGrid1d) else np.asarray(other(self.centers))
        return float(np.abs(self.values - ref).sum() * self.width)


def fokker_planck_1d(drift: Callable, diffusion: Callable, p0: DensityGrid1d, grid: TimeGrid, *,
                     noise_var: float = 1.0, sink: Callable | None = None, safety: float = 0.5,
                     save_every: int = 1) -> list[DensityGrid1d]:
    """Explicit finite-volume solution of ``p_t = -(f p)_x + 1/2 (D p)_xx - s p``.

    The step must satisfy ``dt * (max|f|/dx + max D/(safety*dx^2)) <= 1``,
    which reduces to ``dt <= safety*dx^2/max D`` without drift; otherwise
    :class:`StabilityError` reports the largest admissible ``dt``.

    ``D = g(t,x)^2 * noise_var``; ``sink(t, x)`` returns the annihilation rate
    ``q/lambda`` (omit for plain Fokker-Planck). Advection is upwinded,
    diffusion centred; the outermost cells are absorbing. Returns snapshots
    every ``save_every`` steps, first and last included.
    """
    dx = p0.width
    x = p0.centers
    faces = p0.x_min + dx * np.arange(1, p0.cells)
    p = p0.values.copy()
    out = [DensityGrid1d(p0.x_min, p0.x_max, p0.cells, p.copy(), grid.t0)]
    dt = grid.dt
    times = grid.times
    for i in range(grid.steps):
        t = times[i]
        f_face = np.broadcast_to(np.asarray(drift(t, faces), dtype=float), faces.shape)
        d_cell = np.broadcast_to(np.asarray(diffusion(t, x), dtype=float) ** 2 * noise_var, x.shape)
        dmax = float(d_cell.max(initial=0.0))
        fmax = float(np.abs(f_face).max(initial=0.0))
        rate = fmax / dx + (dmax / (safety * dx * dx) if dmax > 0 else 0.0)
        if rate > 0 and dt * rate > 1.0 + 1e-12:
            raise StabilityError(
                f"dt={dt:.3e} violates the explicit stability bound at t={t:.4g}; use dt <= {1.0 / rate:.3e}",
                suggested_dt=1.0 / rate)
        adv = np.maximum(f_face, 0.0) * p[:-1] + np.minimum(f_face, 0.0) * p[1:]
        dp = d_cell * p
        dif = -0.5 * (dp[1:] - dp[:-1]) / dx
        flux = np.concatenate(([0.0], adv + dif, [0.0]))
        # absorbing walls: outflow through the outer faces is lost
        flux[0] = -0.5 * dp[0] / dx + min(f_face[0] if f_face.size else 0.0, 0.0) * p[0]
        flux[-1] = 0.5 * dp[-1] / dx + max(f_face[-1] if f_face.size else 0.0, 0.0) * p[-1]
        p = p - dt / dx * (flux[1:] - flux[:-1])
        if sink is not None:
            p = p - dt * np.asarray(sink(t, x), dtype=float) * p
        p[0] = p[-1] = 0.0
        p = np.maximum(p, 0.0)
        if not np.all(np.isfinite(p)):
            raise DivergenceError(f"non-finite density at step {i + 1}", step=i + 1)
        if (i + 1) % save_every == 0 or i + 1 == grid.steps:
            out.append(DensityGrid1d(p0.x_min, p0.x_max, p0.cells, p.copy(), times[i + 1]))
    return out


def densities_to_csv(snapshots: Sequence[DensityGrid1d], target=None):
    rows = ([snap.t, xc, pv] for snap in snapshots for xc, pv in zip(snap.centers, snap.values))
    return _csv.write_rows(target, ["t", "x", "p"], rows)


def require_noises(roll: Rollout | RolloutBatch) -> Array:
    if roll.noises is None:
        raise ContractError("rollout carries no recorded noises")
    return roll.noises
