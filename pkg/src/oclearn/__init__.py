"""Stochastic optimal control and learning-control solvers.

Modules: ``sde`` (stochastic simulation and Fokker-Planck), ``lq`` (Riccati
solvers), ``ilqc`` (iterative linear-quadratic control), ``path_integral``
(path-integral estimators and PI2), ``policy_gradient`` (finite-difference
policy search), ``tabular_rl`` (dynamic programming, Monte Carlo and
Q-learning), ``testbeds`` (canonical problems) and ``cli``.
"""

from .errors import OclearnError

__version__ = "0.1.0"

__all__ = ["OclearnError", "__version__"]
