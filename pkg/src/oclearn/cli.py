"""Experiment runner binding testbeds to solvers.

A config is a flat ``key = value`` file with ``#`` comments::

    solver = lqr_discrete_infinite
    testbed = scalar_lq
    seed = 0
    testbed.q = 2.0

Keys are the general settings (``solver``, ``testbed``, ``seed``, ``out``,
``format``, ``workers``), the parameters of the chosen solver, and
``testbed.<name>`` for constructor arguments of the testbed. Environment
variables ``OCLEARN_<KEY>`` (``.`` written as ``__``) override the file and
command-line flags override both.

Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import inspect
import io
import json
import os
import sys
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import _csv, ilqc, lq
from . import path_integral as pi
from . import policy_gradient as pg
from . import tabular_rl as rl
from . import testbeds as tb
from .errors import InvalidSpecError, OclearnError
from .sde import TimeGrid

ENV_PREFIX = "OCLEARN_"
EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 1, 2, 3
FORMATS = ("csv", "json")


class ConfigError(InvalidSpecError):
    def __init__(self, message: str, line: int | str | None = None):
        where = f"line {line}" if isinstance(line, int) else line
        super().__init__(message if line is None else f"{where}: {message}")
        self.line = line


# ------------------------------------------------------------------ values

def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected true or false, got {text!r}")


def _parse_floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(","))


def _parse_format(text: str) -> str:
    if text not in FORMATS:
        raise ValueError(f"format must be one of {', '.join(FORMATS)}")
    return text


PARSERS: dict[str, Callable[[str], object]] = {
    "int": int, "float": float, "bool": _parse_bool, "str": str, "floats": _parse_floats, "format": _parse_format,
}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    return str(value)


# ----------------------------------------------------------------- solvers

@dataclass(frozen=True)
class Outcome:
    table: str               # CSV text
    metric: float
    diverged: bool = False


@dataclass(frozen=True)
class Solver:
    run: Callable[..., Outcome]
    testbeds: tuple
    params: Mapping[str, tuple] = field(default_factory=dict)   # name -> (kind, default)
    testbed_defaults: Mapping[str, object] = field(default_factory=dict)


def _require(cond: bool, message: str):
    if not cond:
        raise ConfigError(message)


def _lq_pair(obj, continuous: bool):
    sys_, cost = obj
    kind = lq.LinearSystemContinuous if continuous else lq.LinearSystemDiscrete
    _require(isinstance(sys_, kind), f"solver needs a {'continuous' if continuous else 'discrete'}-time system")
    return sys_, cost


def _riccati_outcome(sol: lq.RiccatiSolution) -> Outcome:
    S = sol.S if sol.stationary else sol.S[0]
    return Outcome(sol.to_csv(), float(np.trace(S)))


def _lq_runner(fn, continuous: bool, finite: bool):
    def run(obj, p, seed, workers):
        sys_, cost = _lq_pair(obj, continuous)
        if not finite:
            return _riccati_outcome(fn(sys_, cost, tol=p["tol"]))
        if continuous:
            return _riccati_outcome(fn(sys_, cost, TimeGrid(p["dt"], int(round(p["T"] / p["dt"])))))
        return _riccati_outcome(fn(sys_, cost, p["horizon"]))
    return run


DISCRETE_LQ_BEDS = ("scalar_lq", "double_integrator")


def _lq_solvers() -> dict:
    out = {}
    for kind in ("lqr", "lqg"):
        for time in ("discrete", "continuous"):
            for span in ("finite", "infinite"):
                name = f"{kind}_{time}_{span}"
                continuous = time == "continuous"
                if span == "infinite":
                    params = {"tol": ("float", lq.DEFAULT_TOL)}
                elif continuous:
                    params = {"T": ("float", 1.0), "dt": ("float", 1e-3)}
                else:
                    params = {"horizon": ("int", 50)}
                beds = ("scalar_lq",) if continuous else DISCRETE_LQ_BEDS
                out[name] = Solver(_lq_runner(getattr(lq, name), continuous, span == "finite"), beds, params,
                                   {"continuous": True} if continuous else {})
    return out


def _discrete_problem(obj, horizon: int, x0):
    """Nonlinear-model view of a discrete LQ testbed, or the swing-up task as is."""
    if isinstance(obj, tb.SwingUp):
        return obj.system, obj.cost, obj.x0, obj.horizon, None
    sys_, cost = _lq_pair(obj, continuous=False)
    A, B, C = sys_.at(0)
    n, m = sys_.state_dim, sys_.input_dim
    Q, R, P = cost.at(0, n, m)
    model = ilqc.NonlinearDiscreteSystem.linear(A, B)
    stage = ilqc.quadratic_stage_cost(Q, R, np.zeros((n, n)) if cost.Q_final is None else cost.Q_final, P)
    x = np.ones(n) if x0 is None else np.asarray(x0, dtype=float)
    _require(x.shape == (n,), f"x0 needs {n} entries")
    return model, stage, x, horizon, C


def _run_ilqc(obj, p, seed, workers):
    model, stage, x0, N, _ = _discrete_problem(obj, p["horizon"], p["x0"])
    n, m = model.state_dim, model.input_dim
    init = ilqc.AffinePolicy(np.zeros((N, m)), np.zeros((N, m)), np.zeros((N, m, n)), np.zeros((N + 1, n)))
    res = ilqc.ilqc_solve(model, stage, x0, init, max_iters=p["max_iters"])
    return Outcome(res.history_csv(), float(res.cost_history[-1]))


def _run_fd_descent(obj, p, seed, workers):
    model, stage, x0, N, C = _discrete_problem(obj, p["horizon"], p["x0"])
    noise = None if C is None else (lambda g, n: C @ g.standard_normal(C.shape[1]))
    policy = pg.linear_feedback(model.input_dim, model.state_dim)
    R = pg.return_function(model, stage, policy, x0, N, noise)
    res = pg.gradient_descent_fd(R, np.zeros(policy.dim), p["perturbations"], p["iterations"], lr=p["lr"],
                                 explore_std=p["explore_std"], ridge=p["ridge"], decay=p["decay"], seed=seed,
                                 workers=workers)
    metric = float(res.J_history[-1]) if res.J_history.size else float("nan")
    return Outcome(res.to_csv(), metric, res.diverged)


def _lmdp_start(problem: pi.LmdpProblem, x0, default: float):
    n = problem.sys.state_dim
    x = np.full(n, default) if x0 is None else np.asarray(x0, dtype=float)
    _require(x.shape == (n,), f"x0 needs {n} entries")
    return x


def _estimate_outcome(est: pi.Estimate) -> Outcome:
    value, se = np.atleast_1d(est.value), np.atleast_1d(est.se)
    header = [f"value_{i}" for i in range(value.size)] + [f"se_{i}" for i in range(se.size)]
    return Outcome(_csv.write_rows(None, header, [[*value, *se]]), float(value[0]))


def _run_desirability(obj, p, seed, workers):
    x0 = _lmdp_start(obj, p["x0"], 1.0)
    return _estimate_outcome(pi.estimate_desirability(obj, p["s"], x0, p["K"], seed, workers))


def _run_optimal_control(obj, p, seed, workers):
    x0 = _lmdp_start(obj, p["x0"], 1.0)
    return _estimate_outcome(pi.pi_optimal_control(obj, p["s"], x0, p["K"], seed, workers))


def _pi2_outcome(res: pi.Pi2Result) -> Outcome:
    rows = [[0, res.cost_history[0], None, None, None]]
    rows += [[k + 1, res.cost_history[k + 1], a, b, c]
             for k, (a, b, c) in enumerate(zip(res.mean_returns, res.min_returns, res.exploration))]
    text = _csv.write_rows(None, ["iter", "cost", "mean_return", "min_return", "c"], rows)
    return Outcome(text, float(res.cost_history[-1]))


def _pi2_runner(variant: str):
    def run(obj, p, seed, workers):
        grid = obj.grid
        basis = pi.RbfBasis.uniform(p["basis"], grid.t0, grid.t0 + grid.dt * grid.steps)
        m, n = obj.sys.input_dim, obj.sys.state_dim
        common = dict(K=p["K"], iterations=p["iterations"], c=p["c"], anneal_rate=p["anneal"], seed=seed,
                      workers=workers)
        if variant == "time_dependent":
            x0 = _lmdp_start(obj, p["x0"], 0.0)
            res = pi.pi2_time_dependent(obj, basis, np.zeros((m, basis.size)), x0, **common)
        elif variant == "general":
            x0 = _lmdp_start(obj, p["x0"], 0.0)
            res = pi.pi2_general(obj, basis, np.zeros((m, basis.size, 1 + n)), x0, **common)
        else:
            x0 = _lmdp_start(obj, p["x0"], 1.0)
            task = pi.GainTask(obj, lambda t: np.zeros(n))
            res = pi.pi2_feedback_gains(task, basis, np.zeros((task.gain_dim, basis.size)), x0, **common)
        return _pi2_outcome(res)
    return run


def _agreement(mdp: rl.TabularMdp, policy) -> float:
    """Share of non-terminal states whose action is optimal (ties count)."""
    Q = rl.value_iteration(mdp, 1e-12).Q
    states = np.flatnonzero(mdp.nonterminal)
    if states.size == 0:
        return 1.0
    return float(np.mean([Q[x, policy[x]] >= Q[x].max() - 1e-9 for x in states]))


def _run_policy_iteration(obj, p, seed, workers):
    res = rl.policy_iteration(obj, tol=p["tol"] if p["tol"] > 0 else None)
    return Outcome(res.value_csv(), float(res.V[obj.nonterminal].mean()) if obj.nonterminal.any() else 0.0)


def _run_value_iteration(obj, p, seed, workers):
    res = rl.value_iteration(obj, p["tol"])
    return Outcome(res.value_csv(), float(res.V[obj.nonterminal].mean()) if obj.nonterminal.any() else 0.0)


def _simulator(obj, p):
    start = None if p.get("start", -1) < 0 else p["start"]
    return rl.EpisodeSimulator(obj, start=start, reward_noise=p["reward_noise"], cap=p["cap"])


def _run_mc_es(obj, p, seed, workers):
    res = rl.mc_exploring_starts(_simulator(obj, p), p["episodes"], p["omega"], seed, truncate=p["truncate"])
    return Outcome(res.q_csv(), _agreement(obj, res.policy))


def _run_mc_soft(obj, p, seed, workers):
    res = rl.mc_epsilon_soft(_simulator(obj, p), p["epsilon"], p["omega"], p["episodes"], seed,
                             eps_decay=p["eps_decay"], eps_min=p["eps_min"], truncate=p["truncate"])
    return Outcome(res.q_csv(), _agreement(obj, res.policy))


def _run_q_learning(obj, p, seed, workers):
    res = rl.q_learning(_simulator(obj, p), p["omega"], p["epsilon"], max_steps=p["steps"], seed=seed)
    return Outcome(res.q_csv(), _agreement(obj, res.policy))


LMDP_BEDS = ("lmdp_scalar", "point_mass_reaching")
PI2_PARAMS = {"K": ("int", 10), "iterations": ("int", 50), "c": ("float", 0.3), "anneal": ("float", 0.99),
              "basis": ("int", 10), "x0": ("floats", None)}
PI_PARAMS = {"K": ("int", 10_000), "s": ("float", 0.0), "x0": ("floats", None)}
SIM_PARAMS = {"reward_noise": ("float", 0.0), "cap": ("int", rl.EPISODE_CAP), "start": ("int", -1)}

SOLVERS: dict[str, Solver] = {
    **_lq_solvers(),
    "ilqc": Solver(_run_ilqc, ("pendulum_swingup",) + DISCRETE_LQ_BEDS,
                   {"max_iters": ("int", 50), "horizon": ("int", 50), "x0": ("floats", None)}),
    "fd_descent": Solver(_run_fd_descent, DISCRETE_LQ_BEDS,
                         {"iterations": ("int", 100), "perturbations": ("int", 4), "lr": ("float", 0.005),
                          "explore_std": ("float", 0.05), "ridge": ("float", 0.0), "decay": ("float", 1.0),
                          "horizon": ("int", 20), "x0": ("floats", None)}),
    "pi_desirability": Solver(_run_desirability, LMDP_BEDS, PI_PARAMS),
    "pi_optimal_control": Solver(_run_optimal_control, LMDP_BEDS, PI_PARAMS),
    "pi2_time_dependent": Solver(_pi2_runner("time_dependent"), LMDP_BEDS, PI2_PARAMS),
    "pi2_general": Solver(_pi2_runner("general"), LMDP_BEDS, PI2_PARAMS),
    "pi2_feedback_gains": Solver(_pi2_runner("feedback_gains"), LMDP_BEDS, PI2_PARAMS),
    "policy_iteration": Solver(_run_policy_iteration, ("gridworld",), {"tol": ("float", 0.0)}),
    "value_iteration": Solver(_run_value_iteration, ("gridworld",), {"tol": ("float", 1e-10)}),
    "mc_exploring_starts": Solver(_run_mc_es, ("gridworld",),
                                  {"episodes": ("int", 200_000), "omega": ("float", 0.05),
                                   "truncate": ("bool", True), **SIM_PARAMS, "cap": ("int", 200)}),
    "mc_epsilon_soft": Solver(_run_mc_soft, ("gridworld",),
                              {"episodes": ("int", 200_000), "omega": ("float", 0.05), "epsilon": ("float", 0.5),
                               "eps_decay": ("float", 0.9999), "eps_min": ("float", 0.01),
                               "truncate": ("bool", True), **SIM_PARAMS, "cap": ("int", 1000)}),
    "q_learning": Solver(_run_q_learning, ("gridworld",),
                         {"steps": ("int", 500_000), "omega": ("float", 0.1), "epsilon": ("float", 0.1),
                          **SIM_PARAMS}),
}

GENERAL_KEYS = {"solver": "str", "testbed": "str", "seed": "int", "out": "str", "format": "format", "workers": "int"}
GENERAL_ORDER = ("solver", "testbed", "seed", "format", "out", "workers")


def testbed_params(name: str) -> dict[str, str]:
    """Configurable constructor arguments of a testbed and their value kinds."""
    kinds = {}
    for arg in inspect.signature(tb.TESTBEDS[name]).parameters.values():
        d = arg.default
        if isinstance(d, bool):
            kinds[arg.name] = "bool"
        elif isinstance(d, int):
            kinds[arg.name] = "int"
        elif isinstance(d, float) or d is None:
            kinds[arg.name] = "float"
    return kinds


# ------------------------------------------------------------------ config

@dataclass(frozen=True)
class ExperimentConfig:
    solver: str
    testbed: str
    seed: int = 0
    out: str | None = None
    format: str = "csv"
    workers: int = 1
    params: Mapping[str, object] = field(default_factory=dict)
    testbed_params: Mapping[str, object] = field(default_factory=dict)

    def solver_params(self) -> dict:
        """Explicit parameters merged over the solver defaults."""
        merged = {k: d for k, (_, d) in SOLVERS[self.solver].params.items()}
        merged.update(self.params)
        return merged

    def build_testbed(self):
        kwargs = dict(SOLVERS[self.solver].testbed_defaults)
        kwargs = {k: v for k, v in kwargs.items() if k in testbed_params(self.testbed)}
        kwargs.update(self.testbed_params)
        return tb.make(self.testbed, **kwargs)


def _entries(text: str) -> dict[str, tuple[str, int]]:
    found: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError("expected 'key = value'", lineno)
        if key in found:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        found[key] = (value, lineno)
    return found


def _env_entries(env: Mapping[str, str]) -> dict[str, tuple[str, str]]:
    return {name[len(ENV_PREFIX):].replace("__", "."): (value, name)
            for name, value in sorted(env.items()) if name.startswith(ENV_PREFIX)}


def _convert(kind: str, value: str, key: str, where):
    try:
        return PARSERS[kind](value)
    except ValueError as exc:
        raise ConfigError(f"bad value {value!r} for {key!r} ({kind} expected): {exc}", where) from None


def parse_config(text: str, env: Mapping[str, str] | None = None,
                 overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Parse and type-check a config; ``env`` entries with the ``OCLEARN_`` prefix and ``overrides`` win."""
    entries: dict[str, tuple[str, object]] = dict(_entries(text))
    for key, (value, name) in _env_entries(env or {}).items():
        entries[_match_key(key, entries)] = (value, name)
    for key, value in (overrides or {}).items():
        if value is not None:
            entries[key] = (str(value), f"--{key}")
    for key in ("solver", "testbed"):
        if key not in entries:
            raise ConfigError(f"missing required key {key!r}")
    solver_name, where = entries["solver"]
    if solver_name not in SOLVERS:
        raise ConfigError(f"unknown solver {solver_name!r}", where)
    solver = SOLVERS[solver_name]
    bed, where = entries["testbed"]
    if bed not in tb.TESTBEDS:
        raise ConfigError(f"unknown testbed {bed!r}", where)
    if bed not in solver.testbeds:
        raise ConfigError(f"solver {solver_name!r} does not run on {bed!r} (supported: {', '.join(solver.testbeds)})",
                          where)
    bed_kinds = testbed_params(bed)
    general, params, bed_params = {}, {}, {}
    for key, (value, where) in entries.items():
        if key in GENERAL_KEYS:
            general[key] = _convert(GENERAL_KEYS[key], value, key, where)
        elif key.startswith("testbed."):
            arg = key[len("testbed."):]
            if arg not in bed_kinds:
                raise ConfigError(f"unknown parameter {arg!r} for testbed {bed!r}", where)
            bed_params[arg] = _convert(bed_kinds[arg], value, key, where)
        elif key in solver.params:
            params[key] = _convert(solver.params[key][0], value, key, where)
        else:
            raise ConfigError(f"unknown key {key!r}", where)
    if general.get("workers", 1) < 1:
        raise ConfigError("workers must be >= 1", entries["workers"][1])
    return ExperimentConfig(general["solver"], general["testbed"], general.get("seed", 0), general.get("out"),
                            general.get("format", "csv"), general.get("workers", 1), params, bed_params)


def _match_key(key: str, entries) -> str:
    """Environment names are upper case; map them back to the spelling used in config keys."""
    candidates = set(GENERAL_KEYS) | set(entries)
    for s in SOLVERS.values():
        candidates |= set(s.params)
    for name in tb.TESTBEDS:
        candidates |= {f"testbed.{a}" for a in testbed_params(name)}
    for cand in sorted(candidates):
        if cand.lower() == key.lower():
            return cand
    return key


def emit_config(config: ExperimentConfig) -> str:
    """Canonical text: general keys first, then solver and testbed parameters sorted by name."""
    lines = []
    for key in GENERAL_ORDER:
        value = getattr(config, key)
        if value is not None:
            lines.append(f"{key} = {format_value(value)}")
    lines += [f"{k} = {format_value(v)}" for k, v in sorted(config.params.items())]
    lines += [f"testbed.{k} = {format_value(v)}" for k, v in sorted(config.testbed_params.items())]
    return "\n".join(lines) + "\n"


def normalize_config_text(text: str) -> str:
    """Strip comments and blank lines and put the ``key = value`` lines in canonical order."""
    entries = {k: v for k, (v, _) in _entries(text).items()}

    def rank(key):
        if key in GENERAL_ORDER:
            return (0, GENERAL_ORDER.index(key), key)
        return (2 if key.startswith("testbed.") else 1, 0, key)
    return "".join(f"{k} = {entries[k]}\n" for k in sorted(entries, key=rank))


# --------------------------------------------------------------------- run

def _json_table(config: ExperimentConfig, outcome: Outcome) -> str:
    reader = csv.reader(io.StringIO(outcome.table))
    header = next(reader)

    def cell(v):
        if v == "":
            return None
        try:
            return int(v)
        except ValueError:
            return float(v)
    doc = {"solver": config.solver, "testbed": config.testbed, "seed": config.seed,
           "final_metric": outcome.metric, "columns": header, "rows": [[cell(v) for v in row] for row in reader]}
    return json.dumps(doc, indent=1, allow_nan=True) + "\n"


def summary_line(config: ExperimentConfig, metric: float) -> str:
    return f"{config.solver},{config.testbed},{config.seed},{_csv.fmt(metric)}"


def default_out(config: ExperimentConfig) -> str:
    return f"{config.solver}_{config.testbed}_{config.seed}.{config.format}"


def run_experiment(config: ExperimentConfig, stdout=None, stderr=None) -> int:
    """Run one experiment, write its table and print the summary line; returns the exit code."""
    stdout = sys.stdout if stdout is None else stdout
    stderr = sys.stderr if stderr is None else stderr
    try:
        solver = SOLVERS[config.solver]
        instance = config.build_testbed()
        with np.errstate(over="ignore", invalid="ignore"):
            outcome = solver.run(instance, config.solver_params(), config.seed, config.workers)
    except InvalidSpecError as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_CONFIG
    except (OclearnError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=stderr)
        return EXIT_NUMERIC
    text = _json_table(config, outcome) if config.format == "json" else outcome.table
    path = config.out or default_out(config)
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        print(f"error: cannot write {path}: {exc}", file=stderr)
        return EXIT_IO
    print(summary_line(config, outcome.metric), file=stdout)
    if outcome.diverged:
        print("error: DivergenceError: iteration stopped on a non-finite return", file=stderr)
        return EXIT_NUMERIC
    return 0


def list_capabilities() -> str:
    rows = [f"solver  {name}  [{' '.join(sorted(SOLVERS[name].testbeds))}]" for name in sorted(SOLVERS)]
    rows += [f"testbed  {name}" for name in sorted(tb.TESTBEDS)]
    return "\n".join(rows) + "\n"


# --------------------------------------------------------------------- cli

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oclearn", description="Run seeded optimal-control experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("config")
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--format", choices=FORMATS)
    run.add_argument("--workers", type=int)
    check = sub.add_parser("validate", help="check a config and print its canonical form")
    check.add_argument("config")
    sub.add_parser("list", help="list solver and testbed keys")
    return parser


def _load(path: str, overrides=None) -> ExperimentConfig:
    with open(path) as fh:
        text = fh.read()
    return parse_config(text, os.environ, overrides)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "list":
        sys.stdout.write(list_capabilities())
        return 0
    overrides = None
    if args.command == "run":
        overrides = {"seed": args.seed, "out": args.out, "format": args.format, "workers": args.workers}
    try:
        config = _load(args.config, overrides)
        if args.command == "validate":
            config.build_testbed()
            sys.stdout.write(emit_config(config))
            return 0
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvalidSpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run_experiment(config)


if __name__ == "__main__":
    sys.exit(main())
