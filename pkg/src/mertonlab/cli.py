"""Command-line entry point: experiment orchestration and CSV emission.

Usage: mertonlab <simulate|solve|verify|search> --config <path>
       [--out <prefix>] [--quiet]

All physics lives in the config file; flags only pick the file, the
output prefix and verbosity.  Reruns with the same config produce
byte-identical CSVs (floats are written with shortest-roundtrip repr and
no timestamps enter any file).  Exit codes: 0 success, 1 task failure,
2 config error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import os
import sys
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .bsde import (
    PicardConvergenceError,
    solve_bsde_deterministic,
    solve_fbsde_exponential,
    optimal_policy,
    stationarity_residual,
)
from .config import ConfigError, ExperimentConfig, parse_config
from .market import sample_noise
from .oracle import SearchSpec, grid_search
from .utility import Utility
from .variational import (
    expansion_order_check,
    gateaux_fd,
    gateaux_formula,
    mhat_martingale_check,
    terminal_utilities,
)
from .wealth import (
    DollarPolicy,
    PortfolioPolicy,
    StoppedPolicy,
    discount_factor,
    simulate_wealth_dollars,
    simulate_wealth_weights,
)

WORKERS_ENV = "MERTONLAB_WORKERS"


@dataclass
class RunResult:
    task: str
    run_id: str
    wall_time_s: float
    files: List[str]
    summary: dict = field(default_factory=dict)
    exit_code: int = 0


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv(path: str, header: List[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _workers(config: ExperimentConfig) -> int:
    override = os.environ.get(WORKERS_ENV)
    if override:
        try:
            return max(1, int(override))
        except ValueError:
            pass
    return max(1, config.workers)


# ---------------------------------------------------------------------------
# tasks


def _task_simulate(config: ExperimentConfig, prefix: str) -> dict:
    grid = config.grid
    noise = sample_noise(config.model, grid, config.seed, config.n_paths)
    values = config.task_params["policy"]
    if config.task_params["control"] == "dollars":
        path = simulate_wealth_dollars(config.model, grid, noise, DollarPolicy.constant(values),
                                       config.x0)
    else:
        policy = StoppedPolicy(PortfolioPolicy.constant(values), config.task_params["K"])
        path = simulate_wealth_weights(config.model, grid, noise, policy, config.x0)
    out = f"{prefix}_wealth.csv"
    path.to_csv(out)
    return {
        "files": [out],
        "rows": config.n_paths * (config.n_steps + 1),
        "stopped_paths": int(np.sum(path.stop_step >= 0)),
    }


def _task_solve(config: ExperimentConfig, prefix: str) -> dict:
    grid = config.grid
    utility = config.utility
    files = []
    if utility.kind == "exponential":
        noise = sample_noise(config.model, grid, config.seed, config.n_paths)
        result = solve_fbsde_exponential(
            config.model, grid, noise, utility.gamma, config.x0,
            picard_iters=config.task_params["picard_iters"],
            tol=config.task_params["picard_tol"],
            basis_degree=config.task_params["basis_degree"],
        )
        solution = result.solution
        y_nodes = solution.Y.mean(axis=0)
        sigma_nodes = solution.sigma
        amounts = solution.diagnostics["dollar_amounts"]
        policy_rows = [
            [t] + list(amounts[min(k, grid.n_steps - 1)]) for k, t in enumerate(grid.nodes)
        ]
        policy_header = ["t"] + [f"amount_{j + 1}" for j in range(config.n_assets)]
        extra = {
            "picard_iterations": result.diagnostics["iterations"],
            "stationarity_residual": result.residual,
        }
    else:
        solution = solve_bsde_deterministic(utility, config.model, grid)
        result = optimal_policy(utility, config.model, solution, x0=config.x0)
        y_nodes = solution.Y
        sigma_nodes = solution.sigma
        policy_rows = [
            [t] + list(np.atleast_1d(result.policy.values(min(t, grid.nodes[-2]), np.empty(0))))
            for t in grid.nodes
        ]
        policy_header = ["t"] + [f"pi_{j + 1}" for j in range(config.n_assets)]
        extra = {"stationarity_residual": result.residual}

    bsde_out = f"{prefix}_bsde.csv"
    _write_csv(
        bsde_out,
        ["t", "Y"] + [f"sigma_{j + 1}" for j in range(config.n_assets)] + ["mode"],
        [[t, y_nodes[k]] + list(sigma_nodes[k]) + [solution.mode]
         for k, t in enumerate(grid.nodes)],
    )
    policy_out = f"{prefix}_policy.csv"
    _write_csv(policy_out, policy_header, policy_rows)
    files += [bsde_out, policy_out]
    return {"files": files, "y0": float(np.atleast_1d(y_nodes)[0]), **extra}


def _task_search(config: ExperimentConfig, prefix: str) -> dict:
    grid = config.grid
    spec = SearchSpec(
        lower=config.task_params["grid_lo"],
        upper=config.task_params["grid_hi"],
        step=config.task_params["grid_step"],
        n_paths=config.n_paths,
        seed=config.seed,
        family=config.task_params["control"],
    )
    result = grid_search(config.utility, config.model, grid, spec, config.x0,
                         workers=_workers(config))
    out = f"{prefix}_search.csv"
    coord_header = [f"policy_{j + 1}" for j in range(len(spec.lower))]
    rows = [list(point) + [value, se, 0] for point, value, se in result.table]
    rows.append(list(result.argmax) + [result.value, result.std_error, 1])
    _write_csv(out, coord_header + ["value", "std_error", "argmax"], rows)
    return {
        "files": [out],
        "argmax": [float(v) for v in result.argmax],
        "value": result.value,
        "runner_up_gap": result.runner_up_gap,
        "conclusive": result.conclusive,
    }


def _verify_rows_common(config: ExperimentConfig, rng: np.random.Generator) -> List[list]:
    """Checks independent of the utility kind: dollar linearity of the
    forward recursion and the multiplicative property of discounting."""
    model, grid = config.model, config.grid
    rows = []
    small = sample_noise(model, grid, config.seed + 101, 100)
    p1 = rng.uniform(-1.0, 1.0, size=config.n_assets)
    p2 = rng.uniform(-1.0, 1.0, size=config.n_assets)
    c = 0.3
    w1 = simulate_wealth_dollars(model, grid, small, DollarPolicy.constant(p1), config.x0).wealth
    w2 = simulate_wealth_dollars(model, grid, small, DollarPolicy.constant(p2), config.x0).wealth
    mix = simulate_wealth_dollars(model, grid, small,
                                  DollarPolicy.constant(c * p1 + (1 - c) * p2), config.x0).wealth
    gap = np.max(np.abs(mix - c * w1 - (1 - c) * w2)) / max(np.max(np.abs(mix)), 1e-300)
    rows.append(["dollar_linearity_gap_max", float(gap), 0.0, 1e-12, gap < 1e-12])

    t_half = 0.5 * grid.horizon_T
    lhs = discount_factor(model, grid, 0.0, t_half) * discount_factor(model, grid, t_half,
                                                                      grid.horizon_T)
    rhs = discount_factor(model, grid, 0.0, grid.horizon_T)
    kgap = abs(lhs - rhs)
    rows.append(["kappa_composition_gap_max", float(kgap), 0.0, 1e-12, kgap < 1e-12])
    return rows


def _verify_decoupled(config: ExperimentConfig) -> List[list]:
    """Gradient battery for log/power: two-route agreement, analytic
    anchors, remainder order, martingale constancy and the optimality
    residual on and off the optimum."""
    model, grid, utility = config.model, config.grid, config.utility
    rng = np.random.default_rng(config.seed)
    noise = sample_noise(model, grid, config.seed, config.n_paths)
    ladder = config.task_params["eps_ladder"]
    horizon = grid.horizon_T
    rows = _verify_rows_common(config, rng)

    for i in range(config.task_params["pairs"]):
        pi = rng.uniform(0.5, 2.5, size=config.n_assets)
        omega = rng.choice([-1.0, 1.0], size=config.n_assets)
        policy = PortfolioPolicy.constant(pi)
        bsde = solve_bsde_deterministic(utility, model, grid, policy=policy)
        fd = gateaux_fd(model, grid, noise, policy, omega, utility, config.x0, ladder)
        formula = gateaux_formula(model, grid, noise, policy, omega, utility, config.x0, bsde)
        diff = fd.samples - formula.samples
        se = float(diff.std(ddof=1) / np.sqrt(len(diff)))
        gap = abs(fd.value - formula.value)
        rows.append([f"two_route_gap_pair{i}_max", gap, se, 3 * se, gap < 3 * se or se == 0.0])
        if utility.kind == "log":
            theta = model.excess_returns(0.0)
            sig = model.cov(0.0)
            analytic = float(omega @ (theta - sig @ pi)) * horizon
            agap = abs(fd.value - analytic)
            rows.append([f"fd_vs_analytic_pair{i}_max", agap, fd.std_error,
                         3 * fd.std_error, agap < 3 * fd.std_error])

    solution = solve_bsde_deterministic(utility, model, grid)
    opt = optimal_policy(utility, model, solution, x0=config.x0)
    fd_star = gateaux_fd(model, grid, noise, opt.policy, np.ones(config.n_assets), utility,
                         config.x0, ladder)
    rows.append(["fd_zero_at_optimum_max", abs(fd_star.value), fd_star.std_error,
                 3 * fd_star.std_error, abs(fd_star.value) < 3 * fd_star.std_error])
    f_star = gateaux_formula(model, grid, noise, opt.policy, np.ones(config.n_assets), utility,
                             config.x0, solution)
    tol0 = max(3 * f_star.std_error, 1e-12)
    rows.append(["formula_zero_at_optimum_max", abs(f_star.value), f_star.std_error, tol0,
                 abs(f_star.value) < tol0])

    base = PortfolioPolicy.constant(rng.uniform(0.8, 1.2, size=config.n_assets))
    check = expansion_order_check(model, grid, noise, base, np.ones(config.n_assets), utility,
                                  config.x0, ladder[:3])
    if utility.kind == "log":
        dev = abs(check.slope - 2.0)
        rows.append(["expansion_slope_deviation_max", dev, 0.0, 0.05, dev < 0.05])
    else:
        rows.append(["expansion_slope_min", check.slope, 0.0, 1.5, check.slope >= 1.5])

    mhat = mhat_martingale_check(model, grid, noise, opt.policy, utility, config.x0, solution)
    rows.append(["mhat_max_deviation_se_max", mhat.max_deviation_se, 0.0, 3.0,
                 mhat.max_deviation_se < 3.0])

    rows.append(["stationarity_residual_at_optimum_max", opt.residual, 0.0, 1e-8,
                 opt.residual < 1e-8])
    doubled = PortfolioPolicy.constant(
        2.0 * np.atleast_1d(opt.policy.values(0.0, np.empty(0))))
    bsde_doubled = solve_bsde_deterministic(utility, model, grid, policy=doubled)
    small = sample_noise(model, grid, config.seed + 77, 200)
    off = stationarity_residual(utility, model, grid, small, doubled, bsde_doubled, config.x0)
    rows.append(["stationarity_residual_off_optimum_min", off, 0.0, 1e-3, off > 1e-3])
    return rows


def _verify_exponential(config: ExperimentConfig) -> List[list]:
    """Battery for exponential utility: Picard convergence, optimality
    residual, terminal condition, the discounted-transform consistency
    and midpoint concavity of the dollar objective."""
    model, grid, utility = config.model, config.grid, config.utility
    rng = np.random.default_rng(config.seed)
    noise = sample_noise(model, grid, config.seed, config.n_paths)
    rows = _verify_rows_common(config, rng)

    result = solve_fbsde_exponential(model, grid, noise, utility.gamma, config.x0)
    history = result.diagnostics["picard_residuals"]
    rows.append(["picard_final_update_max", history[-1], 0.0, 1e-3, history[-1] < 1e-3])
    rows.append(["stationarity_residual_at_optimum_max", result.residual, 0.0, 1e-8,
                 result.residual < 1e-8])
    y_term = float(np.max(np.abs(result.solution.Y[:, -1] - 1.0)))
    rows.append(["terminal_condition_gap_max", y_term, 0.0, 1e-15, y_term <= 1e-15])

    log_y = np.log(result.solution.Y)
    tail = np.array([
        sum(model.rate(t) * grid.dt for t in grid.nodes[k:-1]) for k in range(grid.n_steps + 1)
    ])
    tilde_gap = float(np.max(np.abs(result.solution.diagnostics["log_y_tilde"] - (log_y + tail))))
    tilde_tol = 1e-8 + 5.0 * grid.dt * max(abs(model.rate(t)) for t in grid.nodes)
    rows.append(["ytilde_transform_gap_max", tilde_gap, 0.0, tilde_tol, tilde_gap < tilde_tol])

    worst_margin_se = float("inf")
    for _ in range(3):
        a = rng.uniform(-1.0, 2.0, size=config.n_assets)
        b = rng.uniform(-1.0, 2.0, size=config.n_assets)
        u_a = terminal_utilities(model, grid, noise, DollarPolicy.constant(a), utility, config.x0)
        u_b = terminal_utilities(model, grid, noise, DollarPolicy.constant(b), utility, config.x0)
        u_m = terminal_utilities(model, grid, noise, DollarPolicy.constant(0.5 * (a + b)),
                                 utility, config.x0)
        margin = u_m - 0.5 * (u_a + u_b)
        se = float(margin.std(ddof=1) / np.sqrt(len(margin)))
        worst_margin_se = min(worst_margin_se, float(margin.mean()) / se if se > 0 else np.inf)
    rows.append(["concavity_midpoint_slack_min", worst_margin_se, 1.0, -2.0,
                 worst_margin_se >= -2.0])
    return rows


def _task_verify(config: ExperimentConfig, prefix: str) -> dict:
    if config.utility.kind == "exponential":
        rows = _verify_exponential(config)
    else:
        rows = _verify_decoupled(config)
    out = f"{prefix}_verify.csv"
    _write_csv(out, ["statistic", "value", "std_error", "threshold", "pass"],
               [[r[0], r[1], r[2], r[3], "pass" if r[4] else "fail"] for r in rows])
    failed = [r[0] for r in rows if not r[4]]
    return {"files": [out], "checks": len(rows), "failed": failed}


def run(config_text: str, out_prefix: str = "run", quiet: bool = False) -> RunResult:
    """Parse, dispatch and write outputs; returns the run record.

    Raises ConfigError for invalid configs; task failures set exit code 1.
    """
    config = parse_config(config_text)
    run_id = hashlib.sha256(config_text.encode()).hexdigest()[:16]
    start = time.perf_counter()
    task_fn = {
        "simulate": _task_simulate,
        "solve": _task_solve,
        "verify": _task_verify,
        "search": _task_search,
    }[config.task]
    try:
        summary = task_fn(config, out_prefix)
        exit_code = 1 if summary.get("failed") else 0
    except PicardConvergenceError as exc:
        summary = {"files": [], "error": f"fbsde_solver: {exc}",
                   "residual_history": exc.residual_history}
        exit_code = 1
    wall = time.perf_counter() - start
    files = summary.pop("files")
    result = RunResult(config.task, run_id, wall, files, summary, exit_code)
    if not quiet:
        print(f"task={result.task} run_id={result.run_id} wall_time={wall:.2f}s")
        for line in config.defaults_applied:
            print(f"default: {line}")
        for key, value in summary.items():
            print(f"{key}: {value}")
        for path in files:
            print(f"wrote {path}")
    return result


def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(prog="mertonlab", description=__doc__)
    parser.add_argument("task", choices=["simulate", "solve", "verify", "search"])
    parser.add_argument("--config", required=True, help="path to the experiment config file")
    parser.add_argument("--out", default="run", help="output file prefix")
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args(argv)

    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        print(f"cannot read config: {exc}", file=sys.stderr)
        return 2

    try:
        config = parse_config(text)
    except ConfigError as exc:
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    if config.task != args.task:
        print(f"config error: [task] name = {config.task} but '{args.task}' was requested",
              file=sys.stderr)
        return 2

    try:
        result = run(text, out_prefix=args.out, quiet=args.quiet)
    except ConfigError as exc:  # pragma: no cover - already parsed above
        for err in exc.errors:
            print(f"config error: {err}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"task error: {type(exc).__module__}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
