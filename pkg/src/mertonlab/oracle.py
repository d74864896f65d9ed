"""Independent ground-truth generators for the optimal policy.

Three routes that do not share code with the backward solvers:

* closed forms for constant coefficients (growth-optimal Sigma^{-1}theta
  for log, scaled by 1/(1-eta) for power, dollar amounts
  Sigma^{-1}theta/gamma for exponential with r = 0);
* brute-force grid search over constant policies with shared noise;
* gradient ascent driven by the integral-formula derivative.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .bsde import solve_bsde_deterministic
from .market import MarketModel, NoisePathSet, TimeGrid, sample_noise
from .utility import Utility, UtilityDomainError
from .variational import gateaux_formula, performance_criterion, terminal_utilities
from .wealth import DollarPolicy, PortfolioPolicy

GRID_SEARCH_MAX_ASSETS = 3


def closed_form_policy(utility: Utility, model: MarketModel, grid: Optional[TimeGrid] = None):
    """Optimal constant policy for constant coefficients.

    log -> Sigma^{-1} theta (weights); power -> Sigma^{-1} theta / (1-eta);
    exponential -> dollar amounts Sigma^{-1} theta / gamma, valid only for
    r = 0 where the adjoint volatility is forced to zero (otherwise use
    the coupled solver).
    """
    grid = grid or TimeGrid(1.0, 100)
    if not model.is_constant(grid):
        raise ValueError("closed forms require constant coefficients; use the solvers instead")
    base = np.linalg.solve(model.cov(0.0), model.excess_returns(0.0))
    if utility.kind == "log":
        return PortfolioPolicy.constant(base)
    if utility.kind == "power":
        return PortfolioPolicy.constant(base / (1.0 - utility.eta))
    if utility.kind == "exponential":
        rates = [model.rate(t) for t in grid.nodes]
        if np.max(np.abs(rates)) > 0:
            raise ValueError(
                "exponential closed form needs r = 0; use solve_fbsde_exponential for r != 0"
            )
        return DollarPolicy.constant(base / utility.gamma)
    raise ValueError(f"no closed form for utility kind '{utility.kind}'")


@dataclass(frozen=True)
class SearchSpec:
    """Box grid over constant policies.

    family selects the control units: "weights" (fractions, simulated by
    the positive geometric scheme) or "dollars" (currency amounts, plain
    Euler).  With crn=True every grid point is evaluated on the same
    noise set, which the argmax and concavity tests rely on.
    """

    lower: np.ndarray
    upper: np.ndarray
    step: float
    n_paths: int
    seed: int
    crn: bool = True
    family: str = "weights"

    def __post_init__(self):
        object.__setattr__(self, "lower", np.atleast_1d(np.asarray(self.lower, dtype=float)))
        object.__setattr__(self, "upper", np.atleast_1d(np.asarray(self.upper, dtype=float)))
        if self.step <= 0:
            raise ValueError(f"grid step must be > 0, got {self.step}")
        if self.lower.shape != self.upper.shape or np.any(self.upper < self.lower):
            raise ValueError("grid box is empty or mismatched")
        if not np.all(np.isfinite(self.lower)) or not np.all(np.isfinite(self.upper)):
            raise ValueError("grid box must be finite")
        if self.family not in ("weights", "dollars"):
            raise ValueError(f"unknown policy family '{self.family}'")

    def axis(self, i: int) -> np.ndarray:
        return np.arange(self.lower[i], self.upper[i] + 0.5 * self.step, self.step)

    def points(self) -> np.ndarray:
        axes = [self.axis(i) for i in range(len(self.lower))]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class GridSearchResult:
    argmax: np.ndarray
    value: float
    std_error: float
    runner_up_gap: float
    conclusive: bool
    family: str
    table: List[Tuple[np.ndarray, float, float]] = field(default_factory=list)


def _policy_for(family: str, values):
    return DollarPolicy.constant(values) if family == "dollars" else PortfolioPolicy.constant(values)


def grid_search(
    utility: Utility,
    model: MarketModel,
    grid: TimeGrid,
    spec: SearchSpec,
    x0: float,
    noise: Optional[NoisePathSet] = None,
    workers: int = 1,
) -> GridSearchResult:
    """Evaluate E[U(X_T)] on every grid point and return the argmax.

    The gap to the runner-up is measured against the standard error of
    the pathwise value difference (shared noise), and the result is
    flagged inconclusive, not failed, when the gap is within one such
    standard error.
    """
    points = spec.points()
    if spec.family == "weights" and points.shape[1] > GRID_SEARCH_MAX_ASSETS:
        raise ValueError(
            f"grid search caps at {GRID_SEARCH_MAX_ASSETS} assets; use gradient_ascent instead"
        )
    if noise is None:
        noise = sample_noise(model, grid, spec.seed, spec.n_paths)

    def evaluate(idx_point):
        idx, point = idx_point
        pt_noise = noise
        if not spec.crn:
            pt_noise = sample_noise(model, grid, spec.seed + 1 + idx, spec.n_paths)
        u = terminal_utilities(model, grid, pt_noise, _policy_for(spec.family, point), utility, x0)
        return float(u.mean()), float(u.std(ddof=1) / np.sqrt(len(u)))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            stats = list(pool.map(evaluate, enumerate(points)))
    else:
        stats = [evaluate(ip) for ip in enumerate(points)]

    values = np.array([s[0] for s in stats])
    errors = np.array([s[1] for s in stats])
    order = np.argsort(values)
    best, runner = int(order[-1]), int(order[-2]) if len(values) > 1 else int(order[-1])
    gap = float(values[best] - values[runner]) if len(values) > 1 else float("inf")

    if len(values) > 1 and spec.crn:
        u_best = terminal_utilities(model, grid, noise, _policy_for(spec.family, points[best]),
                                    utility, x0)
        u_run = terminal_utilities(model, grid, noise, _policy_for(spec.family, points[runner]),
                                   utility, x0)
        diff = u_best - u_run
        gap_se = float(diff.std(ddof=1) / np.sqrt(len(diff)))
    else:
        gap_se = float(np.hypot(errors[best], errors[runner])) if len(values) > 1 else 0.0

    table = [(points[i], float(values[i]), float(errors[i])) for i in range(len(values))]
    return GridSearchResult(
        argmax=points[best],
        value=float(values[best]),
        std_error=float(errors[best]),
        runner_up_gap=gap,
        conclusive=bool(gap > gap_se),
        family=spec.family,
        table=table,
    )


class AscentDivergenceError(RuntimeError):
    """Wealth left the utility domain during ascent; carries the iterate."""

    def __init__(self, message, iteration, point):
        super().__init__(message)
        self.iteration = iteration
        self.point = point


@dataclass
class AscentStep:
    point: np.ndarray
    gradient: np.ndarray
    value: float
    std_error: float


@dataclass
class AscentResult:
    trajectory: List[AscentStep]
    converged: bool

    @property
    def final(self) -> np.ndarray:
        return self.trajectory[-1].point


def gradient_ascent(
    utility: Utility,
    model: MarketModel,
    grid: TimeGrid,
    noise: NoisePathSet,
    start,
    x0: float,
    step_size: Optional[float] = None,
    max_iters: int = 100,
    grad_tol: float = 1e-2,
) -> AscentResult:
    """Ascend E[U(X_T)] over constant weights using the formula-route
    gradient (one coordinate direction per asset, backward solution
    refreshed at each iterate).

    The default step 0.5 / (C T), with C the largest covariance
    eigenvalue on the grid, keeps the log-utility iteration contractive.
    """
    if utility.kind not in ("log", "power"):
        raise ValueError("gradient ascent requires a decoupled utility (log or power)")
    point = np.atleast_1d(np.asarray(start, dtype=float)).copy()
    n = model.n_assets
    if step_size is None:
        c_hat = max(np.linalg.eigvalsh(model.cov(t)).max() for t in grid.nodes)
        step_size = 0.5 / (c_hat * grid.horizon_T)

    trajectory: List[AscentStep] = []
    converged = False
    for it in range(max_iters):
        policy = PortfolioPolicy.constant(point)
        try:
            bsde = solve_bsde_deterministic(utility, model, grid, policy=policy)
            gradient = np.array([
                gateaux_formula(model, grid, noise, policy, np.eye(n)[j], utility, x0, bsde).value
                for j in range(n)
            ])
            value, se = performance_criterion(model, grid, noise, policy, utility, x0)
        except UtilityDomainError as exc:
            raise AscentDivergenceError(
                f"iterate {it} at {point} left the utility domain: {exc}", it, point.copy()
            ) from exc
        trajectory.append(AscentStep(point.copy(), gradient, value, se))
        if np.linalg.norm(gradient) < grad_tol:
            converged = True
            break
        point = point + step_size * gradient
    return AscentResult(trajectory=trajectory, converged=converged)
