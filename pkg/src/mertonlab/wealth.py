"""Wealth dynamics under proportional and dollar-amount controls.

Two discretizations are used on purpose:

* weight control evolves log wealth by the exact one-step recursion
  log X_{k+1} = log X_k + gamma_k dt + pi_k' dM_k with growth rate
  gamma = r + pi'theta - pi'Sigma pi / 2, which keeps wealth strictly
  positive at any step size;
* dollar control uses the plain Euler recursion
  X_{k+1} = X_k + (r X_k + ptilde'theta) dt + ptilde' dM_k, which is
  exactly linear in the control path by path (wealth may cross zero).

K-stopping moves a path entirely into the risk-free asset from the first
grid node where |X| exceeds the threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from .market import MarketModel, NoisePathSet, TimeGrid


class PolicyEvaluationError(RuntimeError):
    """A policy emitted a non-finite control; simulation is aborted."""


class _ControlPolicy:
    """Common machinery for weight and dollar policies.

    A policy is one of: constant vector, function of time, or feedback
    function of (time, wealth vector).  values(t, x) returns either a
    (n,) vector shared by all paths or a (len(x), n) per-path array.
    """

    units = "abstract"

    def __init__(self, kind: str, payload, n_assets: Optional[int] = None):
        self.kind = kind
        self._payload = payload
        self.n_assets = n_assets

    @classmethod
    def constant(cls, values):
        v = np.atleast_1d(np.asarray(values, dtype=float))
        return cls("constant", v, n_assets=v.shape[0])

    @classmethod
    def from_function(cls, fn: Callable[[float], np.ndarray], n_assets: Optional[int] = None):
        """Deterministic control path t -> vector."""
        return cls("time-function", fn, n_assets=n_assets)

    @classmethod
    def feedback(cls, fn: Callable[[float, np.ndarray], np.ndarray], n_assets: Optional[int] = None):
        """State feedback (t, wealth array) -> (len(wealth), n) array."""
        return cls("feedback", fn, n_assets=n_assets)

    def values(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.kind == "constant":
            return self._payload
        if self.kind == "time-function":
            return np.atleast_1d(np.asarray(self._payload(t), dtype=float))
        out = np.asarray(self._payload(t, x), dtype=float)
        if out.ndim == 1:
            out = out[:, None]
        return out


class PortfolioPolicy(_ControlPolicy):
    """Fractions of wealth invested per risky asset."""

    units = "fraction"


class DollarPolicy(_ControlPolicy):
    """Currency amounts invested per risky asset."""

    units = "currency"


@dataclass(frozen=True)
class StoppedPolicy:
    """K-stopped wrapper: weights are zeroed from the first node where
    |X| > threshold_K onward, after which wealth compounds at rate r."""

    base: PortfolioPolicy
    threshold_K: float

    def __post_init__(self):
        if not self.threshold_K > 0:
            raise ValueError(f"threshold_K must be > 0, got {self.threshold_K}")


WeightLike = Union[PortfolioPolicy, StoppedPolicy]


def _per_path(values: np.ndarray, n_paths: int) -> np.ndarray:
    if values.ndim == 1:
        return np.broadcast_to(values, (n_paths, values.shape[0]))
    return values


def detect_stop(wealth: np.ndarray, threshold_K: float) -> Optional[int]:
    """First node index where |X| > K, or None if the path never crosses."""
    hit = np.abs(np.asarray(wealth)) > threshold_K
    if not hit.any():
        return None
    return int(np.argmax(hit))


@dataclass
class WealthPath:
    """Discretized wealth per path: values at every grid node, the first
    stopped node (-1 when never stopped), and the realized growth rate
    per step (weight control only)."""

    grid: TimeGrid
    wealth: np.ndarray                 # (n_paths, n_steps + 1)
    log_wealth: np.ndarray             # same shape; NaN where X <= 0
    stop_step: np.ndarray              # (n_paths,) int, -1 = never stopped
    growth_rate: Optional[np.ndarray]  # (n_paths, n_steps) or None
    weights: Optional[np.ndarray] = None  # (n_paths, n_steps, n) when recorded

    @property
    def terminal(self) -> np.ndarray:
        return self.wealth[:, -1]

    def to_csv(self, path: str) -> None:
        """Columns: path_id, step, t, X, logX, stopped(0/1)."""
        nodes = self.grid.nodes
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["path_id", "step", "t", "X", "logX", "stopped"])
            for i in range(self.wealth.shape[0]):
                stop = self.stop_step[i]
                for k in range(self.wealth.shape[1]):
                    stopped = int(stop >= 0 and k >= stop)
                    writer.writerow(
                        [i, k, repr(float(nodes[k])), repr(float(self.wealth[i, k])),
                         repr(float(self.log_wealth[i, k])), stopped]
                    )


def _unwrap(policy: WeightLike):
    if isinstance(policy, StoppedPolicy):
        return policy.base, policy.threshold_K
    return policy, None


def simulate_wealth_weights(
    model: MarketModel,
    grid: TimeGrid,
    noise: NoisePathSet,
    policy: WeightLike,
    x0: float,
    record_weights: bool = False,
) -> WealthPath:
    """Evolve wealth under a proportional-control policy.

    Wealth stays strictly positive (geometric scheme).  For a
    StoppedPolicy the threshold test runs before each step, so the step
    leaving the crossing node is already risk-free.
    """
    if not x0 > 0:
        raise ValueError(f"x0 must be > 0 for weight control, got {x0}")
    base, threshold = _unwrap(policy)
    n_paths, n_steps, n = noise.increments.shape
    dt = grid.dt

    log_x = np.full(n_paths, np.log(x0))
    wealth = np.empty((n_paths, n_steps + 1))
    log_wealth = np.empty((n_paths, n_steps + 1))
    wealth[:, 0] = x0
    log_wealth[:, 0] = log_x
    growth = np.empty((n_paths, n_steps))
    stop_step = np.full(n_paths, -1, dtype=np.int64)
    recorded = np.zeros((n_paths, n_steps, n)) if record_weights else None

    for k, t in enumerate(grid.nodes[:-1]):
        x = wealth[:, k]
        if threshold is not None:
            newly = (stop_step < 0) & (np.abs(x) > threshold)
            stop_step[newly] = k
        w = base.values(t, x)
        if not np.all(np.isfinite(w)):
            raise PolicyEvaluationError(f"non-finite weights emitted at t={t}")
        w = _per_path(w, n_paths)
        if threshold is not None:
            w = np.where((stop_step >= 0)[:, None], 0.0, w)
        if recorded is not None:
            recorded[:, k, :] = w
        theta = model.excess_returns(t)
        sig = model.cov(t)
        gamma = model.rate(t) + w @ theta - 0.5 * np.einsum("pi,ij,pj->p", w, sig, w)
        growth[:, k] = gamma
        log_x = log_x + gamma * dt + np.einsum("pi,pi->p", w, noise.increments[:, k, :])
        log_wealth[:, k + 1] = log_x
        wealth[:, k + 1] = np.exp(log_x)

    return WealthPath(
        grid=grid, wealth=wealth, log_wealth=log_wealth, stop_step=stop_step,
        growth_rate=growth, weights=recorded,
    )


def simulate_wealth_dollars(
    model: MarketModel,
    grid: TimeGrid,
    noise: NoisePathSet,
    policy: DollarPolicy,
    x0: float,
) -> WealthPath:
    """Evolve wealth under a dollar-amount policy (plain Euler).

    The recursion is affine in the control, so convex combinations of
    control paths carry over to wealth paths exactly; wealth may cross
    zero, which is the regime the exponential-utility experiments use.
    """
    n_paths, n_steps, n = noise.increments.shape
    dt = grid.dt
    wealth = np.empty((n_paths, n_steps + 1))
    wealth[:, 0] = float(x0)

    for k, t in enumerate(grid.nodes[:-1]):
        x = wealth[:, k]
        p = policy.values(t, x)
        if not np.all(np.isfinite(p)):
            raise PolicyEvaluationError(f"non-finite dollar amounts emitted at t={t}")
        theta = model.excess_returns(t)
        p = _per_path(p, n_paths)
        drift = model.rate(t) * x + p @ theta
        wealth[:, k + 1] = x + drift * dt + np.einsum("pi,pi->p", p, noise.increments[:, k, :])

    with np.errstate(invalid="ignore", divide="ignore"):
        log_wealth = np.where(wealth > 0, np.log(np.maximum(wealth, 1e-300)), np.nan)
    stop_step = np.full(n_paths, -1, dtype=np.int64)
    return WealthPath(
        grid=grid, wealth=wealth, log_wealth=log_wealth, stop_step=stop_step, growth_rate=None,
    )


def discount_factor(model: MarketModel, grid: TimeGrid, s: float, t: float) -> float:
    """kappa_{s,t} = exp(-int_s^t r_u du) by trapezoid quadrature on the grid.

    The integral is a fixed function of the endpoint, so the composition
    identity kappa_{s,t} * kappa_{t,u} = kappa_{s,u} holds to rounding.
    """
    nodes = grid.nodes
    rates = np.array([model.rate(u) for u in nodes])
    cumulative = np.concatenate([[0.0], np.cumsum(0.5 * (rates[1:] + rates[:-1]) * np.diff(nodes))])
    integral = np.interp(t, nodes, cumulative) - np.interp(s, nodes, cumulative)
    return float(np.exp(-integral))
