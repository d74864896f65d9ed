"""Monte Carlo estimators for the performance criterion and its
functional (directional) derivative.

The criterion is H(pi) = E[U(X_T)].  Its derivative in direction omega
is estimated two independent ways:

* central finite differences (H(pi+eps*omega) - H(pi-eps*omega))/(2 eps)
  under common random numbers across an epsilon ladder;
* the integral formula E[ int_0^{T^tau} omega' Y (g + F1 Sigma sigma) dt ]
  with (Y, sigma) from the backward solver and
  g = F1 theta + F2 Sigma pi evaluated along the simulated paths.

Supporting diagnostics: the first-order remainder slope of
H(pi+eps*omega) against the pathwise derivative F1_T * I_T, and the
constancy in t of E[F1_t (Y_t - 1) + int_0^t h du], which certifies the
martingale structure behind the formula route.

All estimators are pure functions of (inputs, noise) and stream over the
time grid; nothing retains full path arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from .bsde import BsdeSolution
from .market import MarketModel, NoisePathSet, TimeGrid
from .utility import Utility, UtilityDomainError, coefficient_bundle
from .wealth import DollarPolicy, PolicyEvaluationError, PortfolioPolicy, StoppedPolicy, _per_path

DEFAULT_EPSILON_LADDER = (0.1, 0.05, 0.025, 0.0125)

WeightLike = Union[PortfolioPolicy, StoppedPolicy]
AnyPolicy = Union[PortfolioPolicy, StoppedPolicy, DollarPolicy]


@dataclass
class GateauxEstimate:
    """Directional-derivative estimate with its Monte Carlo standard error.

    samples holds the per-path contributions of the reported value so
    that two estimates sharing noise can be differenced path by path.
    """

    value: float
    std_error: float
    method: str
    epsilon_ladder: Optional[Tuple[float, ...]] = None
    diagnostics: dict = field(default_factory=dict)
    samples: Optional[np.ndarray] = None


@dataclass
class ExpansionCheckResult:
    """First-order remainder R(eps) per ladder rung and the fitted
    log-log slope (nan when R is identically zero)."""

    slope: float
    epsilons: Tuple[float, ...]
    remainders: np.ndarray
    std_errors: np.ndarray


@dataclass
class MartingaleCheckResult:
    """Deviation of E[F1_t (Y_t - 1) + int_0^t h du] from its terminal
    value, per probed node, in standard-error units."""

    max_deviation_se: float
    node_indices: np.ndarray
    deviations: np.ndarray
    std_errors: np.ndarray


@dataclass
class PerturbationProcesses:
    """g, h, q and the running direction integral I along simulated paths.

    Shapes: g is (n_paths, n_steps, n_assets); h, q are
    (n_paths, n_steps); I is (n_paths, n_steps + 1) with I[:, 0] = 0.
    """

    g: np.ndarray
    h: np.ndarray
    q: np.ndarray
    I_omega: np.ndarray


def _unwrap(policy: WeightLike):
    if isinstance(policy, StoppedPolicy):
        return policy.base, policy.threshold_K
    return policy, None


class _WeightStepper:
    """Streaming log-Euler evolution of wealth under a weight policy.

    steps() yields (k, t, x, w, active) with the pre-step wealth, the
    per-path weight matrix (already zeroed on stopped paths) and the
    not-yet-stopped mask, then advances log wealth in place.
    """

    def __init__(self, model: MarketModel, grid: TimeGrid, noise: NoisePathSet,
                 policy: WeightLike, x0: float):
        if not x0 > 0:
            raise ValueError(f"x0 must be > 0 for weight control, got {x0}")
        self.model = model
        self.grid = grid
        self.noise = noise
        self.base, self.threshold = _unwrap(policy)
        self.n_paths = noise.increments.shape[0]
        self.log_x = np.full(self.n_paths, np.log(x0))
        self.stop_step = np.full(self.n_paths, -1, dtype=np.int64)

    def steps(self):
        dt = self.grid.dt
        dM = self.noise.increments
        for k, t in enumerate(self.grid.nodes[:-1]):
            x = np.exp(self.log_x)
            if self.threshold is not None:
                newly = (self.stop_step < 0) & (np.abs(x) > self.threshold)
                self.stop_step[newly] = k
            w = self.base.values(t, x)
            if not np.all(np.isfinite(w)):
                raise PolicyEvaluationError(f"non-finite weights emitted at t={t}")
            w = _per_path(w, self.n_paths)
            if self.threshold is not None:
                w = np.where((self.stop_step >= 0)[:, None], 0.0, w)
            active = self.stop_step < 0
            yield k, t, x, w, active
            theta = self.model.excess_returns(t)
            sig = self.model.cov(t)
            gamma = self.model.rate(t) + w @ theta - 0.5 * np.einsum("pi,ij,pj->p", w, sig, w)
            self.log_x = self.log_x + gamma * dt + np.einsum("pi,pi->p", w, dM[:, k, :])

    @property
    def terminal_x(self) -> np.ndarray:
        return np.exp(self.log_x)


def _terminal_wealth_weights(model, grid, noise, policy, x0) -> np.ndarray:
    stepper = _WeightStepper(model, grid, noise, policy, x0)
    for _ in stepper.steps():
        pass
    return stepper.terminal_x


def _terminal_wealth_dollars(model, grid, noise, policy, x0, positive_only: bool):
    n_paths, _, _ = noise.increments.shape
    x = np.full(n_paths, float(x0))
    dt = grid.dt
    for k, t in enumerate(grid.nodes[:-1]):
        p = policy.values(t, x)
        if not np.all(np.isfinite(p)):
            raise PolicyEvaluationError(f"non-finite dollar amounts emitted at t={t}")
        p = _per_path(p, n_paths)
        x = x + (model.rate(t) * x + p @ model.excess_returns(t)) * dt \
            + np.einsum("pi,pi->p", p, noise.increments[:, k, :])
        if positive_only and np.any(x <= 0):
            bad = int(np.argmax(x <= 0))
            raise UtilityDomainError(
                f"wealth left the positive domain on path {bad} at step {k + 1}"
            )
    return x


def terminal_utilities(
    model: MarketModel,
    grid: TimeGrid,
    noise: NoisePathSet,
    policy: AnyPolicy,
    utility: Utility,
    x0: float,
) -> np.ndarray:
    """Per-path U(X_T); weight policies keep wealth positive by
    construction, dollar policies are domain-checked at every node."""
    if isinstance(policy, DollarPolicy):
        x_t = _terminal_wealth_dollars(model, grid, noise, policy, x0,
                                       positive_only=utility.positive_wealth_only)
    else:
        x_t = _terminal_wealth_weights(model, grid, noise, policy, x0)
    return utility.u(x_t)


def performance_criterion(
    model: MarketModel,
    grid: TimeGrid,
    noise: NoisePathSet,
    policy: AnyPolicy,
    utility: Utility,
    x0: float,
) -> Tuple[float, float]:
    """Monte Carlo estimate of E[U(X_T)] with its standard error."""
    u = terminal_utilities(model, grid, noise, policy, utility, x0)
    n = len(u)
    se = float(np.std(u, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(u)), se


def _as_direction(direction, template: AnyPolicy):
    cls = DollarPolicy if isinstance(template, DollarPolicy) else PortfolioPolicy
    if isinstance(direction, (PortfolioPolicy, DollarPolicy)):
        if isinstance(direction, DollarPolicy) != isinstance(template, DollarPolicy):
            raise TypeError("direction and policy must share control units")
        return direction
    return cls.constant(direction)


def perturb_policy(policy: AnyPolicy, direction, eps: float) -> AnyPolicy:
    """policy + eps * direction, preserving the policy type (a K-stopped
    policy keeps its threshold and stops by its own perturbed wealth)."""
    if isinstance(policy, StoppedPolicy):
        return StoppedPolicy(perturb_policy(policy.base, direction, eps), policy.threshold_K)
    direction = _as_direction(direction, policy)
    cls = type(policy)
    if policy.kind == "constant" and direction.kind == "constant":
        return cls.constant(policy.values(0.0, np.empty(0)) + eps * direction.values(0.0, np.empty(0)))
    if "feedback" not in (policy.kind, direction.kind):
        return cls.from_function(
            lambda t: np.atleast_1d(policy.values(t, np.empty(0)))
            + eps * np.atleast_1d(direction.values(t, np.empty(0))),
            n_assets=policy.n_assets,
        )

    def combined(t, x):
        return _per_path(policy.values(t, x), len(x)) + eps * _per_path(direction.values(t, x), len(x))

    return cls.feedback(combined, n_assets=policy.n_assets)


def gateaux_fd(
    model: MarketModel,
    grid: TimeGrid,
    noise: NoisePathSet,
    policy: AnyPolicy,
    direction,
    utility: Utility,
    x0: float,
    epsilon_ladder: Sequence[float] = DEFAULT_EPSILON_LADDER,
) -> GateauxEstimate:
    """Central-difference derivative under common random numbers.

    All rungs reuse the same noise, so the O(eps^2) bias and the dominant
    Monte Carlo variance cancel in the difference.  The reported value is
    the rung minimizing (estimated bias)^2 + variance against a
    least-squares fit D(eps) = a + b eps^2; a noise-floor diagnostic is
    set when the rung values are statistically indistinguishable from
    the extrapolated limit.
    """
    ladder = tuple(float(e) for e in epsilon_ladder)
    if len(ladder) == 0 or any(e <= 0 for e in ladder) or any(
        ladder[i + 1] >= ladder[i] for i in range(len(ladder) - 1)
    ):
        raise ValueError(f"epsilon ladder must be positive and strictly decreasing, got {ladder}")
    direction = _as_direction(direction, policy)

    per_rung = []
    for eps in ladder:
        up = terminal_utilities(model, grid, noise, perturb_policy(policy, direction, eps),
                                utility, x0)
        down = terminal_utilities(model, grid, noise, perturb_policy(policy, direction, -eps),
                                  utility, x0)
        per_rung.append((up - down) / (2.0 * eps))

    values = np.array([s.mean() for s in per_rung])
    errors = np.array([s.std(ddof=1) / np.sqrt(len(s)) for s in per_rung])

    design = np.column_stack([np.ones(len(ladder)), np.square(ladder)])
    coef, *_ = np.linalg.lstsq(design, values, rcond=None)
    extrapolated = float(coef[0])
    bias = np.abs(values - extrapolated)
    best = int(np.argmin(bias**2 + errors**2))
    noise_floor = bool(np.all(bias < 2.0 * np.maximum(errors, 1e-300)))
    return GateauxEstimate(
        value=float(values[best]),
        std_error=float(errors[best]),
        method="finite-difference",
        epsilon_ladder=ladder,
        diagnostics={
            "rung_values": values,
            "rung_std_errors": errors,
            "extrapolated": extrapolated,
            "chosen_rung": best,
            "noise_floor": noise_floor,
        },
        samples=per_rung[best],
    )


def _bsde_compatible(bsde: BsdeSolution, grid: TimeGrid, n_paths: int):
    if bsde.grid.n_steps != grid.n_steps or bsde.grid.horizon_T != grid.horizon_T:
        raise ValueError("backward solution was produced on a different grid")
    if bsde.per_path and bsde.Y.shape[0] != n_paths:
        raise ValueError(
            f"backward solution carries {bsde.Y.shape[0]} paths, noise has {n_paths}"
        )


def gateaux_formula(
    model: MarketModel,
    grid: TimeGrid,
    noise: NoisePathSet,
    policy: WeightLike,
    direction,
    utility: Utility,
    x0: float,
    bsde: BsdeSolution,
) -> GateauxEstimate:
    """Derivative via E[ int_0^{T^tau} omega' Y (g + F1 Sigma sigma) dt ].

    Requires the backward solution for the same policy; integrals use
    left-endpoint quadrature, matching the forward discretization.
    """
    direction = _as_direction(direction, policy)
    n_paths = noise.increments.shape[0]
    _bsde_compatible(bsde, grid, n_paths)
    stepper = _WeightStepper(model, grid, noise, policy, x0)
    acc = np.zeros(n_paths)
    dt = grid.dt
    for k, t, x, w, active in stepper.steps():
        bundle = coefficient_bundle(utility, x)
        sig = model.cov(t)
        theta = model.excess_returns(t)
        g = bundle.F1[:, None] * theta + bundle.F2[:, None] * (w @ sig)
        sigma_k = bsde.sigma_at(k)
        if sigma_k.ndim == 1:
            adj = bundle.F1[:, None] * (sig @ sigma_k)
        else:
            adj = bundle.F1[:, None] * (sigma_k @ sig)
        d = _per_path(direction.values(t, x), n_paths)
        integrand = bsde.y_at(k) * np.einsum("pi,pi->p", d, g + adj)
        acc += np.where(active, integrand, 0.0) * dt
    se = float(np.std(acc, ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    return GateauxEstimate(
        value=float(np.mean(acc)),
        std_error=se,
        method="formula",
        samples=acc,
    )


def _pathwise_first_order(model, grid, noise, policy, direction, utility, x0):
    """Per-path U(X_T) and the pathwise derivative F1(X_T) * I_T, where
    I_t accumulates omega'(theta - Sigma pi) dt + omega' dM."""
    stepper = _WeightStepper(model, grid, noise, policy, x0)
    n_paths = stepper.n_paths
    i_acc = np.zeros(n_paths)
    dt = grid.dt
    for k, t, x, w, active in stepper.steps():
        theta = model.excess_returns(t)
        sig = model.cov(t)
        d = _per_path(direction.values(t, x), n_paths)
        drift = np.einsum("pi,pi->p", d, theta - w @ sig)
        jump = np.einsum("pi,pi->p", d, noise.increments[:, k, :])
        i_acc += np.where(active, drift * dt + jump, 0.0)
    x_t = stepper.terminal_x
    f1 = utility.du(x_t) * x_t
    return utility.u(x_t), f1 * i_acc


def expansion_order_check(
    model: MarketModel,
    grid: TimeGrid,
    noise: NoisePathSet,
    policy: WeightLike,
    direction,
    utility: Utility,
    x0: float,
    epsilon_ladder: Sequence[float] = (0.1, 0.05, 0.025),
) -> ExpansionCheckResult:
    """Order of the first-order remainder R(eps) = H(pi+eps*omega) - H(pi)
    - eps <omega, H'(pi)> on the ladder.

    The derivative term is estimated pathwise (F1_T * I_T under the same
    noise), so for log utility the Monte Carlo noise cancels exactly and
    R(eps) = -eps^2 omega'Sigma omega T / 2 to machine precision.  The
    returned slope is the log-log fit over rungs distinguishable from
    zero; identically-zero remainders give slope nan.  Raises when noise
    drowns all but one rung.
    """
    ladder = tuple(float(e) for e in epsilon_ladder)
    direction = _as_direction(direction, policy)
    u0, first_order = _pathwise_first_order(model, grid, noise, policy, direction, utility, x0)

    remainders = np.empty(len(ladder))
    std_errors = np.empty(len(ladder))
    for j, eps in enumerate(ladder):
        u_eps = terminal_utilities(model, grid, noise, perturb_policy(policy, direction, eps),
                                   utility, x0)
        sample = u_eps - u0 - eps * first_order
        remainders[j] = sample.mean()
        std_errors[j] = sample.std(ddof=1) / np.sqrt(len(sample))

    if np.all(remainders == 0.0):
        return ExpansionCheckResult(float("nan"), ladder, remainders, std_errors)
    valid = np.abs(remainders) > 2.0 * std_errors
    if valid.sum() < 2:
        raise ValueError(
            "remainder is below the Monte Carlo noise floor on all but "
            f"{int(valid.sum())} rung(s); increase paths or epsilons"
        )
    slope = float(np.polyfit(np.log(np.asarray(ladder)[valid]),
                             np.log(np.abs(remainders[valid])), 1)[0])
    return ExpansionCheckResult(slope, ladder, remainders, std_errors)


def mhat_martingale_check(
    model: MarketModel,
    grid: TimeGrid,
    noise: NoisePathSet,
    policy: WeightLike,
    utility: Utility,
    x0: float,
    bsde: BsdeSolution,
    check_fractions: Sequence[float] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
    atol: float = 1e-12,
) -> MartingaleCheckResult:
    """Constancy in t of E[F1_t (Y_t - 1) + int_0^t h du].

    The bracket equals the conditional expectation of int_0^{T^tau} h du,
    so its mean must match the unconditional terminal value at every
    probed node.  Deviations are measured pathwise (difference against
    the terminal integral under the same noise) in standard-error units.
    """
    n_paths = noise.increments.shape[0]
    _bsde_compatible(bsde, grid, n_paths)
    node_indices = np.unique([int(round(f * grid.n_steps)) for f in check_fractions])
    stepper = _WeightStepper(model, grid, noise, policy, x0)
    cum_h = np.zeros(n_paths)
    snapshots = {}
    dt = grid.dt
    for k, t, x, w, active in stepper.steps():
        bundle = coefficient_bundle(utility, x)
        if k in node_indices:
            snapshots[k] = bundle.F1 * (bsde.y_at(k) - 1.0) + cum_h
        sig = model.cov(t)
        theta = model.excess_returns(t)
        quad = np.einsum("pi,ij,pj->p", w, sig, w)
        h = (bundle.F1 + bundle.F2) * (model.rate(t) + w @ theta) \
            + (bundle.F2 + 0.5 * bundle.F3) * quad
        cum_h += np.where(active, h, 0.0) * dt
    if grid.n_steps in node_indices:
        x_t = stepper.terminal_x
        bundle = coefficient_bundle(utility, x_t)
        snapshots[grid.n_steps] = bundle.F1 * (bsde.y_at(grid.n_steps) - 1.0) + cum_h

    deviations = np.empty(len(node_indices))
    std_errors = np.empty(len(node_indices))
    worst = 0.0
    for j, k in enumerate(node_indices):
        diff = snapshots[k] - cum_h
        deviations[j] = diff.mean()
        std_errors[j] = diff.std(ddof=1) / np.sqrt(n_paths)
        if abs(deviations[j]) <= atol:
            continue
        if std_errors[j] > 0:
            worst = max(worst, abs(deviations[j]) / std_errors[j])
        else:
            worst = float("inf")
    return MartingaleCheckResult(
        max_deviation_se=worst,
        node_indices=node_indices,
        deviations=deviations,
        std_errors=std_errors,
    )


def perturbation_processes(
    model: MarketModel,
    grid: TimeGrid,
    noise: NoisePathSet,
    policy: WeightLike,
    direction,
    utility: Utility,
    x0: float,
) -> PerturbationProcesses:
    """Materialize g, h, q and the running I along every path.

    Intended for diagnostics at small path counts; the estimators above
    recompute these quantities streaming instead of storing them.
    """
    direction = _as_direction(direction, policy)
    stepper = _WeightStepper(model, grid, noise, policy, x0)
    n_paths = stepper.n_paths
    n = model.n_assets
    g = np.zeros((n_paths, grid.n_steps, n))
    h = np.zeros((n_paths, grid.n_steps))
    q = np.zeros((n_paths, grid.n_steps))
    i_omega = np.zeros((n_paths, grid.n_steps + 1))
    dt = grid.dt
    for k, t, x, w, active in stepper.steps():
        bundle = coefficient_bundle(utility, x)
        sig = model.cov(t)
        theta = model.excess_returns(t)
        g[:, k, :] = bundle.F1[:, None] * theta + bundle.F2[:, None] * (w @ sig)
        quad = np.einsum("pi,ij,pj->p", w, sig, w)
        h[:, k] = (bundle.F1 + bundle.F2) * (model.rate(t) + w @ theta) \
            + (bundle.F2 + 0.5 * bundle.F3) * quad
        q[:, k] = bundle.F1 + bundle.F2
        d = _per_path(direction.values(t, x), n_paths)
        incr = np.einsum("pi,pi->p", d, theta - w @ sig) * dt \
            + np.einsum("pi,pi->p", d, noise.increments[:, k, :])
        i_omega[:, k + 1] = i_omega[:, k] + np.where(active, incr, 0.0)
    return PerturbationProcesses(g=g, h=h, q=q, I_omega=i_omega)
