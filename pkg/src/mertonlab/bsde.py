"""Backward solvers for the adjoint pair (Y, sigma) and the optimal policy.

For a control pi, the pair (Y, sigma) solves the backward equation

    d log Y = -(h/F1 + (q/F1) sigma'Sigma pi + sigma'Sigma sigma / 2) dt
              + sigma' dM,        log Y_T = 0,

with q = F1 + F2 and h = q (r + pi'theta) + (F2 + F3/2) pi'Sigma pi.
For log and power utility the ratios h/F1 and q/F1 are wealth-free:

    h/F1 = c0 (r + pi'theta) + c1 pi'Sigma pi,
    (c0, c1, q/F1) = (0, 0, 0)                     for log,
    (c0, c1, q/F1) = (eta, eta(eta-1)/2, eta)      for power.

The optimal control is the feedback pi* = zeta (Sigma^{-1} theta + sigma),
at which the first-variation density g + F1 Sigma sigma vanishes pathwise
(g = F1 theta + F2 Sigma pi).

Three solution modes:

* ode-reduction: deterministic coefficients make the driver a
  deterministic function of time, so sigma = 0 and log Y is a backward
  quadrature;
* regression-mc: Markov-modulated coefficients; conditional expectations
  are fit node by node by least squares on polynomials of the chain
  state, sigma recovered from the regression of the martingale residual
  on dM;
* picard-coupled: exponential utility under dollar control, where
  zeta X = 1/gamma couples the backward equation to the forward wealth;
  solved by damped Picard alternation of forward simulation and backward
  regression.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .market import (
    MarketModel,
    NoisePathSet,
    RegimeSwitchingMarket,
    TimeGrid,
    sample_noise,
    sample_regime_paths,
)
from .utility import Utility, coefficient_bundle
from .wealth import DollarPolicy, PortfolioPolicy, simulate_wealth_dollars, simulate_wealth_weights


class PicardConvergenceError(RuntimeError):
    """Picard alternation failed to meet tolerance; carries the history."""

    def __init__(self, message, residual_history):
        super().__init__(message)
        self.residual_history = residual_history


@dataclass
class BsdeSolution:
    """(Y, sigma) on the grid nodes.

    Y has shape (n_steps+1,) in deterministic mode or
    (n_paths, n_steps+1) in sampled modes; sigma is (n_steps+1, n_assets)
    when deterministic per node or (n_paths, n_steps+1, n_assets) when
    state-dependent.  Y_T = 1 and Y > 0 in every mode (all solves run in
    log space).
    """

    grid: TimeGrid
    Y: np.ndarray
    sigma: np.ndarray
    mode: str
    diagnostics: dict = field(default_factory=dict)

    @property
    def per_path(self) -> bool:
        return self.Y.ndim == 2

    def y_at(self, k: int):
        return self.Y[:, k] if self.per_path else self.Y[k]

    def sigma_at(self, k: int) -> np.ndarray:
        return self.sigma[:, k, :] if self.sigma.ndim == 3 else self.sigma[k]


@dataclass
class OptimalPolicyResult:
    """Optimal policy with its backward solution and the max-node
    stationarity residual ||g + F1 Sigma sigma|| on validation paths."""

    policy: Union[PortfolioPolicy, DollarPolicy]
    solution: BsdeSolution
    residual: float
    diagnostics: dict = field(default_factory=dict)


def _zeta_constant(utility: Utility) -> float:
    if utility.kind == "log":
        return 1.0
    if utility.kind == "power":
        return 1.0 / (1.0 - utility.eta)
    raise ValueError(f"no wealth-free zeta for utility kind '{utility.kind}'")


def _driver_coefficients(utility: Utility):
    """(c0, c1, q/F1) for utilities with wealth-free driver ratios."""
    if utility.kind == "log":
        return 0.0, 0.0, 0.0
    if utility.kind == "power":
        eta = utility.eta
        return eta, 0.5 * eta * (eta - 1.0), eta
    raise ValueError(f"backward reduction requires log or power utility, got '{utility.kind}'")


def _policy_weights_at(policy: Optional[PortfolioPolicy], utility, model, t: float) -> np.ndarray:
    """Weights at time t for a deterministic policy; None means optimal."""
    if policy is None:
        sig = model.cov(t)
        return _zeta_constant(utility) * np.linalg.solve(sig, model.excess_returns(t))
    if policy.kind == "feedback":
        raise ValueError("deterministic backward solve requires a wealth-free policy")
    return np.atleast_1d(np.asarray(policy.values(t, np.empty(0)), dtype=float))


def solve_bsde_deterministic(
    utility: Utility,
    model: MarketModel,
    grid: TimeGrid,
    policy: Optional[PortfolioPolicy] = None,
) -> BsdeSolution:
    """Backward quadrature of log Y with sigma = 0.

    Valid for log and power utility with deterministic-in-time
    coefficients, where the conditional expectation defining Y is
    deterministic and the martingale part vanishes.  policy may be any
    wealth-free (constant or time-function) control; None solves at the
    optimal control, for which the driver reduces to
    eta r + eta/(1-eta) theta'Sigma^{-1}theta / 2 (identically zero for
    log, so Y = 1 there).
    """
    c0, c1, _ = _driver_coefficients(utility)
    n = model.n_assets
    dt = grid.dt
    driver = np.empty(grid.n_steps)
    for k, t in enumerate(grid.nodes[:-1]):
        w = _policy_weights_at(policy, utility, model, t)
        theta = model.excess_returns(t)
        sig = model.cov(t)
        driver[k] = c0 * (model.rate(t) + w @ theta) + c1 * (w @ sig @ w)
    log_y = np.concatenate([np.cumsum(driver[::-1] * dt)[::-1], [0.0]])
    return BsdeSolution(
        grid=grid,
        Y=np.exp(log_y),
        sigma=np.zeros((grid.n_steps + 1, n)),
        mode="ode-reduction",
        diagnostics={"policy": "optimal" if policy is None else policy.kind},
    )


def _polynomial_basis(state: np.ndarray, degree: int) -> np.ndarray:
    return np.vander(state.astype(float), N=degree + 1, increasing=True)


def _fit_conditional(basis: np.ndarray, target: np.ndarray):
    """Least-squares conditional expectation of target given the basis.

    Returns (fitted values, rank-deficient flag).  Rank deficiency is
    expected in the degenerate single-state mode, where the minimum-norm
    solution still reproduces constants exactly.
    """
    beta, _, rank, _ = np.linalg.lstsq(basis, target, rcond=None)
    return basis @ beta, rank < basis.shape[1]


def solve_bsde_regression(
    utility: Utility,
    market: RegimeSwitchingMarket,
    grid: TimeGrid,
    noise: NoisePathSet,
    chain_seed: int,
    basis_degree: int = 3,
    policy: Optional[PortfolioPolicy] = None,
    initial_state: int = 0,
) -> BsdeSolution:
    """Backward least-squares solve on a Markov-modulated market.

    At each node the conditional expectation of log Y at the next node
    is regressed on polynomials of the chain state; sigma comes from
    regressing the martingale residual against the noise increment.  The
    chain is independent of the noise, so the fitted sigma hovers near
    zero, consistent with the decoupled structure.  Nodes where the
    basis is rank deficient (inevitable in the single-state mode) are
    recorded in diagnostics, not raised.
    """
    n_paths, n_steps, n = noise.increments.shape
    minimum_paths = max(20, 5 * (basis_degree + 1))
    if n_paths < minimum_paths:
        raise ValueError(
            f"need at least {minimum_paths} paths for basis degree {basis_degree}, got {n_paths}"
        )
    c0, c1, q_f1 = _driver_coefficients(utility)
    zeta = _zeta_constant(utility)
    states = sample_regime_paths(market, grid, chain_seed, n_paths, initial_state)
    sig = market.cov
    sig_inv = np.linalg.inv(sig)
    dt = grid.dt
    m = market.n_states
    thetas = np.array([market.excess_returns_for_state(s) for s in range(m)])
    optimal_base = thetas @ sig_inv.T  # Sigma^{-1} theta per state

    log_y = np.zeros((n_paths, n_steps + 1))
    sigma = np.zeros((n_paths, n_steps + 1, n))
    rank_deficient_nodes = []

    for k in range(n_steps - 1, -1, -1):
        s_k = states[:, k]
        basis = _polynomial_basis(s_k, basis_degree)
        cond, deficient = _fit_conditional(basis, log_y[:, k + 1])
        if deficient:
            rank_deficient_nodes.append(k)
        resid = log_y[:, k + 1] - cond

        cross = resid[:, None] * noise.increments[:, k, :]
        fitted_cross = np.empty((n_paths, n))
        for j in range(n):
            fitted_cross[:, j], _ = _fit_conditional(basis, cross[:, j])
        sigma_k = (fitted_cross @ sig_inv.T) / dt
        sigma[:, k, :] = sigma_k

        if policy is None:
            w_k = zeta * (optimal_base[s_k] + sigma_k)
        else:
            w = _policy_weights_at(policy, utility, market, grid.nodes[k])
            w_k = np.broadcast_to(w, (n_paths, n))
        r_k = market.rates[s_k]
        theta_k = thetas[s_k]
        h_part = c0 * (r_k + np.einsum("pi,pi->p", w_k, theta_k)) \
            + c1 * np.einsum("pi,ij,pj->p", w_k, sig, w_k)
        coupling = q_f1 * np.einsum("pi,ij,pj->p", sigma_k, sig, w_k)
        quad = 0.5 * np.einsum("pi,ij,pj->p", sigma_k, sig, sigma_k)
        log_y[:, k] = cond + (h_part + coupling + quad) * dt

    return BsdeSolution(
        grid=grid,
        Y=np.exp(log_y),
        sigma=sigma,
        mode="regression-mc",
        diagnostics={
            "rank_deficient_nodes": rank_deficient_nodes,
            "basis_degree": basis_degree,
            "chain_seed": chain_seed,
        },
    )


def solve_fbsde_exponential(
    model: MarketModel,
    grid: TimeGrid,
    noise: NoisePathSet,
    gamma: float,
    x0: float,
    picard_iters: int = 10,
    tol: float = 1e-3,
    basis_degree: int = 3,
    damping: float = 0.5,
) -> OptimalPolicyResult:
    """Coupled solve for exponential utility under dollar control.

    The optimal dollar amounts are ptilde = (Sigma^{-1} theta + sigma)/gamma
    and the backward equation for log Y has drift
    (gamma X - 1) r + theta'Sigma^{-1}theta/2 + theta'sigma, coupled to
    the forward wealth whenever r != 0.  Starting from sigma = 0, each
    Picard sweep simulates the forward equation at the current control,
    regresses the backward equation on polynomials of wealth, extracts a
    per-node sigma from the martingale residual and damps the update.
    When r = 0 the coupling vanishes and sigma = 0 is an exact fixed
    point, reached on the first sweep.

    Raises PicardConvergenceError (with the residual history) when the
    sup-node update still exceeds tol after picard_iters sweeps.
    """
    if not gamma > 0:
        raise ValueError(f"gamma must be > 0, got {gamma}")
    n_paths, n_steps, n = noise.increments.shape
    dt = grid.dt
    nodes = grid.nodes

    sig_nodes = np.array([model.cov(t) for t in nodes[:-1]])
    theta_nodes = np.array([model.excess_returns(t) for t in nodes[:-1]])
    rate_nodes = np.array([model.rate(t) for t in nodes[:-1]])
    sig_inv_theta = np.array([np.linalg.solve(s, th) for s, th in zip(sig_nodes, theta_nodes)])
    quad_theta = np.einsum("ki,ki->k", theta_nodes, sig_inv_theta)

    def dollar_policy(amounts):
        def amounts_at(t):
            k = min(int(np.searchsorted(nodes, t, side="right")) - 1, n_steps - 1)
            return amounts[max(k, 0)]

        return DollarPolicy.from_function(amounts_at, n_assets=n)

    sigma = np.zeros((n_steps + 1, n))
    history = []
    wealth = None
    log_y = None
    for _ in range(picard_iters):
        amounts = (sig_inv_theta + sigma[:-1]) / gamma
        wealth = simulate_wealth_dollars(model, grid, noise, dollar_policy(amounts), x0).wealth

        log_y = np.zeros((n_paths, n_steps + 1))
        sigma_new = np.zeros((n_steps + 1, n))
        for k in range(n_steps - 1, -1, -1):
            basis = _polynomial_basis(wealth[:, k], basis_degree)
            cond, _ = _fit_conditional(basis, log_y[:, k + 1])
            resid = log_y[:, k + 1] - cond
            cross = resid @ noise.increments[:, k, :] / n_paths
            sigma_new[k] = np.linalg.solve(sig_nodes[k], cross) / dt
            drift = (gamma * wealth[:, k] - 1.0) * rate_nodes[k] + 0.5 * quad_theta[k] \
                + theta_nodes[k] @ sigma[k]
            log_y[:, k] = cond - drift * dt

        updated = sigma + damping * (sigma_new - sigma)
        residual = float(np.max(np.abs(updated - sigma)))
        history.append(residual)
        sigma = updated
        if residual < tol:
            break
    else:
        raise PicardConvergenceError(
            f"no convergence after {picard_iters} sweeps (last update {history[-1]:.3e})",
            history,
        )

    # Final self-consistent pass at the converged sigma, plus a companion
    # backward pass for log Ytilde = log Y + int_t^T r ds, whose drift is
    # (gamma X - 2) r + theta'Sigma^{-1}theta/2 + theta'sigma.
    amounts = (sig_inv_theta + sigma[:-1]) / gamma
    wealth = simulate_wealth_dollars(model, grid, noise, dollar_policy(amounts), x0).wealth
    log_y = np.zeros((n_paths, n_steps + 1))
    log_y_tilde = np.zeros((n_paths, n_steps + 1))
    for k in range(n_steps - 1, -1, -1):
        basis = _polynomial_basis(wealth[:, k], basis_degree)
        cond, _ = _fit_conditional(basis, log_y[:, k + 1])
        cond_tilde, _ = _fit_conditional(basis, log_y_tilde[:, k + 1])
        common = 0.5 * quad_theta[k] + theta_nodes[k] @ sigma[k]
        log_y[:, k] = cond - ((gamma * wealth[:, k] - 1.0) * rate_nodes[k] + common) * dt
        log_y_tilde[:, k] = cond_tilde - ((gamma * wealth[:, k] - 2.0) * rate_nodes[k] + common) * dt

    solution = BsdeSolution(
        grid=grid,
        Y=np.exp(log_y),
        sigma=sigma,
        mode="picard-coupled",
        diagnostics={
            "picard_residuals": history,
            "iterations": len(history),
            "log_y_tilde": log_y_tilde,
            "dollar_amounts": amounts,
        },
    )

    # first-variation residual on the forward paths:
    # g + F1 Sigma sigma = gamma X e^{-gamma X} (theta - gamma Sigma ptilde + Sigma sigma)
    worst = 0.0
    for k in range(n_steps):
        vec = theta_nodes[k] - gamma * sig_nodes[k] @ amounts[k] + sig_nodes[k] @ sigma[k]
        scale = gamma * wealth[:, k] * np.exp(-gamma * wealth[:, k])
        worst = max(worst, float(np.max(np.abs(scale)) * np.linalg.norm(vec)))
    return OptimalPolicyResult(
        policy=dollar_policy(amounts),
        solution=solution,
        residual=worst,
        diagnostics={"iterations": len(history), "picard_residuals": history},
    )


def optimal_policy(
    utility: Utility,
    model: MarketModel,
    solution: BsdeSolution,
    x0: float = 1.0,
    validation_paths: int = 200,
    validation_seed: int = 321,
) -> OptimalPolicyResult:
    """Assemble pi* = zeta (Sigma^{-1} theta + sigma) from a backward solution.

    The returned residual is the max over validation paths and nodes of
    ||g + F1 Sigma sigma||, which vanishes at the optimum.  Exponential
    utility is handled by solve_fbsde_exponential (dollar control).
    """
    if utility.kind == "exponential":
        raise ValueError("exponential utility uses solve_fbsde_exponential (dollar control)")
    if solution.per_path:
        raise ValueError("optimal_policy expects a deterministic-mode solution")
    zeta = _zeta_constant(utility)
    grid = solution.grid
    nodes = grid.nodes
    n = model.n_assets
    table = np.empty((grid.n_steps, n))
    for k, t in enumerate(nodes[:-1]):
        table[k] = zeta * (np.linalg.solve(model.cov(t), model.excess_returns(t)) + solution.sigma[k])

    def weights_at(t):
        k = min(int(np.searchsorted(nodes, t, side="right")) - 1, grid.n_steps - 1)
        return table[max(k, 0)]

    policy = PortfolioPolicy.from_function(weights_at, n_assets=n)
    noise = sample_noise(model, grid, validation_seed, validation_paths)
    residual = stationarity_residual(utility, model, grid, noise, policy, solution, x0)
    return OptimalPolicyResult(policy=policy, solution=solution, residual=residual)


def stationarity_residual(
    utility: Utility,
    model: MarketModel,
    grid: TimeGrid,
    noise: NoisePathSet,
    policy: PortfolioPolicy,
    solution: BsdeSolution,
    x0: float = 1.0,
) -> float:
    """Max over paths and nodes of ||g + F1 Sigma sigma|| under the policy.

    Zero (to rounding) exactly at the optimal control; bounded away from
    zero elsewhere, which is the practical optimality certificate.
    """
    path = simulate_wealth_weights(model, grid, noise, policy, x0)
    worst = 0.0
    n_paths = path.wealth.shape[0]
    for k, t in enumerate(grid.nodes[:-1]):
        x = path.wealth[:, k]
        bundle = coefficient_bundle(utility, x)
        w = policy.values(t, x)
        if w.ndim == 1:
            w = np.broadcast_to(w, (n_paths, model.n_assets))
        sig = model.cov(t)
        sigma_k = solution.sigma_at(k)
        g = bundle.F1[:, None] * model.excess_returns(t) + bundle.F2[:, None] * (w @ sig)
        if sigma_k.ndim == 1:
            adj = bundle.F1[:, None] * (sig @ sigma_k)
        else:
            adj = bundle.F1[:, None] * (sigma_k @ sig)
        worst = max(worst, float(np.max(np.linalg.norm(g + adj, axis=1))))
    return worst
