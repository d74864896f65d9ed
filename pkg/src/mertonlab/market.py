"""Market coefficient processes and correlated noise generation.

The market consists of one risk-free asset paying rate r_t and n risky
assets whose log prices are driven by a continuous martingale with
quadratic covariation rate Sigma_t (per year).  Coefficients are
deterministic functions of time; a piecewise-constant regime-switching
variant (independent seeded chain modulating r and alpha) is available
for exercising the stochastic-parameter backward solvers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

# Separate Philox sub-streams so market noise and regime chains never
# overlap even when given the same user seed.
_NOISE_STREAM = 0
_REGIME_STREAM = 1


class MarketValidationError(ValueError):
    """Raised when market coefficients violate the boundedness or
    eigenvalue-window requirements."""


def path_generator(seed: int, path_index: int, stream: int = _NOISE_STREAM) -> np.random.Generator:
    """Counter-based per-path RNG stream.

    Each (seed, path_index) pair owns a disjoint Philox stream, so a
    single path can be regenerated bit-identically without touching the
    others and results do not depend on scheduling order.
    """
    bitgen = np.random.Philox(key=[np.uint64(seed), np.uint64(stream)])
    return np.random.Generator(bitgen.jumped(path_index))


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*dt on [0, T]."""

    horizon_T: float
    n_steps: int

    def __post_init__(self):
        if not (self.horizon_T > 0 and np.isfinite(self.horizon_T)):
            raise ValueError(f"horizon_T must be a positive real, got {self.horizon_T}")
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.horizon_T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon_T, self.n_steps + 1)


@dataclass(frozen=True)
class MarketModel:
    """Validated market coefficients.

    rate_fn, drift_fn and cov_fn map time (years) to the risk-free rate,
    the vector of instantaneous rates of return and the quadratic
    covariation rate matrix.  Instances are immutable and safe to share
    across threads.
    """

    n_assets: int
    rate_fn: Callable[[float], float]
    drift_fn: Callable[[float], np.ndarray]
    cov_fn: Callable[[float], np.ndarray]
    bound_M: float
    ellipticity_eps: float
    ellipticity_C: float
    initial_prices: np.ndarray

    def rate(self, t: float) -> float:
        return float(self.rate_fn(t))

    def drift(self, t: float) -> np.ndarray:
        return np.asarray(self.drift_fn(t), dtype=float).reshape(self.n_assets)

    def cov(self, t: float) -> np.ndarray:
        return np.asarray(self.cov_fn(t), dtype=float).reshape(self.n_assets, self.n_assets)

    def excess_returns(self, t: float) -> np.ndarray:
        """theta_t = alpha_t - r_t * 1."""
        return self.drift(t) - self.rate(t)

    def is_constant(self, grid: TimeGrid, rtol: float = 1e-12) -> bool:
        """True when r, alpha, Sigma do not vary across the grid nodes."""
        r0, a0, s0 = self.rate(0.0), self.drift(0.0), self.cov(0.0)
        for t in grid.nodes:
            if abs(self.rate(t) - r0) > rtol * max(1.0, abs(r0)):
                return False
            if np.max(np.abs(self.drift(t) - a0)) > rtol:
                return False
            if np.max(np.abs(self.cov(t) - s0)) > rtol:
                return False
        return True


def _as_time_fn(value, shape=None):
    """Wrap a constant (scalar/vector/matrix) or pass through a callable."""
    if callable(value):
        return value
    arr = np.array(value, dtype=float)
    if shape is not None:
        arr = arr.reshape(shape)
    frozen = arr if arr.ndim else float(arr)
    return lambda t, _v=frozen: _v


def build_market(
    n_assets: int,
    r,
    alpha,
    sigma,
    initial_prices=None,
    bound_M: float = 100.0,
    ellipticity_eps: float = 1e-10,
    ellipticity_C: float = 1e4,
    horizon_T: float = 1.0,
    validation_samples: Optional[int] = None,
) -> MarketModel:
    """Build and validate a market model.

    r, alpha, sigma may be constants or callables of time.  Validation
    samples the coefficients on a dense grid over [0, horizon_T] and
    checks boundedness of r and alpha, symmetry of Sigma and that every
    Sigma eigenvalue lies inside [ellipticity_eps, ellipticity_C].

    Raises
    ------
    MarketValidationError
        On any violated bound, asymmetric Sigma or non-finite value.
    """
    n = int(n_assets)
    if n < 1:
        raise MarketValidationError(f"n_assets must be >= 1, got {n_assets}")
    if initial_prices is None:
        initial_prices = np.ones(n)
    p0 = np.asarray(initial_prices, dtype=float).reshape(n)
    if np.any(p0 <= 0) or not np.all(np.isfinite(p0)):
        raise MarketValidationError(f"initial prices must be positive and finite, got {p0}")

    model = MarketModel(
        n_assets=n,
        rate_fn=_as_time_fn(r),
        drift_fn=_as_time_fn(alpha, shape=(n,)),
        cov_fn=_as_time_fn(sigma, shape=(n, n)),
        bound_M=float(bound_M),
        ellipticity_eps=float(ellipticity_eps),
        ellipticity_C=float(ellipticity_C),
        initial_prices=p0,
    )
    n_samples = validation_samples if validation_samples is not None else 2500
    validate_market(model, horizon_T, n_samples)
    return model


def validate_market(model: MarketModel, horizon_T: float, n_samples: int = 2500) -> None:
    """Check coefficient bounds on a dense sample of [0, horizon_T]."""
    for t in np.linspace(0.0, horizon_T, n_samples + 1):
        rt = model.rate(t)
        at = model.drift(t)
        st = model.cov(t)
        if not np.isfinite(rt) or not np.all(np.isfinite(at)) or not np.all(np.isfinite(st)):
            raise MarketValidationError(f"non-finite coefficient at t={t}")
        if abs(rt) > model.bound_M:
            raise MarketValidationError(f"|r({t})| = {abs(rt)} exceeds bound {model.bound_M}")
        if np.max(np.abs(at)) > model.bound_M:
            raise MarketValidationError(
                f"max |alpha({t})| = {np.max(np.abs(at))} exceeds bound {model.bound_M}"
            )
        if not np.allclose(st, st.T, rtol=0, atol=1e-12 * max(1.0, np.max(np.abs(st)))):
            raise MarketValidationError(f"Sigma({t}) is not symmetric")
        eigs = np.linalg.eigvalsh(st)
        if eigs.min() < model.ellipticity_eps:
            raise MarketValidationError(
                f"Sigma({t}) eigenvalue {eigs.min()} below floor {model.ellipticity_eps}"
            )
        if eigs.max() > model.ellipticity_C:
            raise MarketValidationError(
                f"Sigma({t}) eigenvalue {eigs.max()} above cap {model.ellipticity_C}"
            )


@dataclass(frozen=True)
class NoisePathSet:
    """Correlated martingale increments Delta-M on a time grid.

    increments has shape (n_paths, n_steps, n_assets); step k carries
    covariance Sigma(t_k) * dt.  Regeneration with the same
    (seed, path index) is bit-identical.
    """

    seed: int
    n_paths: int
    grid: TimeGrid
    increments: np.ndarray

    @property
    def n_assets(self) -> int:
        return self.increments.shape[2]


def _step_factors(model: MarketModel, grid: TimeGrid) -> np.ndarray:
    """Lower-triangular factor of Sigma(t_k) per step, scaled by sqrt(dt)."""
    n = model.n_assets
    factors = np.empty((grid.n_steps, n, n))
    sqrt_dt = np.sqrt(grid.dt)
    for k, t in enumerate(grid.nodes[:-1]):
        sig = model.cov(t)
        try:
            factors[k] = np.linalg.cholesky(sig) * sqrt_dt
        except np.linalg.LinAlgError as exc:  # excluded by the eigenvalue window
            raise RuntimeError(f"covariance factorization failed at t={t}: {exc}") from exc
    return factors


def sample_noise(model: MarketModel, grid: TimeGrid, seed: int, n_paths: int) -> NoisePathSet:
    """Draw Gaussian martingale increments with per-step covariance Sigma*dt.

    Deterministic given (seed, path index); paths may be generated in any
    order or in parallel without changing the result.
    """
    if n_paths < 0:
        raise ValueError(f"n_paths must be >= 0, got {n_paths}")
    n = model.n_assets
    increments = np.empty((n_paths, grid.n_steps, n))
    if n_paths == 0:
        return NoisePathSet(seed=seed, n_paths=0, grid=grid, increments=increments)
    factors = _step_factors(model, grid)
    constant_cov = np.ptp(factors, axis=0).max() == 0.0
    for i in range(n_paths):
        xi = path_generator(seed, i).standard_normal((grid.n_steps, n))
        if constant_cov:
            increments[i] = xi @ factors[0].T
        else:
            increments[i] = np.einsum("kij,kj->ki", factors, xi)
    return NoisePathSet(seed=seed, n_paths=n_paths, grid=grid, increments=increments)


def regenerate_path(model: MarketModel, grid: TimeGrid, seed: int, path_index: int) -> np.ndarray:
    """Recreate the increments of a single path, bit-identical to sample_noise."""
    factors = _step_factors(model, grid)
    xi = path_generator(seed, path_index).standard_normal((grid.n_steps, model.n_assets))
    if np.ptp(factors, axis=0).max() == 0.0:
        return xi @ factors[0].T
    return np.einsum("kij,kj->ki", factors, xi)


@dataclass(frozen=True)
class PricePaths:
    """Simulated asset prices: risky (n_paths, n_steps+1, n_assets) and the
    deterministic risk-free account (n_steps+1,)."""

    risky: np.ndarray
    risk_free: np.ndarray


def simulate_asset_prices(model: MarketModel, grid: TimeGrid, noise: NoisePathSet) -> PricePaths:
    """Evolve prices by the log-Euler recursion.

    log P_{k+1} = log P_k + (alpha - Sigma_ii/2) dt + dM guarantees
    strictly positive prices at any step size; the risk-free account
    compounds exactly at e^{r dt}.
    """
    n_paths, n_steps, n = noise.increments.shape
    dt = grid.dt
    log_p = np.empty((n_paths, n_steps + 1, n))
    log_p[:, 0, :] = np.log(model.initial_prices)
    risk_free = np.empty(n_steps + 1)
    risk_free[0] = 1.0
    for k, t in enumerate(grid.nodes[:-1]):
        alpha = model.drift(t)
        diag = np.diag(model.cov(t))
        log_p[:, k + 1, :] = log_p[:, k, :] + (alpha - 0.5 * diag) * dt + noise.increments[:, k, :]
        risk_free[k + 1] = risk_free[k] * np.exp(model.rate(t) * dt)
    return PricePaths(risky=np.exp(log_p), risk_free=risk_free)


@dataclass(frozen=True)
class RegimeSwitchingMarket:
    """Markov-modulated coefficients: an independent chain switches r and
    alpha between a finite set of states; Sigma stays fixed so the noise
    law does not depend on the chain.

    transition is the per-step probability matrix of the chain sampled at
    the grid nodes.  A single-state instance degenerates to constant
    coefficients and is used to cross-check the regression solver against
    the deterministic one.
    """

    n_assets: int
    rates: np.ndarray          # (m,)
    drifts: np.ndarray         # (m, n)
    cov: np.ndarray            # (n, n), fixed across states
    transition: np.ndarray     # (m, m) row-stochastic
    bound_M: float = 100.0
    ellipticity_eps: float = 1e-10
    ellipticity_C: float = 1e4
    initial_prices: np.ndarray = field(default=None)

    def __post_init__(self):
        m = self.n_states
        if self.transition.shape != (m, m):
            raise MarketValidationError("transition matrix shape mismatch")
        if np.any(self.transition < 0) or not np.allclose(self.transition.sum(axis=1), 1.0):
            raise MarketValidationError("transition rows must be probability vectors")
        if np.max(np.abs(self.rates)) > self.bound_M or np.max(np.abs(self.drifts)) > self.bound_M:
            raise MarketValidationError("regime coefficients exceed bound_M")
        eigs = np.linalg.eigvalsh(self.cov)
        if eigs.min() < self.ellipticity_eps or eigs.max() > self.ellipticity_C:
            raise MarketValidationError("covariance eigenvalues outside the admissible window")
        if self.initial_prices is None:
            object.__setattr__(self, "initial_prices", np.ones(self.n_assets))

    @property
    def n_states(self) -> int:
        return len(self.rates)

    def excess_returns_for_state(self, s: int) -> np.ndarray:
        return self.drifts[s] - self.rates[s]

    def as_market_model(self) -> MarketModel:
        """Collapse to a constant-coefficient model; single-state only."""
        if self.n_states != 1:
            raise ValueError("only a single-state chain collapses to a plain model")
        return build_market(
            n_assets=self.n_assets,
            r=float(self.rates[0]),
            alpha=self.drifts[0],
            sigma=self.cov,
            initial_prices=self.initial_prices,
            bound_M=self.bound_M,
            ellipticity_eps=self.ellipticity_eps,
            ellipticity_C=self.ellipticity_C,
        )


def build_regime_market(rates, drifts, sigma, transition, **kwargs) -> RegimeSwitchingMarket:
    rates = np.atleast_1d(np.asarray(rates, dtype=float))
    drifts = np.asarray(drifts, dtype=float)
    if drifts.ndim == 1:
        drifts = drifts[:, None]
    n = drifts.shape[1]
    sigma = np.asarray(sigma, dtype=float).reshape(n, n)
    transition = np.atleast_2d(np.asarray(transition, dtype=float))
    return RegimeSwitchingMarket(
        n_assets=n, rates=rates, drifts=drifts, cov=sigma, transition=transition, **kwargs
    )


def sample_regime_paths(
    market: RegimeSwitchingMarket, grid: TimeGrid, seed: int, n_paths: int, initial_state: int = 0
) -> np.ndarray:
    """Simulate the modulating chain at the grid nodes.

    Returns an integer array of shape (n_paths, n_steps + 1).  The chain
    uses its own Philox sub-stream, independent of the market noise for
    the same seed.
    """
    m = market.n_states
    states = np.empty((n_paths, grid.n_steps + 1), dtype=np.int64)
    states[:, 0] = initial_state
    if m == 1:
        states[:] = initial_state
        return states
    cum = np.cumsum(market.transition, axis=1)
    for i in range(n_paths):
        u = path_generator(seed, i, stream=_REGIME_STREAM).random(grid.n_steps)
        s = initial_state
        for k in range(grid.n_steps):
            s = min(int(np.searchsorted(cum[s], u[k], side="right")), m - 1)
            states[i, k + 1] = s
    return states
