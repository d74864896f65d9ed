import numpy as np
import pytest

import mertonlab as ml
from mertonlab.market import MarketValidationError

from conftest import DESK_SEED, noise_subset, zero_noise


def test_desk_market_excess_return(desk_model):
    assert desk_model.excess_returns(0.0) == pytest.approx([0.06], abs=0)
    assert desk_model.rate(0.5) == 0.02
    assert desk_model.is_constant(ml.TimeGrid(1.0, 10))


def test_identity_covariance_any_n():
    model = ml.build_market(3, 0.01, [0.05, 0.06, 0.07], np.eye(3))
    assert np.allclose(np.linalg.eigvalsh(model.cov(0.3)), 1.0)


def test_indefinite_covariance_rejected():
    # 2x2 symmetric [[a, b], [b, a]] has eigenvalues a - b and a + b;
    # here 0.04 - 0.05 = -0.01 < 0.
    a, b = 0.04, 0.05
    assert min(a - b, a + b) == pytest.approx(-0.01)
    with pytest.raises(MarketValidationError, match="eigenvalue"):
        ml.build_market(2, 0.02, [0.08, 0.08], [[a, b], [b, a]])


def test_asymmetric_covariance_rejected():
    with pytest.raises(MarketValidationError, match="symmetric"):
        ml.build_market(2, 0.02, [0.08, 0.08], [[0.04, 0.01], [0.02, 0.04]])


def test_unbounded_coefficients_rejected():
    with pytest.raises(MarketValidationError, match="exceeds bound"):
        ml.build_market(1, 0.02, 5.0, 0.04, bound_M=1.0)
    with pytest.raises(MarketValidationError, match="non-finite"):
        ml.build_market(1, lambda t: np.nan, 0.08, 0.04)


def test_eigenvalue_cap_rejected():
    with pytest.raises(MarketValidationError, match="above cap"):
        ml.build_market(1, 0.02, 0.08, 50.0, ellipticity_C=10.0)


def test_time_varying_coefficients_validated_densely():
    # dips below the floor only away from the node times t=0 and t=T
    spiky = lambda t: 0.04 if abs(t - 0.5) > 0.01 else -0.01
    with pytest.raises(MarketValidationError):
        ml.build_market(1, 0.02, 0.08, spiky)


def test_empty_noise_set(desk_model, desk_grid):
    noise = ml.sample_noise(desk_model, desk_grid, 1, 0)
    assert noise.increments.shape == (0, desk_grid.n_steps, 1)


def test_increment_sample_variance_one_million_draws():
    # 1e6 iid increments with variance Sigma*dt = 4e-4; the sample
    # variance of normal data has standard error sigma^2 sqrt(2/(n-1)).
    model = ml.build_market(1, 0.0, 0.0, 0.04)
    grid = ml.TimeGrid(10.0, 1000)  # dt = 0.01
    noise = ml.sample_noise(model, grid, 31, 1000)
    draws = noise.increments.ravel()
    assert draws.size == 1_000_000
    target = 0.04 * grid.dt
    se = target * np.sqrt(2.0 / (draws.size - 1))
    assert abs(draws.var(ddof=1) - target) < 3 * se
    assert abs(draws.mean()) < 3 * np.sqrt(target / draws.size)


def test_regeneration_bit_identical(desk_model, desk_grid):
    noise = ml.sample_noise(desk_model, desk_grid, 99, 12)
    again = ml.sample_noise(desk_model, desk_grid, 99, 12)
    assert np.array_equal(noise.increments, again.increments)
    single = ml.regenerate_path(desk_model, desk_grid, 99, 7)
    assert np.array_equal(single, noise.increments[7])


def test_path_prefix_property(desk_model, desk_grid):
    # sampling fewer paths reproduces the leading paths exactly
    big = ml.sample_noise(desk_model, desk_grid, 5, 20)
    small = ml.sample_noise(desk_model, desk_grid, 5, 6)
    assert np.array_equal(big.increments[:6], small.increments)


def test_covariance_match_and_rate():
    sigma = np.array([[0.04, 0.012], [0.012, 0.09]])
    model = ml.build_market(2, 0.01, [0.05, 0.07], sigma)
    grid = ml.TimeGrid(1.0, 10)

    def cov_error(n_paths, seed):
        noise = ml.sample_noise(model, grid, seed, n_paths)
        flat = noise.increments.reshape(-1, 2)
        return np.max(np.abs(np.cov(flat.T) - sigma * grid.dt))

    err_small = cov_error(2_000, 17)
    err_big = cov_error(32_000, 17)
    assert err_big < err_small  # n^{-1/2} shrinkage at 16x the paths
    assert err_big < 0.1 * np.max(sigma) * grid.dt


def test_zero_noise_price_recursion(desk_model, desk_grid):
    prices = ml.simulate_asset_prices(desk_model, desk_grid, zero_noise(desk_grid, 3))
    # log-Euler drift alpha - Sigma/2 = 0.08 - 0.02 = 0.06 over T = 1
    assert prices.risky[:, -1, 0] == pytest.approx(np.exp(0.06), rel=1e-12)


def test_risk_free_leg_deterministic(desk_model, desk_grid):
    prices = ml.simulate_asset_prices(desk_model, desk_grid, zero_noise(desk_grid))
    assert prices.risk_free[-1] == pytest.approx(np.exp(0.02), rel=1e-12)
    assert prices.risk_free[0] == 1.0


def test_price_positivity_and_martingale_mean(desk_model, desk_grid, desk_noise_100k):
    noise = noise_subset(desk_noise_100k, 100_000)
    prices = ml.simulate_asset_prices(desk_model, desk_grid, noise)
    assert prices.risky.min() > 0
    # E[P_T] = p * e^{alpha T} by the exponential-martingale identity
    terminal = prices.risky[:, -1, 0]
    se = terminal.std(ddof=1) / np.sqrt(len(terminal))
    assert abs(terminal.mean() - np.exp(0.08)) < 3 * se


def test_regime_market_validation_and_sampling():
    rm = ml.build_regime_market(
        rates=[0.01, 0.04], drifts=[[0.06], [0.10]], sigma=[[0.04]],
        transition=[[0.9, 0.1], [0.2, 0.8]],
    )
    grid = ml.TimeGrid(1.0, 50)
    states = ml.sample_regime_paths(rm, grid, seed=3, n_paths=40)
    assert states.shape == (40, 51)
    assert set(np.unique(states)) <= {0, 1}
    assert np.array_equal(states, ml.sample_regime_paths(rm, grid, seed=3, n_paths=40))
    # chain draws are independent of the market-noise stream for equal seeds
    noise = ml.sample_noise(rm.as_market_model() if rm.n_states == 1 else
                            ml.build_market(1, 0.01, 0.06, 0.04), grid, 3, 5)
    assert noise.increments.shape == (5, 50, 1)

    with pytest.raises(MarketValidationError, match="probability"):
        ml.build_regime_market(rates=[0.01, 0.02], drifts=[[0.05], [0.06]],
                               sigma=[[0.04]], transition=[[0.5, 0.4], [0.2, 0.8]])


def test_single_state_regime_collapses():
    rm = ml.build_regime_market(rates=[0.02], drifts=[[0.08]], sigma=[[0.04]],
                                transition=[[1.0]])
    model = rm.as_market_model()
    assert model.rate(0.1) == 0.02
    states = ml.sample_regime_paths(rm, ml.TimeGrid(1.0, 5), seed=1, n_paths=3)
    assert np.all(states == 0)


def test_time_grid_contract():
    grid = ml.TimeGrid(2.0, 8)
    assert grid.dt == 0.25
    assert grid.nodes[0] == 0.0 and grid.nodes[-1] == 2.0
    assert np.all(np.diff(grid.nodes) > 0)
    with pytest.raises(ValueError):
        ml.TimeGrid(-1.0, 10)
    with pytest.raises(ValueError):
        ml.TimeGrid(1.0, 0)
