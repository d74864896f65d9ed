import numpy as np
import pytest

import mertonlab as ml

DESK_SEED = 42


@pytest.fixture(scope="session")
def desk_model():
    """n=1, r=0.02, alpha=0.08, Sigma=0.04: theta=0.06, log-optimal weight 1.5."""
    return ml.build_market(1, 0.02, 0.08, 0.04)


@pytest.fixture(scope="session")
def zero_rate_model():
    """Same risk profile with r=0, for the exponential closed-form regime."""
    return ml.build_market(1, 0.0, 0.06, 0.04)


@pytest.fixture(scope="session")
def desk_grid():
    return ml.TimeGrid(1.0, 250)


@pytest.fixture(scope="session")
def desk_noise_100k(desk_model, desk_grid):
    return ml.sample_noise(desk_model, desk_grid, DESK_SEED, 100_000)


def noise_subset(noise: ml.NoisePathSet, n_paths: int) -> ml.NoisePathSet:
    """First n paths of a set; identical to sampling n paths directly
    because every path owns its own (seed, index) stream."""
    return ml.NoisePathSet(
        seed=noise.seed, n_paths=n_paths, grid=noise.grid,
        increments=noise.increments[:n_paths],
    )


@pytest.fixture(scope="session")
def desk_noise_20k(desk_noise_100k):
    return noise_subset(desk_noise_100k, 20_000)


@pytest.fixture(scope="session")
def desk_noise_2k(desk_noise_100k):
    return noise_subset(desk_noise_100k, 2_000)


def zero_noise(grid: ml.TimeGrid, n_paths: int = 1, n_assets: int = 1) -> ml.NoisePathSet:
    """Noise-free path set for deterministic recursions."""
    return ml.NoisePathSet(
        seed=0, n_paths=n_paths, grid=grid,
        increments=np.zeros((n_paths, grid.n_steps, n_assets)),
    )
