"""Monte Carlo laboratory for utility-maximizing portfolio choice.

Simulates multi-asset wealth dynamics under proportional and dollar
controls, estimates the directional derivative of the expected-utility
criterion two independent ways, solves the characterizing backward
equations, and cross-validates the resulting optimal portfolios against
closed forms and brute-force policy search.
"""

from .market import (
    MarketModel,
    MarketValidationError,
    NoisePathSet,
    PricePaths,
    RegimeSwitchingMarket,
    TimeGrid,
    build_market,
    build_regime_market,
    regenerate_path,
    sample_noise,
    sample_regime_paths,
    simulate_asset_prices,
)
from .wealth import (
    DollarPolicy,
    PolicyEvaluationError,
    PortfolioPolicy,
    StoppedPolicy,
    WealthPath,
    detect_stop,
    discount_factor,
    simulate_wealth_dollars,
    simulate_wealth_weights,
)
from .utility import (
    CoefficientBundle,
    Utility,
    UtilityDomainError,
    coefficient_bundle,
    evaluate_utility,
    relative_risk_aversion,
)
from .bsde import (
    BsdeSolution,
    OptimalPolicyResult,
    PicardConvergenceError,
    optimal_policy,
    solve_bsde_deterministic,
    solve_bsde_regression,
    solve_fbsde_exponential,
    stationarity_residual,
)
from .variational import (
    ExpansionCheckResult,
    GateauxEstimate,
    MartingaleCheckResult,
    PerturbationProcesses,
    expansion_order_check,
    gateaux_fd,
    gateaux_formula,
    mhat_martingale_check,
    performance_criterion,
    perturb_policy,
    perturbation_processes,
    terminal_utilities,
)
from .oracle import (
    AscentDivergenceError,
    AscentResult,
    GridSearchResult,
    SearchSpec,
    closed_form_policy,
    gradient_ascent,
    grid_search,
)
from .config import ConfigError, ExperimentConfig, parse_config
from .cli import RunResult, run

__version__ = "0.1.0"
