"""Experiment configuration: sectioned key=value files, strictly parsed.

Physics-bearing parameters (market, utility) have no defaults; numerical
knobs default and every applied default is echoed in the run header.
Parsing accumulates all problems instead of stopping at the first one.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .market import MarketModel, MarketValidationError, TimeGrid, build_market
from .utility import Utility

DEFAULT_DT = 1.0 / 250.0
DEFAULT_STOP_THRESHOLD = 1e6
DEFAULT_EPS_LADDER = (0.1, 0.05, 0.025, 0.0125)

TASKS = ("simulate", "solve", "verify", "search")


class ConfigError(ValueError):
    """Carries every problem found in a config file."""

    def __init__(self, errors: List[str]):
        super().__init__("; ".join(errors))
        self.errors = list(errors)


@dataclass
class ExperimentConfig:
    n_assets: int
    rate: float
    alpha: np.ndarray
    sigma: np.ndarray
    x0: float
    horizon_T: float
    n_steps: int
    bound_M: float
    ellipticity_eps: float
    ellipticity_C: float
    utility: Utility
    n_paths: int
    seed: int
    workers: int
    task: str
    task_params: Dict[str, object]
    defaults_applied: List[str] = field(default_factory=list)
    model: Optional[MarketModel] = None

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.horizon_T, self.n_steps)


_SCHEMA = {
    "market": {"n_assets", "r", "alpha", "sigma", "x0", "T", "n_steps", "bound_M", "eps", "C"},
    "utility": {"kind", "eta", "gamma"},
    "simulation": {"n_paths", "seed", "dt", "workers"},
    "task": {
        "name", "K", "policy", "control", "grid_lo", "grid_hi", "grid_step",
        "eps_ladder", "picard_tol", "picard_iters", "basis_degree", "pairs",
    },
}


def _get(parser, section, key, cast, errors, required=True, default=None, constraint=None):
    if not parser.has_option(section, key):
        if required:
            errors.append(f"[{section}] missing required key '{key}'")
        return default
    raw = parser.get(section, key)
    try:
        value = cast(raw)
    except (TypeError, ValueError):
        errors.append(f"[{section}] {key} = '{raw}' is not a valid {cast.__name__}")
        return default
    if constraint is not None:
        problem = constraint(value)
        if problem:
            errors.append(f"[{section}] {key}: {problem}")
            return default
    return value


def _float_list(raw: str) -> np.ndarray:
    return np.array([float(tok) for tok in raw.replace(",", " ").split()])


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a config file; raises ConfigError listing every
    missing key, type mismatch, unknown key and constraint violation."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (T, K, C, bound_M)
    errors: List[str] = []
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"unparseable config: {exc}"]) from exc

    for section in parser.sections():
        if section not in _SCHEMA:
            errors.append(f"unknown section [{section}]")
            continue
        for key in parser.options(section):
            if key not in _SCHEMA[section]:
                errors.append(f"[{section}] unknown key '{key}'")
    for section in ("market", "utility", "simulation", "task"):
        if not parser.has_section(section):
            errors.append(f"missing section [{section}]")
    if errors and not all(parser.has_section(s) for s in _SCHEMA):
        raise ConfigError(errors)

    defaults: List[str] = []

    n_assets = _get(parser, "market", "n_assets", int, errors,
                    constraint=lambda v: None if v >= 1 else f"must be >= 1, got {v}")
    rate = _get(parser, "market", "r", float, errors)
    alpha = _get(parser, "market", "alpha", _float_list, errors)
    sigma_flat = _get(parser, "market", "sigma", _float_list, errors)
    x0 = _get(parser, "market", "x0", float, errors)
    horizon = _get(parser, "market", "T", float, errors,
                   constraint=lambda v: None if v > 0 else f"must be > 0, got {v}")
    bound_m = _get(parser, "market", "bound_M", float, errors, required=False)
    if bound_m is None:
        bound_m = 100.0
        defaults.append("market.bound_M = 100.0")
    eps_floor = _get(parser, "market", "eps", float, errors, required=False)
    if eps_floor is None:
        eps_floor = 1e-10
        defaults.append("market.eps = 1e-10")
    eig_cap = _get(parser, "market", "C", float, errors, required=False)
    if eig_cap is None:
        eig_cap = 1e4
        defaults.append("market.C = 1e4")

    kind = _get(parser, "utility", "kind", str, errors,
                constraint=lambda v: None if v in ("log", "power", "exponential")
                else f"unknown utility kind '{v}'")
    eta = _get(parser, "utility", "eta", float, errors, required=(kind == "power"))
    gamma = _get(parser, "utility", "gamma", float, errors, required=(kind == "exponential"))
    utility = None
    if kind == "power" and eta is not None:
        if not eta < 1.0:
            errors.append("[utility] power utility requires eta < 1")
        elif eta == 0.0:
            errors.append("[utility] power utility requires eta != 0 (use kind = log)")
        else:
            utility = Utility.power(eta)
    elif kind == "exponential" and gamma is not None:
        if gamma > 0:
            utility = Utility.exponential(gamma)
        else:
            errors.append("[utility] exponential utility requires gamma > 0")
    elif kind == "log":
        utility = Utility.log()
    if kind == "log" and (eta is not None or gamma is not None):
        errors.append("[utility] log utility takes neither eta nor gamma")

    n_paths = _get(parser, "simulation", "n_paths", int, errors,
                   constraint=lambda v: None if v >= 1 else f"must be >= 1, got {v}")
    seed = _get(parser, "simulation", "seed", int, errors)
    workers = _get(parser, "simulation", "workers", int, errors, required=False)
    if workers is None:
        workers = 1
        defaults.append("simulation.workers = 1")
    dt = _get(parser, "simulation", "dt", float, errors, required=False,
              constraint=lambda v: None if v > 0 else f"must be > 0, got {v}")
    n_steps = _get(parser, "market", "n_steps", int, errors, required=False,
                   constraint=lambda v: None if v >= 1 else f"must be >= 1, got {v}")
    if horizon is not None:
        if n_steps is None and dt is None:
            n_steps = int(round(horizon / DEFAULT_DT))
            defaults.append(f"dt = 1/250 (n_steps = {n_steps})")
        elif n_steps is None:
            n_steps = int(round(horizon / dt))
        elif dt is not None and abs(horizon / n_steps - dt) > 1e-9 * max(dt, 1.0):
            errors.append(
                f"[simulation] dt = {dt} conflicts with market.n_steps = {n_steps} over T = {horizon}"
            )

    task = _get(parser, "task", "name", str, errors,
                constraint=lambda v: None if v in TASKS else f"unknown task '{v}'")
    params: Dict[str, object] = {}
    if task == "simulate":
        params["policy"] = _get(parser, "task", "policy", _float_list, errors)
        params["control"] = _get(parser, "task", "control", str, errors, required=False,
                                 default="weights",
                                 constraint=lambda v: None if v in ("weights", "dollars")
                                 else f"unknown control '{v}'")
        threshold = _get(parser, "task", "K", float, errors, required=False,
                         constraint=lambda v: None if v > 0 else f"must be > 0, got {v}")
        if threshold is None:
            threshold = DEFAULT_STOP_THRESHOLD
            defaults.append("task.K = 1e6")
        params["K"] = threshold
    elif task == "search":
        params["grid_lo"] = _get(parser, "task", "grid_lo", _float_list, errors)
        params["grid_hi"] = _get(parser, "task", "grid_hi", _float_list, errors)
        params["grid_step"] = _get(parser, "task", "grid_step", float, errors)
        control = _get(parser, "task", "control", str, errors, required=False,
                       default=None,
                       constraint=lambda v: None if v in ("weights", "dollars")
                       else f"unknown control '{v}'")
        if control is None:
            control = "dollars" if kind == "exponential" else "weights"
            defaults.append(f"task.control = {control}")
        params["control"] = control
        if control == "dollars" and kind in ("log", "power"):
            errors.append("[task] dollar-grid search requires exponential utility")
        if control == "weights" and kind == "exponential":
            errors.append("[task] exponential utility searches over dollar amounts")
    elif task == "verify":
        ladder = _get(parser, "task", "eps_ladder", _float_list, errors, required=False)
        if ladder is None:
            ladder = np.array(DEFAULT_EPS_LADDER)
            defaults.append("task.eps_ladder = 0.1,0.05,0.025,0.0125")
        params["eps_ladder"] = tuple(float(e) for e in ladder)
        pairs = _get(parser, "task", "pairs", int, errors, required=False,
                     constraint=lambda v: None if v >= 1 else f"must be >= 1, got {v}")
        if pairs is None:
            pairs = 3
            defaults.append("task.pairs = 3")
        params["pairs"] = pairs
    elif task == "solve":
        tol = _get(parser, "task", "picard_tol", float, errors, required=False)
        if tol is None:
            tol = 1e-3
            defaults.append("task.picard_tol = 1e-3")
        iters = _get(parser, "task", "picard_iters", int, errors, required=False)
        if iters is None:
            iters = 10
            defaults.append("task.picard_iters = 10")
        degree = _get(parser, "task", "basis_degree", int, errors, required=False)
        if degree is None:
            degree = 3
            defaults.append("task.basis_degree = 3")
        params.update(picard_tol=tol, picard_iters=iters, basis_degree=degree)

    model = None
    if not errors:
        sigma = sigma_flat
        if sigma_flat.size == n_assets * n_assets:
            sigma = sigma_flat.reshape(n_assets, n_assets)
        elif sigma_flat.size == 1 and n_assets == 1:
            sigma = sigma_flat.reshape(1, 1)
        else:
            errors.append(
                f"[market] sigma needs {n_assets * n_assets} row-major entries, got {sigma_flat.size}"
            )
        if alpha.size != n_assets:
            errors.append(f"[market] alpha needs {n_assets} entries, got {alpha.size}")
        if not errors:
            try:
                model = build_market(
                    n_assets=n_assets, r=rate, alpha=alpha, sigma=sigma,
                    bound_M=bound_m, ellipticity_eps=eps_floor, ellipticity_C=eig_cap,
                    horizon_T=horizon,
                )
            except MarketValidationError as exc:
                errors.append(f"[market] {exc}")
        if utility is not None and utility.positive_wealth_only and x0 is not None and x0 <= 0:
            errors.append(f"[market] x0 must be > 0 for {kind} utility, got {x0}")

    if errors:
        raise ConfigError(errors)

    return ExperimentConfig(
        n_assets=n_assets, rate=rate, alpha=alpha, sigma=sigma, x0=x0,
        horizon_T=horizon, n_steps=n_steps, bound_M=bound_m,
        ellipticity_eps=eps_floor, ellipticity_C=eig_cap, utility=utility,
        n_paths=n_paths, seed=seed, workers=workers, task=task,
        task_params=params, defaults_applied=defaults, model=model,
    )
