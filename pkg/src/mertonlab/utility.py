"""Utility functions, their first three derivatives and derived coefficients.

Built-ins: log, power x^eta/eta (eta < 1, eta != 0) and exponential
-exp(-gamma x) (gamma > 0).  Custom utilities supply analytic
derivatives; they are spot-checked for monotonicity and concavity.

The derived coefficients feed the variational machinery:

    F_k   = U^{(k)}(x) * x^k,  k = 1, 2, 3
    zeta  = -F_1 / F_2            (reciprocal of relative risk aversion)
    phi   = F_3 / F_2
    A     = 1/zeta - 1
    B     = 1 + zeta * phi / 2
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class UtilityDomainError(ValueError):
    """Wealth value outside the utility's domain (e.g. x <= 0 for log)."""


@dataclass(frozen=True)
class Utility:
    kind: str
    eta: Optional[float] = None
    gamma: Optional[float] = None
    funcs: Optional[tuple] = None  # (U, U', U'', U''') for kind == "custom"

    @classmethod
    def log(cls) -> "Utility":
        return cls(kind="log")

    @classmethod
    def power(cls, eta: float) -> "Utility":
        if not (eta < 1.0) or eta == 0.0:
            raise ValueError(f"power utility requires eta < 1 and eta != 0, got {eta}")
        return cls(kind="power", eta=float(eta))

    @classmethod
    def exponential(cls, gamma: float) -> "Utility":
        if not gamma > 0:
            raise ValueError(f"exponential utility requires gamma > 0, got {gamma}")
        return cls(kind="exponential", gamma=float(gamma))

    @classmethod
    def custom(
        cls,
        u: Callable,
        du: Callable,
        d2u: Callable,
        d3u: Callable,
        check_points=(0.5, 1.0, 2.0, 5.0),
    ) -> "Utility":
        """Custom utility from analytic derivatives.

        Monotonicity (U' > 0) and strict concavity (U'' < 0) are
        spot-checked on check_points.
        """
        for x in check_points:
            if not du(x) > 0:
                raise ValueError(f"custom utility must be increasing; U'({x}) = {du(x)}")
            if not d2u(x) < 0:
                raise ValueError(f"custom utility must be strictly concave; U''({x}) = {d2u(x)}")
        return cls(kind="custom", funcs=(u, du, d2u, d3u))

    @property
    def positive_wealth_only(self) -> bool:
        return self.kind in ("log", "power", "custom")

    def _check_domain(self, x):
        if self.positive_wealth_only and np.any(np.asarray(x) <= 0):
            bad = np.asarray(x)
            bad = bad[bad <= 0]
            raise UtilityDomainError(
                f"{self.kind} utility is defined for x > 0; got value(s) like {bad.flat[0]}"
            )

    def u(self, x):
        self._check_domain(x)
        x = np.asarray(x, dtype=float)
        if self.kind == "log":
            return np.log(x)
        if self.kind == "power":
            return x ** self.eta / self.eta
        if self.kind == "exponential":
            return -np.exp(-self.gamma * x)
        return self.funcs[0](x)

    def du(self, x):
        self._check_domain(x)
        x = np.asarray(x, dtype=float)
        if self.kind == "log":
            return 1.0 / x
        if self.kind == "power":
            return x ** (self.eta - 1.0)
        if self.kind == "exponential":
            return self.gamma * np.exp(-self.gamma * x)
        return self.funcs[1](x)

    def d2u(self, x):
        self._check_domain(x)
        x = np.asarray(x, dtype=float)
        if self.kind == "log":
            return -1.0 / x**2
        if self.kind == "power":
            return (self.eta - 1.0) * x ** (self.eta - 2.0)
        if self.kind == "exponential":
            return -self.gamma**2 * np.exp(-self.gamma * x)
        return self.funcs[2](x)

    def d3u(self, x):
        self._check_domain(x)
        x = np.asarray(x, dtype=float)
        if self.kind == "log":
            return 2.0 / x**3
        if self.kind == "power":
            return (self.eta - 1.0) * (self.eta - 2.0) * x ** (self.eta - 3.0)
        if self.kind == "exponential":
            return self.gamma**3 * np.exp(-self.gamma * x)
        return self.funcs[3](x)


def evaluate_utility(spec: Utility, x):
    """Return (U, U', U'', U''') at x, vectorized."""
    return spec.u(x), spec.du(x), spec.d2u(x), spec.d3u(x)


@dataclass(frozen=True)
class CoefficientBundle:
    """Wealth-scaled derivative coefficients at a given wealth level.

    All fields broadcast with the input wealth.  zeta > 0 on the domain;
    A and B are finite wherever zeta != 0 (for exponential utility that
    excludes x = 0, where F1 vanishes).
    """

    F1: np.ndarray
    F2: np.ndarray
    F3: np.ndarray
    zeta: np.ndarray
    phi: np.ndarray
    A: np.ndarray
    B: np.ndarray


def coefficient_bundle(spec: Utility, x) -> CoefficientBundle:
    """Evaluate F_k = U^{(k)}(x) x^k and the derived zeta, phi, A, B.

    Built-ins use the simplified closed forms (for log the F_k are the
    exact constants 1, -1, 2), which keeps identities like F1 + F2 = 0
    exact in floating point where they hold exactly in the algebra.
    """
    xa = np.asarray(x, dtype=float)
    spec._check_domain(xa)
    if spec.kind == "log":
        one = np.ones_like(xa)
        f1, f2, f3 = one, -one, 2.0 * one
    elif spec.kind == "power":
        base = xa**spec.eta
        f1 = base
        f2 = (spec.eta - 1.0) * base
        f3 = (spec.eta - 1.0) * (spec.eta - 2.0) * base
    elif spec.kind == "exponential":
        scaled = spec.gamma * xa
        decay = np.exp(-scaled)
        f1 = scaled * decay
        f2 = -(scaled**2) * decay
        f3 = scaled**3 * decay
    else:
        f1 = spec.du(xa) * xa
        f2 = spec.d2u(xa) * xa**2
        f3 = spec.d3u(xa) * xa**3
    if np.any(f2 == 0):
        raise ValueError("F2 vanished: utility is not strictly concave at the given wealth")
    zeta = -f1 / f2
    phi = f3 / f2
    with np.errstate(divide="ignore"):
        a = 1.0 / zeta - 1.0
    b = 1.0 + 0.5 * zeta * phi
    return CoefficientBundle(F1=f1, F2=f2, F3=f3, zeta=zeta, phi=phi, A=a, B=b)


def relative_risk_aversion(spec: Utility, x):
    """Arrow-Pratt relative risk aversion -x U''(x)/U'(x) (equals 1/zeta)."""
    xa = np.asarray(x, dtype=float)
    return -xa * spec.d2u(xa) / spec.du(xa)
