"""Model parameters and the closed-form pieces shared by every engine.

The dissipative Curie-Weiss model: N spins s_i in {-1, +1}, each flipping at
rate 1 + tanh(s_i * lambda_i), where the intensities lambda_i relax to zero at
rate alpha, diffuse with strength sigma, and all receive the same kick
2*beta*s_j/N whenever spin j flips.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

import numpy as np


class DomainError(ValueError):
    """An argument lies outside the domain of the operation."""


class NumericalError(RuntimeError):
    """A numerical procedure failed (blow-up, lost mass, step underflow...)."""


class NoConvergenceError(RuntimeError):
    """An iterative search ended without meeting its stopping criterion."""


@dataclass(frozen=True)
class ModelParams:
    alpha: float
    beta: float
    sigma: float
    n_particles: int = 1

    def __post_init__(self):
        for name in ("alpha", "beta", "sigma"):
            value = float(getattr(self, name))
            object.__setattr__(self, name, value)
            if not math.isfinite(value):
                raise DomainError(f"{name} must be finite, got {value!r}")
            if value < 0:
                raise DomainError(f"{name} must be non-negative, got {value!r}")
        if int(self.n_particles) != self.n_particles or self.n_particles < 1:
            raise DomainError(f"n_particles must be an integer >= 1, got {self.n_particles!r}")

    @property
    def critical_beta(self) -> float:
        return self.alpha / 2 + 1

    @property
    def supercritical(self) -> bool:
        return classify_origin(self) is Stability.UNSTABLE


class Stability(str, Enum):
    STABLE = "Stable"
    CRITICAL = "Critical"
    UNSTABLE = "Unstable"


def _check_spin(s):
    if s not in (-1, 1):
        raise DomainError(f"spin must be -1 or +1, got {s!r}")


def flip_rate(s: int, lam: float) -> float:
    """Rate 1 + tanh(s*lam) at which a spin with value ``s`` flips."""
    _check_spin(s)
    if not math.isfinite(lam):
        raise DomainError(f"intensity must be finite, got {lam!r}")
    return 1.0 + math.tanh(s * lam)


def interaction_potential(m: float, params: ModelParams) -> float:
    if not -1.0 <= m <= 1.0:
        raise DomainError(f"magnetization must lie in [-1, 1], got {m!r}")
    return -params.beta * m


def lienard_g(lam, params: ModelParams):
    """g(lam) = (2 + alpha) lam - 2 beta tanh(lam); accepts scalars or arrays."""
    if not np.all(np.isfinite(lam)):
        raise DomainError("intensity must be finite")
    return (2.0 + params.alpha) * lam - 2.0 * params.beta * np.tanh(lam)


def lienard_g_positive_zero(params: ModelParams, *, xtol: float = 1e-14) -> float | None:
    """Smallest positive zero of g, or None when g has only the zero at the origin."""
    if not params.supercritical:
        return None
    # g < 0 just right of 0 and g > 0 once tanh saturates, so (0, hi] brackets the zero.
    hi = 2.0 * params.beta / (2.0 + params.alpha) + 1.0
    lo = 0.0
    while lienard_g(hi, params) <= 0:
        hi *= 2
    while hi - lo > xtol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if lienard_g(mid, params) > 0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def linearization_eigenvalues(params: ModelParams) -> tuple[complex, complex]:
    """Eigenvalues x+ and x- of the linearized macroscopic flow at the origin.

    beta - 1 - alpha/2 and the discriminant are formed exactly and rounded
    once, so the sign of the real part always agrees with :func:`classify_origin`.
    """
    alpha = Fraction(repr(float(params.alpha)))
    a_exact = Fraction(repr(float(params.beta))) - 1 - alpha / 2
    a = float(a_exact)
    disc = float(a_exact * a_exact - 2 * alpha)
    if disc < 0:
        root = cmath.sqrt(disc)
        return complex(a + root), complex(a - root)
    # Real roots: take the larger-magnitude one directly and the other from x+ x- = 2 alpha.
    root = math.sqrt(disc)
    if a < 0:
        x_minus = a - root
        return complex(float(2 * alpha) / x_minus), complex(x_minus)
    x_plus = a + root
    return complex(x_plus), complex(float(2 * alpha) / x_plus if x_plus else 0.0)


def classify_origin(params: ModelParams, tol: float = 0.0) -> Stability:
    """Compare beta with alpha/2 + 1.

    With ``tol == 0`` the comparison is exact on the decimal values of the inputs
    (2.5 is critical for alpha = 3, no matter how the float was produced from
    its repr).  A positive ``tol`` classifies |beta - alpha/2 - 1| <= tol as
    critical.
    """
    if tol > 0:
        gap = params.beta - params.alpha / 2 - 1
        if abs(gap) <= tol:
            return Stability.CRITICAL
    else:
        gap = Fraction(repr(float(params.beta))) - Fraction(repr(float(params.alpha))) / 2 - 1
        if gap == 0:
            return Stability.CRITICAL
    return Stability.UNSTABLE if gap > 0 else Stability.STABLE
