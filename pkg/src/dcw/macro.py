"""Noiseless macroscopic dynamics in (m, lambda) and Lienard (y, lambda) coordinates.

    dm/dt      = -2 (m + tanh lambda)
    dlambda/dt = 2 beta (m + tanh lambda) - alpha lambda

With y = 2 (lambda + beta m) this becomes dy/dt = -2 alpha lambda,
dlambda/dt = y - g(lambda).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .model import DomainError, ModelParams, NumericalError, lienard_g
from .records import write_csv

DEFAULT_RTOL = 1e-9
DEFAULT_ATOL = 1e-12
# |m| may exceed 1 by this much before the run is declared broken.
M_SLACK = 1e-6


@dataclass(frozen=True)
class MacroState:
    m: float
    lam: float

    def as_array(self):
        return np.array([self.m, self.lam])


@dataclass(frozen=True)
class LienardState:
    y: float
    lam: float

    def as_array(self):
        return np.array([self.y, self.lam])


def vector_field_dyn0(state, params: ModelParams):
    """Right-hand side in (m, lambda); ``state`` is a MacroState or an array [m, lambda]."""
    m, lam = (state.m, state.lam) if isinstance(state, MacroState) else state
    drive = m + np.tanh(lam)
    return np.array([-2.0 * drive, 2.0 * params.beta * drive - params.alpha * lam])


def vector_field_lienard(state, params: ModelParams):
    y, lam = (state.y, state.lam) if isinstance(state, LienardState) else state
    return np.array([-2.0 * params.alpha * lam, y - lienard_g(lam, params)])


def to_lienard(state: MacroState, params: ModelParams) -> LienardState:
    return LienardState(2.0 * (state.lam + params.beta * state.m), state.lam)


def from_lienard(state: LienardState, params: ModelParams) -> MacroState:
    if params.beta == 0:
        raise DomainError("the Lienard change of variables cannot be inverted when beta = 0")
    return MacroState((state.y / 2.0 - state.lam) / params.beta, state.lam)


def lienard_to_m(y, lam, params: ModelParams):
    return (np.asarray(y) / 2.0 - np.asarray(lam)) / params.beta


def lyapunov_W(state: LienardState, params: ModelParams) -> float:
    if params.alpha <= 0:
        raise DomainError("W is defined for alpha > 0 only")
    return state.lam**2 / 2.0 + state.y**2 / (4.0 * params.alpha)


def lyapunov_W_dot(state: LienardState, params: ModelParams) -> float:
    if params.alpha <= 0:
        raise DomainError("W is defined for alpha > 0 only")
    return -state.lam * lienard_g(state.lam, params)


@dataclass
class Trajectory:
    """Integrator output: samples, a dense interpolant and solver statistics."""

    t: np.ndarray
    states: np.ndarray  # shape (2, n): rows are (m, lambda) or (y, lambda)
    coords: str
    params: ModelParams
    sol: object = field(repr=False, default=None)
    stats: dict = field(default_factory=dict)

    def __call__(self, t):
        return self.sol(t)

    def macro(self, t=None):
        """(m, lambda) arrays at the sample times or at ``t`` via dense output."""
        x = self.states if t is None else self.sol(t)
        if self.coords == "macro":
            return x[0], x[1]
        return lienard_to_m(x[0], x[1], self.params), x[1]

    def lienard(self, t=None):
        x = self.states if t is None else self.sol(t)
        if self.coords == "lienard":
            return x[0], x[1]
        return 2.0 * (x[1] + self.params.beta * x[0]), x[1]

    def to_csv(self, path, t=None):
        ts = self.t if t is None else np.asarray(t)
        x = self.states if t is None else self.sol(ts)
        names = ("t", "m", "lambda") if self.coords == "macro" else ("t", "y", "lambda")
        return write_csv(path, names, zip(ts, x[0], x[1]))


def integrate(state0, params: ModelParams, horizon: float, *, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
              coords: str = "macro", t_eval=None, events=None, max_step=np.inf,
              check_m: bool = True) -> Trajectory:
    """Integrate the macroscopic flow with an embedded 8(5,3) Runge-Kutta pair (dense output).

    ``state0`` is a MacroState/LienardState or an array in the chosen ``coords``
    ("macro" or "lienard").
    """
    if not horizon > 0:
        raise DomainError(f"horizon must be positive, got {horizon}")
    if not (rtol > 0 and atol > 0):
        raise DomainError("tolerances must be positive")
    if coords == "macro":
        if isinstance(state0, LienardState):
            state0 = from_lienard(state0, params)
        x0 = state0.as_array() if isinstance(state0, MacroState) else np.asarray(state0, float)
        alpha, beta = params.alpha, params.beta

        def rhs(t, x):
            d = x[0] + np.tanh(x[1])
            return [-2.0 * d, 2.0 * beta * d - alpha * x[1]]
    elif coords == "lienard":
        if isinstance(state0, MacroState):
            state0 = to_lienard(state0, params)
        x0 = state0.as_array() if isinstance(state0, LienardState) else np.asarray(state0, float)
        a2, g1, b2 = 2.0 * params.alpha, 2.0 + params.alpha, 2.0 * params.beta

        def rhs(t, x):
            return [-a2 * x[1], x[0] - g1 * x[1] + b2 * np.tanh(x[1])]
    else:
        raise DomainError(f"unknown coordinate system {coords!r}")
    if not np.all(np.isfinite(x0)):
        raise DomainError("initial state must be finite")

    sol = solve_ivp(rhs, (0.0, horizon), x0, method="DOP853", rtol=rtol, atol=atol,
                    dense_output=True, t_eval=t_eval, events=events, max_step=max_step)
    if sol.status == -1:
        raise NumericalError(f"integration failed at t={sol.t[-1]:.6g}: {sol.message}")
    traj = Trajectory(sol.t, sol.y, coords, params, sol.sol,
                      {"steps": len(sol.sol.ts) - 1, "nfev": sol.nfev, "status": sol.status,
                       "t_events": sol.t_events, "y_events": sol.y_events})
    has_m = coords == "macro" or params.beta > 0
    # Only trajectories that start in the physical strip |m| <= 1 are monitored.
    if check_m and has_m and abs(traj.macro(np.array([0.0]))[0][0]) <= 1.0:
        ts = np.linspace(sol.t[0], sol.t[-1], 20 * len(sol.sol.ts) + 1)
        m, _ = traj.macro(ts)
        worst = float(np.max(np.abs(m)))
        if worst > 1.0 + M_SLACK:
            raise NumericalError(f"|m| reached {worst:.9g} > 1: the integration left the physical region")
        traj.stats["max_abs_m"] = worst
    return traj
