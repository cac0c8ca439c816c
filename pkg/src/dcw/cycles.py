"""Limit cycle of the noiseless flow via half-return maps on the y-axis.

All section crossings live in Lienard coordinates, where lambda = 0 is a
transversal section away from the origin.  By odd symmetry of the vector
field, an orbit through (y0, 0) is periodic iff its first crossing back to
lambda = 0 lands at (-y0, 0), i.e. iff the energy change
dW(y0) = (y1^2 - y0^2) / (4 alpha) vanishes.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np
from scipy.optimize import brentq
from scipy.spatial import cKDTree

from .macro import LienardState, integrate, lienard_to_m, lyapunov_W
from .model import (DomainError, ModelParams, NoConvergenceError, NumericalError, Stability,
                    classify_origin, linearization_eigenvalues)
from .records import write_csv

CYCLE_RTOL = 1e-12
CYCLE_ATOL = 1e-14
SECTION_TOL = 1e-10
Y_START = 0.01
Y_CAP = 1e3
SCAN_HEADER = ("beta", "classification", "re_eig", "im_eig", "has_cycle", "y0_p", "period", "amplitude_m")


class NoReturnError(NoConvergenceError):
    """The orbit did not come back to the section within the time budget."""


@dataclass(frozen=True)
class HalfReturn:
    y0: float
    y1: float
    transit_time: float


@dataclass
class LimitCycle:
    params: ModelParams
    y0_p: float
    period: float
    orbit: np.ndarray  # rows (t, y, lambda) over one period
    amplitude_m: float
    delta_w: float
    closure_error: float
    full_return_period: float
    has_cycle: bool = True

    @property
    def points(self) -> np.ndarray:
        """Orbit samples as an (n, 2) array of (y, lambda)."""
        return self.orbit[:, 1:3]


@dataclass
class NoCycle:
    params: ModelParams
    reason: str
    probes: list = field(default_factory=list)  # (y0, dW) pairs evaluated
    has_cycle: bool = False


def _lienard_event(direction):
    def crossing(t, x):
        return x[1]
    crossing.terminal = True
    crossing.direction = direction
    return crossing


def half_return(y0: float, params: ModelParams, *, rtol=CYCLE_RTOL, atol=CYCLE_ATOL,
                max_time: float = 200.0) -> HalfReturn:
    """Follow the orbit from (y0, lambda=0) to its next crossing of lambda = 0 with y < 0."""
    if not y0 > 0:
        raise DomainError(f"y0 must be positive, got {y0}")
    traj = integrate(LienardState(y0, 0.0), params, max_time, rtol=rtol, atol=atol,
                     coords="lienard", events=[_lienard_event(-1)], check_m=False)
    t_ev = traj.stats["t_events"][0]
    if len(t_ev) == 0:
        raise NoReturnError(f"no return to lambda = 0 within t <= {max_time} from y0 = {y0}")
    t1 = float(t_ev[0])
    y1, lam1 = traj.stats["y_events"][0][0]
    if abs(lam1) >= SECTION_TOL:
        # Polish on the dense interpolant; the event locator normally lands closer already.
        lo = max(0.0, t1 - 1e-3 * max(t1, 1e-6))
        f = lambda t: traj(t)[1]
        if f(lo) * lam1 < 0:
            t1 = brentq(f, lo, t1, xtol=1e-15)
            y1, lam1 = traj(t1)
    if abs(lam1) >= SECTION_TOL:
        raise NumericalError(f"section crossing not resolved: |lambda| = {abs(lam1):.3g}")
    # At the section dlambda/dt = y1, so a transversal crossing needs y1 != 0.
    if not y1 < 0:
        raise NumericalError(f"non-transversal return (y1 = {y1}) from y0 = {y0}")
    return HalfReturn(float(y0), float(y1), t1)


def full_return(y0: float, params: ModelParams, **kw) -> float:
    """Full return map composed from two half maps: R(y0) = -half(-half(y0))."""
    first = half_return(y0, params, **kw)
    second = half_return(-first.y1, params, **kw)
    return -second.y1


def delta_W(y0: float, params: ModelParams, **kw) -> float:
    if params.alpha <= 0:
        raise DomainError("dW needs alpha > 0")
    hr = half_return(y0, params, **kw)
    return (hr.y1**2 - hr.y0**2) / (4.0 * params.alpha)


def delta_W_from_lyapunov(hr: HalfReturn, params: ModelParams) -> float:
    return lyapunov_W(LienardState(hr.y1, 0.0), params) - lyapunov_W(LienardState(hr.y0, 0.0), params)


def _ladder(y_start=Y_START, y_cap=Y_CAP, factor=2.0):
    ys = []
    y = y_start
    while y <= y_cap * (1 + 1e-12):
        ys.append(y)
        y *= factor
    return ys


def find_limit_cycle(params: ModelParams, *, rtol=CYCLE_RTOL, atol=CYCLE_ATOL,
                     y_start=Y_START, y_cap=Y_CAP, factor=2.0, bracket=None,
                     orbit_samples: int = 4000):
    """Locate the periodic orbit as the root of dW on the positive y-axis.

    The search walks y0 = y_start * factor**k up to ``y_cap`` looking for dW
    changing sign from positive to negative.  Sub- and critical parameters get
    the whole ladder evaluated and a NoCycle result; a sign change there is a
    contradiction and raises.  ``bracket`` skips the walk.
    """
    if params.alpha <= 0:
        raise DomainError("cycle search needs alpha > 0")
    kw = dict(rtol=rtol, atol=atol)
    dw = lambda y: delta_W(y, params, **kw)
    stability = classify_origin(params)
    probes = []
    if bracket is None:
        lo = hi = None
        for y in _ladder(y_start, y_cap, factor):
            try:
                val = dw(y)
            except (NoReturnError, NumericalError) as exc:
                if stability is Stability.UNSTABLE:
                    raise
                # overdamped origin: the orbit creeps into it without winding
                return NoCycle(params, f"orbit from y0 = {y:g} does not return to the section ({exc})",
                               probes)
            probes.append((y, val))
            if len(probes) > 1 and probes[-2][1] > 0 >= val:
                lo, hi = probes[-2][0], y
                break
        if stability is not Stability.UNSTABLE:
            if lo is not None:
                raise NumericalError(
                    f"dW changes sign in [{lo}, {hi}] although the origin is {stability.value.lower()}")
            if any(v > 0 for _, v in probes):
                raise NumericalError("dW > 0 found for a non-supercritical parameter set")
            return NoCycle(params, "origin is a global attractor: dW < 0 on the whole probe ladder", probes)
        if lo is None:
            raise NoConvergenceError(
                f"no sign change of dW on [{y_start}, {y_cap}]; probes: "
                + ", ".join(f"{y:.3g}:{v:.3g}" for y, v in probes[:6]))
    else:
        lo, hi = bracket
        if not (dw(lo) > 0 > dw(hi)):
            raise NoConvergenceError(f"bracket {bracket} does not enclose a + to - sign change of dW")

    y0_p = brentq(dw, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
    hr = half_return(y0_p, params, **kw)
    dw_root = (hr.y1**2 - y0_p**2) / (4.0 * params.alpha)
    period = 2.0 * hr.transit_time

    # Full orbit over a bit more than one period; the upward crossing of lambda = 0
    # with y > 0 gives the period by direct closure.
    traj = integrate(LienardState(y0_p, 0.0), params, 1.25 * period, coords="lienard",
                     check_m=False, **kw)
    ts = np.linspace(0.0, period, orbit_samples + 1)
    x = traj(ts)
    orbit = np.column_stack([ts, x[0], x[1]])
    closure = float(np.hypot(*(traj(period) - np.array([y0_p, 0.0]))))
    t_close = _upward_crossing(traj, 0.75 * period, 1.25 * period)
    m = lienard_to_m(x[0], x[1], params) if params.beta > 0 else np.zeros_like(ts)
    return LimitCycle(params, float(y0_p), period, orbit, float(np.max(np.abs(m))), float(dw_root),
                      closure, t_close)


def _upward_crossing(traj, t_lo, t_hi) -> float:
    ts = np.linspace(t_lo, t_hi, 2001)
    lam = traj(ts)[1]
    k = np.nonzero((lam[:-1] < 0) & (lam[1:] >= 0))[0]
    if len(k) == 0:
        return math.nan
    a, b = ts[k[0]], ts[k[0] + 1]
    return brentq(lambda t: traj(t)[1], a, b, xtol=1e-14)


def _directed_distance(points: np.ndarray, polyline: np.ndarray, tree: cKDTree) -> np.ndarray:
    """Distance from each point to a closed polyline (segments around the 3 nearest vertices)."""
    n = len(polyline)
    _, nearest = tree.query(points, k=min(3, n))
    nearest = nearest.reshape(len(points), -1)
    best = np.full(len(points), np.inf)
    for idx in nearest.T:
        for shift in (-1, 0):
            a = polyline[(idx + shift) % n]
            b = polyline[(idx + shift + 1) % n]
            ab = b - a
            denom = np.einsum("ij,ij->i", ab, ab)
            safe = np.where(denom > 0, denom, 1.0)
            s = np.clip(np.einsum("ij,ij->i", points - a, ab) / safe, 0.0, 1.0)
            s = np.where(denom > 0, s, 0.0)
            proj = a + s[:, None] * ab
            best = np.minimum(best, np.hypot(*(points - proj).T))
    return best


def hausdorff_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Hausdorff distance between two closed curves sampled as (n, 2) polylines."""
    d_ab = _directed_distance(a, b, cKDTree(b))
    d_ba = _directed_distance(b, a, cKDTree(a))
    return float(max(d_ab.max(), d_ba.max()))


def distance_to_cycle(y0: float, cycle: LimitCycle, horizon: float = 200.0, *, rtol=CYCLE_RTOL,
                      atol=CYCLE_ATOL, samples: int = 4000) -> float:
    """Hausdorff distance between the last period of the orbit from (y0, 0) and the cycle."""
    traj = integrate(LienardState(y0, 0.0), cycle.params, horizon, coords="lienard",
                     rtol=rtol, atol=atol, check_m=False)
    ts = np.linspace(horizon - cycle.period, horizon, samples + 1)
    x = traj(ts)
    return hausdorff_distance(np.column_stack([x[0], x[1]]), cycle.points)


def beta_grid(start, stop, step) -> list[float]:
    """Decimal-exact grid start, start + step, ... <= stop."""
    start, stop, step = (Decimal(str(v)) for v in (start, stop, step))
    if step <= 0:
        raise DomainError("beta step must be positive")
    out = []
    k = 0
    while start + k * step <= stop:
        out.append(float(start + k * step))
        k += 1
    return out


def _scan_point(args):
    alpha, beta, kw = args
    params = ModelParams(alpha, beta, 0.0)
    cls = classify_origin(params)
    x_plus, _ = linearization_eigenvalues(params)
    row = {"beta": beta, "classification": cls.value, "re_eig": x_plus.real, "im_eig": abs(x_plus.imag),
           "has_cycle": "false", "y0_p": math.nan, "period": math.nan, "amplitude_m": math.nan,
           "status": "ok"}
    try:
        res = find_limit_cycle(params, **kw)
    except (NoConvergenceError, NumericalError) as exc:
        row["has_cycle"] = "failed"
        row["status"] = str(exc)
        return row
    if res.has_cycle:
        row.update(has_cycle="true", y0_p=res.y0_p, period=res.period, amplitude_m=res.amplitude_m)
    return row


def bifurcation_scan(alpha: float, betas, *, workers: int = 1, **kw) -> list[dict]:
    """Classification, leading eigenvalue and cycle data for each beta at fixed alpha."""
    jobs = [(float(alpha), float(b), kw) for b in betas]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_scan_point, jobs))
    return [_scan_point(j) for j in jobs]


def write_scan_csv(rows, path):
    return write_csv(path, SCAN_HEADER, ([r[h] for h in SCAN_HEADER] for r in rows))
