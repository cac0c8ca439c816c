"""Coupling between the N-particle system and its mean-field-drift companion.

Both systems share the private OU parts xi_i (same Brownian increments) and
the candidate events (times, particle indices, marks).  They differ only in
the common part of the intensity:

* true system: c jumps by 2 beta s_j / N when spin j flips and decays at rate alpha;
* companion:   cbar is continuous, dcbar/dt = -alpha cbar + 2 beta (mbar + F(t)),
  F(t) = (1/N) sum_k tanh(xi_k(t) + cbar(t)).

Hence lambda_i - lambdabar_i = c - cbar for every i, and the spins of the two
systems are thinned from the same marks with their own intensities.  Between
grid times F is extrapolated linearly from its last two grid values and cbar is
advanced by the exact solution of the resulting linear ODE, which makes the
companion second order in the grid step.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .model import DomainError, ModelParams, NumericalError
from .particles import ENVELOPE, InitialCondition, NoiseStreams, ou_moments, seed_sequence
from .records import write_csv

STUDY_HEADER = ("n", "replicas", "d_n", "stderr")
DEFAULT_GRID_STEP = 0.002


def clamp_spin(s):
    """h(s) = max(-1, min(s, 1))."""
    return np.clip(s, -1.0, 1.0)


def jump_q(s, lam, u):
    """Jump of the intensity mark for a candidate with mark u in (0, 2): -2 h(s) if accepted, else 0."""
    h = clamp_spin(s)
    return np.where(np.asarray(u) < 1.0 + h * np.tanh(lam), -2.0 * h, 0.0)


def mean_jump(s, lam):
    """Integral of ``jump_q`` over u in (0, 2) for s in {-1, 1}: -2 (s + tanh lambda)."""
    return -2.0 * (np.asarray(s, dtype=float) + np.tanh(lam))


class StreamMismatchError(NumericalError):
    """The two coupled systems did not consume the same noise."""


@dataclass
class CoupledRunResult:
    n: int
    horizon: float
    d_n: float
    replicas: int
    standard_error: float
    per_replica: np.ndarray = field(repr=False, default=None)
    max_field_gap: float = 0.0  # largest |c - cbar| seen over all replicas
    mismatched_spins: float = 0.0  # mean final fraction of particles with s != sbar


class _Checksum:
    def __init__(self):
        self._h = hashlib.blake2b(digest_size=16)

    def feed(self, *values):
        self._h.update(np.asarray(values, dtype=float).tobytes())

    def digest(self) -> str:
        return self._h.hexdigest()


def _advance_companion(cbar, tau, alpha, a, b):
    """Exact solution after ``tau`` of x' = -alpha x + a + b s, x(0) = cbar, s the elapsed time."""
    if tau <= 0.0:
        return cbar
    z = alpha * tau
    if alpha == 0.0:
        return cbar + a * tau + 0.5 * b * tau * tau
    decay = math.exp(-z)
    phi1 = -math.expm1(-z) / alpha  # int_0^tau e^{-alpha (tau - s)} ds
    if z < 1e-4:
        phi2 = tau * tau * (0.5 - z / 6.0 + z * z / 24.0)
    else:
        phi2 = (tau - phi1) / alpha  # int_0^tau e^{-alpha (tau - s)} s ds
    return cbar * decay + a * phi1 + b * phi2


def _coupled_replica(params: ModelParams, init: InitialCondition, horizon: float, seed,
                     grid_step: float):
    n = params.n_particles
    alpha, beta, sigma = params.alpha, params.beta, params.sigma
    streams = NoiseStreams(seed, n, block=int(min(65536, max(64, 1.1 * ENVELOPE * n * horizon + 16))))
    spins0, lam0 = init.sample(n, streams.init)
    s = spins0.astype(float).tolist()
    sb = list(s)
    xi = lam0.astype(float).tolist()
    sync = [0.0] * n
    kick = 2.0 * beta / n
    clock = ENVELOPE * n
    ou_scale = sigma / math.sqrt(2.0 * alpha) if alpha > 0 else 0.0
    sum_s = float(sum(s))
    sum_sb = sum_s
    c = cbar = 0.0
    t = 0.0
    worst = np.zeros(n)  # running sup of |s_i - sbar_i| + |c - cbar| per particle
    gap_max = 0.0
    check_true, check_bar = _Checksum(), _Checksum()
    exp, tanh, sqrt, expm1 = math.exp, math.tanh, math.sqrt, math.expm1

    n_grid = int(math.ceil(horizon / grid_step - 1e-9))
    grid = [min(horizon, k * horizon / n_grid) for k in range(n_grid + 1)]
    h = horizon / n_grid
    f_now = float(np.mean(np.tanh(np.asarray(xi) + cbar)))
    f_slope = 0.0
    t_grid = 0.0
    mismatch = np.zeros(n, dtype=bool)

    def forcing(t_from):
        return 2.0 * beta * (sum_sb / n + f_now + f_slope * (t_from - t_grid)), 2.0 * beta * f_slope

    e, i, u = streams.next_event()
    t_next = e / clock
    for k in range(1, n_grid + 1):
        tg = grid[k]
        while t_next <= tg:
            # advance both common fields to the candidate time
            c *= exp(-alpha * (t_next - t))
            a, b = forcing(t)
            cbar = _advance_companion(cbar, t_next - t, alpha, a, b)
            t = t_next
            if sigma == 0:
                x = xi[i] * exp(-alpha * t)
            else:
                dt = t - sync[i]
                if alpha > 0:
                    x = exp(-alpha * dt) * xi[i] + ou_scale * sqrt(-expm1(-2.0 * alpha * dt)) * streams.next_normal()
                else:
                    x = xi[i] + sigma * sqrt(dt) * streams.next_normal()
                xi[i] = x
                sync[i] = t
            check_true.feed(t, i, u, x)
            check_bar.feed(t, i, u, x)
            si, sbi = s[i], sb[i]
            if u < 1.0 + tanh(si * (x + c)):
                s[i] = -si
                sum_s -= 2.0 * si
                c += kick * si
            if u < 1.0 + tanh(sbi * (x + cbar)):
                sb[i] = -sbi
                sum_sb -= 2.0 * sbi
            gap = abs(c - cbar)
            if gap > gap_max:
                gap_max = gap
            mismatch[i] = s[i] != sb[i]
            if mismatch[i]:
                d = 2.0 + gap
                if d > worst[i]:
                    worst[i] = d
            e, i, u = streams.next_event()
            t_next = t + e / clock
        # grid time: bring every xi and both fields to tg
        c *= exp(-alpha * (tg - t))
        a, b = forcing(t)
        cbar = _advance_companion(cbar, tg - t, alpha, a, b)
        t = tg
        xi_arr = np.asarray(xi)
        if sigma == 0:
            lam_priv = xi_arr * exp(-alpha * t)
        else:
            fac, sd = ou_moments(t - np.asarray(sync), params)
            xi_arr = fac * xi_arr + sd * streams.normals(n)
            xi = xi_arr.tolist()
            sync = [t] * n
            lam_priv = xi_arr
        f_new = float(np.mean(np.tanh(lam_priv + cbar)))
        f_slope = (f_new - f_now) / h
        f_now = f_new
        t_grid = t
        gap = abs(c - cbar)
        gap_max = max(gap_max, gap)
        np.maximum(worst, 2.0 * mismatch + gap, out=worst)
        if not (math.isfinite(c) and math.isfinite(cbar)):
            raise NumericalError(f"common field diverged at t={t}")
    if check_true.digest() != check_bar.digest():
        raise StreamMismatchError("coupled systems consumed different noise")
    np.maximum(worst, gap_max, out=worst)
    return float(worst.mean()), gap_max, float(mismatch.mean())


def coupled_run(params: ModelParams, horizon: float, replicas: int, seed=0, *,
                init: InitialCondition | None = None,
                grid_step: float = DEFAULT_GRID_STEP) -> CoupledRunResult:
    """Estimate d_N = (1/N) sum_i E[sup_t |s_i - sbar_i| + |lambda_i - lambdabar_i|]."""
    if not horizon > 0:
        raise DomainError("horizon must be positive")
    if replicas < 1:
        raise DomainError("need at least one replica")
    if not grid_step > 0:
        raise DomainError("grid_step must be positive")
    init = init or InitialCondition()
    children = seed_sequence(seed).spawn(replicas)
    out = np.empty(replicas)
    gap, mism = 0.0, 0.0
    for r, child in enumerate(children):
        out[r], g, mm = _coupled_replica(params, init, horizon, child, grid_step)
        gap = max(gap, g)
        mism += mm / replicas
    se = float(out.std(ddof=1) / math.sqrt(replicas)) if replicas > 1 else 0.0
    return CoupledRunResult(params.n_particles, float(horizon), float(out.mean()), replicas, se,
                            out, gap, mism)


@dataclass
class ConvergenceStudy:
    results: list
    slope: float
    intercept: float

    def rows(self):
        return [(r.n, r.replicas, r.d_n, r.standard_error) for r in self.results]

    def to_csv(self, path):
        return write_csv(path, STUDY_HEADER, self.rows())


def fit_loglog(ns, values) -> tuple[float, float]:
    """Least-squares slope and intercept of log(values) against log(ns)."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(values, dtype=float))
    slope, intercept = np.polyfit(x, y, 1)
    return float(slope), float(intercept)


def convergence_study(params: ModelParams, horizon: float, n_list, replicas: int, seed=0, *,
                      init: InitialCondition | None = None,
                      grid_step: float = DEFAULT_GRID_STEP) -> ConvergenceStudy:
    n_list = sorted(int(n) for n in n_list)
    if len(n_list) < 3 or n_list[-1] < 10 * n_list[0]:
        raise DomainError("n_list needs at least 3 sizes spanning a decade")
    seeds = seed_sequence(seed).spawn(len(n_list))
    results = []
    for n, sq in zip(n_list, seeds):
        p = ModelParams(params.alpha, params.beta, params.sigma, n)
        results.append(coupled_run(p, horizon, replicas, sq, init=init, grid_step=grid_step))
    d = [r.d_n for r in results]
    if all(v > 0 for v in d):
        slope, intercept = fit_loglog(n_list, d)
    else:
        slope = intercept = math.nan
    return ConvergenceStudy(results, slope, intercept)


def _quantile_function(grid_faces: np.ndarray, density: np.ndarray, dl: float):
    weights = np.clip(density, 0.0, None) * dl
    total = weights.sum()
    if not total > 0:
        raise DomainError("reference density has no mass")
    cdf = np.concatenate([[0.0], np.cumsum(weights) / total])
    # drop faces inside empty stretches but keep both faces bounding every cell with mass
    step = np.diff(cdf) > 0
    keep = np.concatenate([step, [False]]) | np.concatenate([[False], step])
    cdf, faces = cdf[keep], grid_faces[keep]
    return lambda q: np.interp(q, cdf, faces)


def marginal_distance(sample, grid, nu) -> float:
    """W1 distance between an empirical sample and a cell-wise constant density on ``grid``.

    Uses W1 = int_0^1 |F_emp^{-1}(q) - F_ref^{-1}(q)| dq with the midpoint rule
    at q_k = (k - 1/2)/n, where the empirical quantile is the k-th order statistic.
    """
    x = np.sort(np.asarray(sample, dtype=float).ravel())
    if x.size == 0:
        raise DomainError("sample must be nonempty")
    quantile = _quantile_function(grid.faces, np.asarray(nu, dtype=float), grid.dl)
    q = (np.arange(x.size) + 0.5) / x.size
    return float(np.mean(np.abs(x - quantile(q))))


@dataclass
class TaggedSamples:
    spins: np.ndarray
    lambdas: np.ndarray
    flips: np.ndarray
    horizon: float


def _forcing_primitive(times: np.ndarray, g: np.ndarray, alpha: float):
    """H(t) = int_0^t e^{alpha u} g(u) du for piecewise-linear g, exact on each interval."""
    dt = np.diff(times)
    if alpha == 0:
        seg = 0.5 * (g[:-1] + g[1:]) * dt
    else:
        # int_0^dt e^{alpha (t0 + s)} (g0 + k s) ds
        k = np.diff(g) / dt
        e0 = np.exp(alpha * times[:-1])
        ed = np.expm1(alpha * dt)
        seg = e0 * (g[:-1] * ed / alpha + k * ((dt * (ed + 1.0)) / alpha - ed / alpha**2))
    H = np.concatenate([[0.0], np.cumsum(seg)])

    def at(t):
        t = np.asarray(t, dtype=float)
        j = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2)
        t0 = times[j]
        s = t - t0
        g0 = g[j]
        kk = (g[j + 1] - g[j]) / (times[j + 1] - times[j])
        if alpha == 0:
            part = g0 * s + 0.5 * kk * s * s
        else:
            ed = np.expm1(alpha * s)
            part = np.exp(alpha * t0) * (g0 * ed / alpha + kk * ((s * (ed + 1.0)) / alpha - ed / alpha**2))
        return H[j] + part

    return at


def simulate_tagged_nonlinear(g_path, params: ModelParams, replicas: int, seed=0, *,
                              horizon: float | None = None, lambda0: float = 3.0, m0: float = 0.0,
                              init_width: float = 0.0) -> TaggedSamples:
    """One particle driven by a prescribed mean field: dLambda = (-alpha Lambda + 2 beta g(t)) dt + sigma dB.

    ``g_path`` is a pair (times, g values), linearly interpolated.  Sigma flips at
    rate 1 + tanh(Sigma Lambda), simulated by thinning against rate 2 with the
    exact OU-with-forcing transition between candidates.  Replicas are vectorized.
    """
    times, g = (np.asarray(v, dtype=float) for v in g_path)
    if times.ndim != 1 or times.shape != g.shape or len(times) < 2:
        raise DomainError("g_path must be two 1-D arrays of equal length >= 2")
    horizon = float(times[-1]) if horizon is None else float(horizon)
    if times[0] > 0 or times[-1] < horizon * (1 - 1e-12):
        raise DomainError(f"g_path covers [{times[0]}, {times[-1]}], shorter than the horizon {horizon}")
    alpha, beta, sigma = params.alpha, params.beta, params.sigma
    if alpha * horizon > 600:
        raise DomainError("alpha * horizon too large for the exponential forcing primitive")
    H = _forcing_primitive(times, g, alpha)
    rng = np.random.default_rng(seed_sequence(seed))

    lam = lambda0 + init_width * rng.standard_normal(replicas)
    spins = np.where(rng.random(replicas) < (1.0 + m0) / 2.0, 1.0, -1.0)
    flips = np.zeros(replicas, dtype=np.int64)
    t = np.zeros(replicas)

    def move(lam, t0, t1):
        fac, sd = ou_moments(t1 - t0, params)
        if alpha == 0:
            drift = H(t1) - H(t0)
        else:
            drift = np.exp(-alpha * t1) * (H(t1) - H(t0))
        out = fac * lam + 2.0 * beta * drift
        if sigma > 0:
            out = out + sd * rng.standard_normal(lam.shape)
        return out

    active = np.arange(replicas)
    while active.size:
        t_new = t[active] + rng.standard_exponential(active.size) / ENVELOPE
        done = t_new > horizon
        if np.any(done):
            idx = active[done]
            lam[idx] = move(lam[idx], t[idx], np.full(idx.size, horizon))
            t[idx] = horizon
            active, t_new = active[~done], t_new[~done]
        if not active.size:
            break
        lam[active] = move(lam[active], t[active], t_new)
        t[active] = t_new
        u = ENVELOPE * rng.random(active.size)
        acc = u < 1.0 + np.tanh(spins[active] * lam[active])
        hit = active[acc]
        spins[hit] = -spins[hit]
        flips[hit] += 1
    return TaggedSamples(spins, lam, flips, horizon)
