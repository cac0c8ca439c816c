"""Finite-volume solver for the mean-field Fokker-Planck pair (nu, mu).

nu is the density of the intensity and mu the spin-weighted (signed) density,
so that p(+1, .) = (nu + mu)/2 and p(-1, .) = (nu - mu)/2.  In divergence form

    d/dt nu = d/dl[(alpha l - 2 beta g) nu] + sigma^2/2 d2/dl2 nu
    d/dt mu = d/dl[(alpha l - 2 beta g) mu] + sigma^2/2 d2/dl2 mu - 2 mu - 2 tanh(l) nu
    g(t)    = <nu, tanh> + <mu, 1>

Both components share one stencil: the advective flux is the upwind value of
a third-order parabolic reconstruction (limited towards the cell value only
where it would turn negative), the diffusive flux is centred, walls are zero
flux, and time stepping is the three-stage strong-stability-preserving
Runge-Kutta scheme.  The stencil is applied to p(+1, .) and p(-1, .) so the
limiter keeps both non-negative, which is what |mu| <= nu requires.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .model import DomainError, ModelParams, NumericalError
from .records import RunRecord, write_csv

FP_HEADER = ("t", "m", "lambda_mean", "lambda_var", "g")
SNAPSHOT_HEADER = ("lambda", "nu", "mu")
MASS_TOL = 1e-6
NEGATIVITY_TOL = 1e-10
BOUNDARY_MASS_TOL = 1e-8
CFL_SAFETY = 0.4
TINY = 1e-250


class CFLError(DomainError):
    def __init__(self, dt, dt_max):
        super().__init__(f"dt={dt:.3g} exceeds the explicit stability limit; use dt <= {dt_max:.3g}")
        self.dt_max = dt_max


@dataclass(frozen=True)
class Grid:
    L: float
    n_cells: int

    def __post_init__(self):
        if not self.L > 0:
            raise DomainError("grid half-width L must be positive")
        if self.n_cells < 64 or self.n_cells % 2:
            raise DomainError(f"n_cells must be even and >= 64, got {self.n_cells}")

    @property
    def dl(self) -> float:
        return 2.0 * self.L / self.n_cells

    @property
    def centers(self) -> np.ndarray:
        return -self.L + (np.arange(self.n_cells) + 0.5) * self.dl

    @property
    def faces(self) -> np.ndarray:
        return -self.L + np.arange(self.n_cells + 1) * self.dl


def default_grid(params: ModelParams, lambda0: float = 3.0, L: float | None = None,
                 n_cells: int | None = None) -> Grid:
    """Truncated domain wide enough for the drift and noise; about six cells per stationary width."""
    if params.alpha <= 0 and (L is None or n_cells is None):
        raise DomainError("default grid sizing needs alpha > 0; pass L and n_cells explicitly")
    if L is None:
        spread = 6.0 * params.sigma / math.sqrt(2.0 * params.alpha)
        L = max(2.0 * abs(lambda0), spread + 4.0 * params.beta / params.alpha + 2.0)
    if n_cells is None:
        width = params.sigma / math.sqrt(2.0 * params.alpha)
        dl = min(width / 6.0, 0.1)
        n_cells = max(64, int(math.ceil(2.0 * L / dl)))
        n_cells += n_cells % 2
    return Grid(float(L), int(n_cells))


@dataclass
class DensityPair:
    grid: Grid
    nu: np.ndarray
    mu: np.ndarray
    time: float = 0.0

    @property
    def p_plus(self) -> np.ndarray:
        return 0.5 * (self.nu + self.mu)

    @property
    def p_minus(self) -> np.ndarray:
        return 0.5 * (self.nu - self.mu)

    def to_csv(self, path):
        return write_csv(path, SNAPSHOT_HEADER, zip(self.grid.centers, self.nu, self.mu))


def initial_density(grid: Grid, lambda0: float = 3.0, m0: float = 0.0, width: float | None = None) -> DensityPair:
    """Delta at lambda0 mollified into a Gaussian of standard deviation ``width`` (default 4 cells).

    Narrower bumps are under-resolved by the reconstruction and pollute the early moments.
    """
    if not -1.0 <= m0 <= 1.0:
        raise DomainError("m0 must lie in [-1, 1]")
    width = 4.0 * grid.dl if width is None else width
    x = grid.centers
    nu = np.exp(-0.5 * ((x - lambda0) / width) ** 2)
    total = nu.sum() * grid.dl
    if total <= 0:
        raise DomainError("initial point mass lies outside the grid")
    nu /= total
    return DensityPair(grid, nu, m0 * nu, 0.0)


def compute_g(density: DensityPair) -> float:
    dl = density.grid.dl
    return float(np.dot(np.tanh(density.grid.centers), density.nu) * dl + density.mu.sum() * dl)


def moments(density: DensityPair) -> dict:
    dl = density.grid.dl
    x = density.grid.centers
    mass = density.nu.sum() * dl
    mean = np.dot(x, density.nu) * dl / mass
    var = np.dot((x - mean) ** 2, density.nu) * dl / mass
    return {"mass_nu": float(mass), "m": float(density.mu.sum() * dl),
            "lambda_mean": float(mean), "lambda_var": float(var)}


def max_velocity(grid: Grid, params: ModelParams) -> float:
    # |g| <= 2, so the drift -alpha l + 2 beta g is bounded on [-L, L] by:
    return params.alpha * grid.L + 4.0 * params.beta


def stable_dt(grid: Grid, params: ModelParams) -> float:
    """Largest dt accepted by :func:`fp_step` (explicit diffusion + advection + flip reaction)."""
    rate = params.sigma**2 / grid.dl**2 + max_velocity(grid, params) / grid.dl + 4.0
    return 1.0 / rate


def default_dt(grid: Grid, params: ModelParams) -> float:
    terms = [grid.dl / max(max_velocity(grid, params), 1e-300)]
    if params.sigma > 0:
        terms.append(grid.dl**2 / params.sigma**2)
    return CFL_SAFETY * min(terms)


@numba.njit(cache=True)
def _limited_faces(pm1, p0, pp1):
    a_right = (2.0 * pp1 + 5.0 * p0 - pm1) / 6.0
    a_left = (2.0 * pm1 + 5.0 * p0 - pp1) / 6.0
    low = min(a_left, a_right, (26.0 * p0 - pm1 - pp1) / 24.0)
    if low < 0.0:
        theta = p0 / (p0 - low) if p0 > 0.0 else 0.0
        theta = min(max(theta, 0.0), 1.0)
        a_right = p0 + theta * (a_right - p0)
        a_left = p0 + theta * (a_left - p0)
    return a_left, a_right


@numba.njit(cache=True)
def _rhs_kernel(p, tanh, faces, alpha, beta, diff, dl, out):
    n = p.shape[1]
    g = 0.0
    for i in range(n):
        g += tanh[i] * (p[0, i] + p[1, i]) * dl
    for i in range(n):
        g += (p[0, i] - p[1, i]) * dl
    v0 = 2.0 * beta * g
    for c in range(2):
        for i in range(n):
            out[c, i] = 0.0
        _, prev_right = _limited_faces(0.0, p[c, 0], p[c, 1])
        for i in range(1, n):
            # interior face between cells i-1 and i
            pp1 = p[c, i + 1] if i + 1 < n else 0.0
            a_left, a_right = _limited_faces(p[c, i - 1], p[c, i], pp1)
            v = -alpha * faces[i] + v0
            flux = v * (prev_right if v > 0.0 else a_left) - diff * (p[c, i] - p[c, i - 1])
            out[c, i - 1] -= flux
            out[c, i] += flux
            prev_right = a_right
        for i in range(n):
            out[c, i] /= dl
    for i in range(n):
        flow = (1.0 - tanh[i]) * p[1, i] - (1.0 + tanh[i]) * p[0, i]
        out[0, i] += flow
        out[1, i] -= flow


@numba.njit(cache=True)
def _ssp_rk3_kernel(p, dt, n_steps, tanh, faces, alpha, beta, diff, dl):
    k = np.empty_like(p)
    p1 = np.empty_like(p)
    p2 = np.empty_like(p)
    for _ in range(n_steps):
        _rhs_kernel(p, tanh, faces, alpha, beta, diff, dl, k)
        for c in range(2):
            for i in range(p.shape[1]):
                p1[c, i] = p[c, i] + dt * k[c, i]
        _rhs_kernel(p1, tanh, faces, alpha, beta, diff, dl, k)
        for c in range(2):
            for i in range(p.shape[1]):
                p2[c, i] = 0.75 * p[c, i] + 0.25 * (p1[c, i] + dt * k[c, i])
        _rhs_kernel(p2, tanh, faces, alpha, beta, diff, dl, k)
        for c in range(2):
            for i in range(p.shape[1]):
                v = p[c, i] / 3.0 + (2.0 / 3.0) * (p2[c, i] + dt * k[c, i])
                # Far tails would otherwise decay into subnormals, which are very slow to compute with.
                p[c, i] = v if abs(v) > TINY else 0.0
    return p


class _Stencil:
    """Precomputed pieces of the semi-discrete right-hand side on one grid."""

    def __init__(self, grid: Grid, params: ModelParams):
        self.grid = grid
        self.params = params
        self.dl = grid.dl
        self.tanh = np.tanh(grid.centers)
        self.inner_faces = grid.faces[1:-1]
        self.diff = 0.5 * params.sigma**2 / grid.dl
        self.g_weights = self.tanh * grid.dl

    def g_of(self, p):
        nu = p[0] + p[1]
        return float(np.dot(self.g_weights, nu) + (p[0].sum() - p[1].sum()) * self.dl)

    def rhs(self, p):
        """Time derivative of the stacked array p = [p(+1, .), p(-1, .)]."""
        g = self.g_of(p)
        pad = np.pad(p, ((0, 0), (1, 1)))
        left, mid, right = pad[:, :-2], p, pad[:, 2:]
        a_right = (2.0 * right + 5.0 * mid - left) / 6.0
        a_left = (2.0 * left + 5.0 * mid - right) / 6.0
        centre = (26.0 * mid - left - right) / 24.0
        low = np.minimum(np.minimum(a_left, a_right), centre)
        with np.errstate(divide="ignore", invalid="ignore"):
            theta = np.where(low < 0.0, mid / (mid - low), 1.0)
        theta = np.clip(np.nan_to_num(theta, nan=0.0), 0.0, 1.0)
        a_right = mid + theta * (a_right - mid)
        a_left = mid + theta * (a_left - mid)

        v = -self.params.alpha * self.inner_faces + 2.0 * self.params.beta * g
        upwind = np.where(v > 0.0, a_right[:, :-1], a_left[:, 1:])
        flux = v * upwind - self.diff * (mid[:, 1:] - mid[:, :-1])
        out = np.zeros_like(p)
        out[:, :-1] -= flux
        out[:, 1:] += flux
        out /= self.dl
        # Spin flips: p(+) -> p(-) at rate 1 + tanh, p(-) -> p(+) at rate 1 - tanh.
        flow = (1.0 - self.tanh) * p[1] - (1.0 + self.tanh) * p[0]
        out[0] += flow
        out[1] -= flow
        return out

    def advance(self, p, dt, n_steps=1):
        """``n_steps`` SSP-RK3 steps in the compiled kernel; :meth:`step` is the array reference."""
        p = np.array(p, dtype=float, order="C")
        return _ssp_rk3_kernel(p, float(dt), int(n_steps), self.tanh, self.grid.faces,
                               self.params.alpha, self.params.beta, self.diff, self.dl)

    def step(self, p, dt):
        k = self.rhs(p)
        p1 = p + dt * k
        p2 = 0.75 * p + 0.25 * (p1 + dt * self.rhs(p1))
        return p / 3.0 + (2.0 / 3.0) * (p2 + dt * self.rhs(p2))


def _check_params(params: ModelParams):
    if params.sigma <= 0:
        raise DomainError("the Fokker-Planck solver needs sigma > 0; for sigma = 0 integrate the "
                          "macroscopic ODE instead (engine 'ode')")


def fp_step(density: DensityPair, dt: float, params: ModelParams) -> DensityPair:
    """Advance (nu, mu) by one SSP-RK3 step of size ``dt``."""
    _check_params(params)
    limit = stable_dt(density.grid, params)
    if not 0 < dt <= limit:
        raise CFLError(dt, limit)
    st = _Stencil(density.grid, params)
    p = st.step(np.stack([density.p_plus, density.p_minus]), dt)
    return DensityPair(density.grid, p[0] + p[1], p[0] - p[1], density.time + dt)


@dataclass
class FPResult:
    record: RunRecord
    snapshots: dict = field(default_factory=dict)  # time -> DensityPair
    final: DensityPair | None = None
    # <mu, tanh> = E[tanh(Sigma Lambda)], sampled with the record.
    mu_tanh: np.ndarray | None = None
    max_mass_drift: float = 0.0
    min_nu: float = 0.0
    max_boundary_mass: float = 0.0
    initial_var: float = 0.0
    dt: float = 0.0


def boundary_mass(density: DensityPair) -> float:
    x = density.grid.centers
    edge = np.abs(x) > 0.95 * density.grid.L
    return float(density.nu[edge].sum() * density.grid.dl)


def solve(initial: DensityPair, params: ModelParams, horizon: float, cadence: float = 0.01, *,
          snapshot_times=(), dt: float | None = None, check: bool = True) -> FPResult:
    """Integrate up to ``horizon``, recording moments every ``cadence`` and snapshots on request."""
    _check_params(params)
    if not horizon > 0 or not cadence > 0:
        raise DomainError("horizon and cadence must be positive")
    grid = initial.grid
    st = _Stencil(grid, params)
    limit = stable_dt(grid, params)
    dt_target = default_dt(grid, params) if dt is None else dt
    if not 0 < dt_target <= limit:
        raise CFLError(dt_target, limit)
    n_sub = max(1, int(math.ceil(cadence / dt_target - 1e-9)))
    h = cadence / n_sub
    n_obs = int(math.floor(horizon / cadence + 1e-9))
    tail = horizon - n_obs * cadence
    snaps_wanted = sorted(float(s) for s in snapshot_times)

    p = np.stack([initial.p_plus, initial.p_minus]).astype(float)
    dl = grid.dl
    x = grid.centers
    rows, mu_tanh = [], []
    result = FPResult(RunRecord.from_rows(FP_HEADER, []), dt=h)
    mass0 = initial.nu.sum() * dl

    def observe(t):
        nu = p[0] + p[1]
        mu = p[0] - p[1]
        dens = DensityPair(grid, nu, mu, t)
        mo = moments(dens)
        g = compute_g(dens)
        rows.append((t, mo["m"], mo["lambda_mean"], mo["lambda_var"], g))
        mu_tanh.append(float(np.dot(st.tanh, mu) * dl))
        drift = abs(mo["mass_nu"] - mass0)
        result.max_mass_drift = max(result.max_mass_drift, drift)
        result.min_nu = min(result.min_nu, float(nu.min()))
        result.max_boundary_mass = max(result.max_boundary_mass, boundary_mass(dens))
        if check:
            if drift > MASS_TOL:
                raise NumericalError(f"mass of nu drifted by {drift:.3g} at t={t:.6g}")
            if nu.min() < -NEGATIVITY_TOL:
                raise NumericalError(f"nu went negative ({nu.min():.3g}) at t={t:.6g}")
            if result.max_boundary_mass > BOUNDARY_MASS_TOL:
                raise NumericalError(f"mass {result.max_boundary_mass:.3g} reached the domain wall at "
                                     f"t={t:.6g}; enlarge L")
            if not np.all(np.isfinite(p)):
                raise NumericalError(f"non-finite density at t={t:.6g}")
        while snaps_wanted and snaps_wanted[0] <= t + 1e-9 * max(1.0, t):
            snaps_wanted.pop(0)
            result.snapshots[t] = DensityPair(grid, nu.copy(), mu.copy(), t)

    observe(0.0)
    result.initial_var = rows[0][3]
    for k in range(1, n_obs + 1):
        p = st.advance(p, h, n_sub)
        observe(k * cadence)
    if tail > 1e-12:
        n_tail = max(1, int(math.ceil(tail / dt_target - 1e-9)))
        p = st.advance(p, tail / n_tail, n_tail)
        observe(horizon)
    result.record = RunRecord.from_rows(FP_HEADER, rows, engine="pde")
    result.mu_tanh = np.array(mu_tanh)
    result.final = DensityPair(grid, p[0] + p[1], p[0] - p[1], rows[-1][0])
    return result


def variance_closed_form(t, var0: float, params: ModelParams):
    """Var(Lambda_t) = e^{-2 alpha t} Var0 + sigma^2/(2 alpha) (1 - e^{-2 alpha t})."""
    t = np.asarray(t, dtype=float)
    if params.alpha == 0:
        return var0 + params.sigma**2 * t
    decay = np.exp(-2.0 * params.alpha * t)
    return decay * var0 + params.sigma**2 / (2.0 * params.alpha) * (1.0 - decay)


def moment_residuals(result: FPResult, params: ModelParams) -> dict:
    """Relative residuals of the three moment identities, using centred differences in time.

    Each residual is max|d/dt(series) - rhs| / max|rhs| over the interior samples.
    """
    rec = result.record
    t = rec.t
    m, mean, var, g = rec["m"], rec["lambda_mean"], rec["lambda_var"], rec["g"]
    out = {}
    for name, series, rhs in (
        ("m", m, -2.0 * g),
        ("lambda_mean", mean, -params.alpha * mean + 2.0 * params.beta * g),
        ("lambda_var", var, -2.0 * params.alpha * var + params.sigma**2),
    ):
        deriv = np.gradient(series, t, edge_order=2)[1:-1]
        r = rhs[1:-1]
        out[name] = float(np.max(np.abs(deriv - r)) / max(np.max(np.abs(r)), 1e-300))
    return out
