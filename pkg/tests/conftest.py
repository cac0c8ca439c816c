import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from dcw.fokker_planck import default_grid, initial_density, solve
from dcw.model import ModelParams

settings.register_profile("dcw", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("dcw")

# (alpha, beta, sigma, horizon) of the three noisy reference runs
FP_CASES = {
    "fig5": (3.0, 1.0, 0.1, 10.0),
    "fig7": (3.0, 3.0, 0.1, 20.0),
    "fig11": (3.0, 3.0, 10.0, 10.0),
}

_fp_cache = {}


def fp_run(name):
    """Fokker-Planck run of a reference case from lambda0 = 3, m0 = 0 (cached per session)."""
    if name not in _fp_cache:
        alpha, beta, sigma, horizon = FP_CASES[name]
        params = ModelParams(alpha, beta, sigma)
        grid = default_grid(params, 3.0)
        res = solve(initial_density(grid, 3.0, 0.0), params, horizon, 0.01, snapshot_times=[5.0])
        _fp_cache[name] = (params, grid, res)
    return _fp_cache[name]


@pytest.fixture(scope="session")
def fp_runs():
    return fp_run


ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


N2_PARAMS = ModelParams(1.0, 1.0, 0.5, 2)
_counts_cache = {}


def n2_flip_counts(kind, replicas=100_000, dt=1e-4):
    """Total flip counts over [0, 1] for N = 2 from lambda0 = 3, m0 = 0 (cached)."""
    from dcw.particles import InitialCondition, simulate_reference_euler, thinning_flip_counts

    key = (kind, replicas, dt)
    if key not in _counts_cache:
        init = InitialCondition(3.0, 0.0)
        if kind == "thinning":
            _counts_cache[key] = thinning_flip_counts(N2_PARAMS, init, 1.0, replicas, seed=11)
        else:
            _counts_cache[key] = simulate_reference_euler(N2_PARAMS, init, 1.0, dt, seed=12,
                                                          replicas=replicas)[0]
    return _counts_cache[key]


def total_variation(a, b):
    k = int(max(a.max(), b.max())) + 1
    pa = np.bincount(a, minlength=k) / a.size
    pb = np.bincount(b, minlength=k) / b.size
    return 0.5 * float(np.abs(pa - pb).sum())


def ks_distance(a, b):
    k = int(max(a.max(), b.max())) + 1
    ca = np.cumsum(np.bincount(a, minlength=k)) / a.size
    cb = np.cumsum(np.bincount(b, minlength=k)) / b.size
    return float(np.max(np.abs(ca - cb)))


CHAOS_PARAMS = ModelParams(3.0, 1.0, 0.1)
CHAOS_NS = (250, 1000, 4000)
_study_cache = {}


def chaos_study(beta=1.0, replicas=16):
    """Coupling study at T = 5 from lambda0 = 3, m0 = 0 over CHAOS_NS (cached)."""
    from dcw.chaos import convergence_study

    key = (beta, replicas)
    if key not in _study_cache:
        p = ModelParams(CHAOS_PARAMS.alpha, beta, CHAOS_PARAMS.sigma)
        _study_cache[key] = convergence_study(p, 5.0, CHAOS_NS, replicas, seed=20240611)
    return _study_cache[key]


_tagged_cache = {}


def tagged_fig7(replicas=100_000, horizon=5.0):
    """Tagged process driven by g(t) of the fig7 PDE run, started like that run (cached)."""
    from dcw.chaos import simulate_tagged_nonlinear

    key = (replicas, horizon)
    if key not in _tagged_cache:
        params, grid, res = fp_run("fig7")
        g_path = (res.record.t, res.record["g"])
        _tagged_cache[key] = simulate_tagged_nonlinear(g_path, params, replicas, seed=7, horizon=horizon,
                                                       lambda0=3.0, m0=0.0, init_width=4 * grid.dl)
    return _tagged_cache[key]
