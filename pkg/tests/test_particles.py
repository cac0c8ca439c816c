import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import ks_distance, n2_flip_counts
from dcw.model import DomainError, ModelParams, NumericalError
from dcw.particles import (PARTICLE_HEADER, InitialCondition, NoiseStreams, apply_flip,
                           empirical_magnetization, initial_state, ou_moments, ou_transition,
                           propose_and_thin, simulate, simulate_reference_euler)


def test_ou_transition_degenerate_cases():
    rng = np.random.default_rng(0)
    p = ModelParams(3.0, 0.0, 0.1)
    assert ou_transition(1.7, 0.0, p, rng) == 1.7
    fac, sd = ou_moments(1.0, ModelParams(0.0, 0.0, 1.0))
    assert fac == 1.0 and sd == 1.0
    with pytest.raises(DomainError):
        ou_moments(-1.0, p)


def test_ou_stationary_variance_monte_carlo():
    p = ModelParams(3.0, 0.0, 0.1)
    rng = np.random.default_rng(1)
    x = ou_transition(np.zeros(100_000), 50.0, p, rng)
    target = 0.1**2 / 6.0
    se = target * math.sqrt(2.0 / x.size)
    assert abs(x.var() - target) < 3 * se
    assert target == pytest.approx(1 / 600)


@given(st.floats(0, 10), st.floats(0, 5), st.floats(0, 3))
def test_ou_moments_are_valid(alpha, sigma, dt):
    fac, sd = ou_moments(dt, ModelParams(alpha, 0, sigma))
    assert 0 < fac <= 1 and sd >= 0
    assert sd <= sigma * math.sqrt(dt) + 1e-15


def _accepted_state(params, init, seed=0):
    state = initial_state(params, init, seed)
    while True:
        t, i, acc = propose_and_thin(state)
        if acc:
            return state, i


def test_acceptance_probability_extremes():
    # s*lambda huge: every candidate accepted; s*lambda = 0: half of them
    p = ModelParams(0.0, 0.0, 0.0, 200)
    state = initial_state(p, InitialCondition(lambda0=40.0, m0=1.0), 3)
    acc = [propose_and_thin(state)[2] for _ in range(2000)]
    assert all(acc)
    state = initial_state(p, InitialCondition(lambda0=0.0, m0=1.0), 4)
    acc = np.array([propose_and_thin(state)[2] for _ in range(40_000)])
    assert abs(acc.mean() - 0.5) < 4 * math.sqrt(0.25 / acc.size)


def test_candidate_times_increase_and_particles_are_uniform():
    p = ModelParams(1.0, 0.0, 0.3, 8)
    state = initial_state(p, InitialCondition(), 5)
    times, idx = [], []
    for _ in range(16_000):
        t, i, acc = propose_and_thin(state)
        times.append(t)
        idx.append(i)
        if acc:
            apply_flip(state, i)
    assert np.all(np.diff(times) > 0)
    counts = np.bincount(idx, minlength=8)
    assert np.all(np.abs(counts - 2000) < 5 * math.sqrt(2000))
    # mean holding time of a rate-2N clock
    assert np.mean(np.diff(times)) == pytest.approx(1 / 16, rel=0.05)


def test_single_particle_kick():
    p = ModelParams(0.0, 3.0, 0.0, 1)
    state, i = _accepted_state(p, InitialCondition(lambda0=0.0, spins=np.array([1])))
    before = state.lambdas()[0]
    apply_flip(state, i)
    assert state.lambdas()[0] - before == pytest.approx(6.0, abs=1e-14)
    assert state.spins[0] == -1


@pytest.mark.parametrize("sigma", [0.0, 0.5])
def test_kick_is_uniform_across_particles(sigma):
    p = ModelParams(2.0, 1.5, sigma, 50)
    state, i = _accepted_state(p, InitialCondition(lambda0=1.0), seed=9)
    s = state.spins[i]
    before = state.lambdas()
    m_before = empirical_magnetization(state)
    apply_flip(state, i)
    diff = state.lambdas() - before
    assert np.max(np.abs(diff - 2 * 1.5 * s / 50)) < 1e-14
    assert empirical_magnetization(state) - m_before == pytest.approx(-2 * s / 50, abs=1e-15)


def test_no_interaction_leaves_common_field_alone():
    p = ModelParams(1.0, 0.0, 0.2, 10)
    state, i = _accepted_state(p, InitialCondition(), seed=2)
    c = state.common_field
    apply_flip(state, i)
    assert state.common_field == c


def test_apply_flip_requires_synchronization():
    p = ModelParams(1.0, 1.0, 0.2, 10)
    state = initial_state(p, InitialCondition(), 0)
    with pytest.raises(NumericalError):
        apply_flip(state, 0)


def test_empirical_magnetization_examples():
    p = ModelParams(1, 1, 0, 4)
    assert empirical_magnetization(initial_state(p, InitialCondition(spins=np.array([1, 1, 1, 1])), 0)) == 1
    assert empirical_magnetization(initial_state(p, InitialCondition(spins=np.array([1, -1, 1, -1])), 0)) == 0
    assert empirical_magnetization(initial_state(p, InitialCondition(spins=np.array([1, 1, 1, -1])), 0)) == 0.5


def test_initial_condition_validation():
    with pytest.raises(DomainError):
        InitialCondition(m0=1.5)
    with pytest.raises(DomainError):
        initial_state(ModelParams(1, 1, 0, 3), InitialCondition(spins=np.array([1, 0, 1])), 0)


def test_simulate_validation():
    p = ModelParams(1, 1, 0, 3)
    with pytest.raises(DomainError):
        simulate(p, horizon=0.0)
    with pytest.raises(DomainError):
        simulate(p, horizon=1.0, cadence=-1.0)


def test_record_schema_and_determinism():
    p = ModelParams(3.0, 1.0, 0.1, 300)
    a = simulate(p, InitialCondition(), 2.0, 0.25, seed=42).record
    b = simulate(p, InitialCondition(), 2.0, 0.25, seed=42).record
    assert a.header == PARTICLE_HEADER
    assert np.allclose(a.t, np.arange(9) * 0.25)
    for h in PARTICLE_HEADER:
        assert np.array_equal(a[h], b[h])
    c = simulate(p, InitialCondition(), 2.0, 0.25, seed=43).record
    assert not np.array_equal(a["m"], c["m"])


def test_chaining_continues_the_clock():
    p = ModelParams(3.0, 1.0, 0.1, 100)
    run = simulate(p, InitialCondition(), 1.0, 0.5, seed=1)
    more = simulate(p, horizon=1.0, cadence=0.5, state=run.state)
    assert more.record.t[0] == 1.0 and more.record.t[-1] == 2.0
    assert more.record["flips"][0] == run.record["flips"][-1]


def test_noiseless_identical_intensities_stay_identical():
    p = ModelParams(3.0, 3.0, 0.0, 500)
    run = simulate(p, InitialCondition(lambda0=3.0), 5.0, 1.0, seed=3)
    assert np.all(run.record["lambda_var"] < 1e-28)  # mean of equal values may be off by an ulp
    lam = run.state.lambdas()
    assert np.all(lam == lam[0])


def test_independent_flippers_relax_like_two_state_chain():
    # beta = sigma = 0, lambda0 = 0: each spin flips at rate 1, so E m(t) = m(0) e^{-2t}
    n, reps = 2000, 4
    p = ModelParams(1.0, 0.0, 0.0, n)
    t = np.arange(0, 1.01, 0.25)
    ms = np.array([simulate(p, InitialCondition(0.0, 1.0), 1.0, 0.25, seed=s).record["m"]
                   for s in range(reps)])
    mean = ms.mean(axis=0)
    sd = np.sqrt((1 - np.exp(-4 * t)) / (n * reps))
    assert np.all(np.abs(mean - np.exp(-2 * t)) <= 4 * sd + 1e-12)


def test_spin_sum_bookkeeping_over_a_million_candidates():
    p = ModelParams(3.0, 1.0, 0.1, 100)
    run = simulate(p, InitialCondition(), 5000.0, 5000.0, seed=8)
    assert run.log.proposed >= 1_000_000
    assert run.state.spin_sum == sum(run.state.spins)
    assert abs(empirical_magnetization(run.state) - np.mean(run.state.spins)) < 1e-12
    assert 0.0 <= run.log.acceptance_ratio <= 1.0


def test_acceptance_ratio_matches_fixed_step_oracle():
    # accepted/proposed equals the time-averaged (1 + tanh(s lambda))/2; the Euler scheme
    # estimates the same average as flips / (2 N T).
    p = ModelParams(3.0, 1.0, 0.1, 50)
    init = InitialCondition()
    proposed = accepted = 0
    for seed in range(200):
        lg = simulate(p, init, 5.0, 5.0, seed=seed).log
        proposed += lg.proposed
        accepted += lg.accepted
    thin = accepted / proposed
    flips, _ = simulate_reference_euler(p, init, 5.0, 1e-3, seed=1, replicas=200)
    euler = flips.mean() / (2 * 50 * 5.0)
    se = flips.std() / math.sqrt(flips.size) / (2 * 50 * 5.0)
    assert abs(thin - euler) < 4 * se + 2e-3  # 2e-3: O(dt) bias of the flip coin


def test_euler_noiseless_decay_is_geometric():
    p = ModelParams(3.0, 0.0, 0.0, 5)
    dt = 1e-3
    rec = simulate_reference_euler(p, InitialCondition(lambda0=2.0), 1.0, dt, seed=0, cadence=0.5)
    expected = 2.0 * (1 - 3.0 * dt) ** np.round(rec.t / dt)
    assert np.allclose(rec["lambda_mean"], expected, rtol=1e-12)
    assert abs(rec["lambda_mean"][-1] - 2.0 * math.exp(-3.0)) < 3.0 * dt


def test_euler_refuses_large_steps_and_is_deterministic():
    p = ModelParams(1.0, 1.0, 0.5, 4)
    with pytest.raises(DomainError):
        simulate_reference_euler(p, horizon=1.0, dt=0.05)
    a = simulate_reference_euler(p, horizon=1.0, dt=0.01, seed=5)
    b = simulate_reference_euler(p, horizon=1.0, dt=0.01, seed=5)
    assert all(np.array_equal(a[h], b[h]) for h in PARTICLE_HEADER)


def test_euler_flip_counts_converge_to_thinning_as_dt_shrinks():
    thin = n2_flip_counts("thinning")
    coarse = n2_flip_counts("euler", dt=0.04)
    mid = n2_flip_counts("euler", dt=0.01)
    fine = n2_flip_counts("euler")
    d = [ks_distance(thin, c) for c in (coarse, mid, fine)]
    assert d[0] > d[1] > d[2]


def test_noise_streams_are_reproducible():
    a, b = NoiseStreams(7, 10, block=16), NoiseStreams(7, 10, block=16)
    assert [a.next_event() for _ in range(40)] == [b.next_event() for _ in range(40)]
    assert np.array_equal(a.normals(33), b.normals(33))
    assert a.consumed_events == 40 and a.consumed_normals == 33


def _lna_rhs(alpha, beta):
    # mean flow plus the linear-noise covariance of sqrt(N) (m_N - m, lambda_N - lambda)
    def rhs(t, z):
        m, lam = z[:2]
        cov = z[2:].reshape(2, 2)
        d = m + math.tanh(lam)
        s2 = 1.0 / math.cosh(lam) ** 2
        J = np.array([[-2.0, -2.0 * s2], [2 * beta, 2 * beta * s2 - alpha]])
        D = np.array([[4.0, -4.0 * beta], [-4.0 * beta, 4.0 * beta**2]]) * (1.0 + m * math.tanh(lam))
        return np.concatenate([[-2.0 * d, 2.0 * beta * d - alpha * lam], (J @ cov + cov @ J.T + D).ravel()])
    return rhs


def test_noiseless_fluctuations_match_linear_noise_covariance():
    from scipy.integrate import solve_ivp

    alpha, beta, n, reps = 3.0, 3.0, 10_000, 64
    rhs = _lna_rhs(alpha, beta)
    times = np.array([1.0, 2.0, 5.0])
    dev = []
    for seed in range(reps):
        rec = simulate(ModelParams(alpha, beta, 0.0, n), InitialCondition(3.0, 0.0), 5.0, 0.5,
                       seed=100 + seed).record
        z0 = [rec["m"][0], rec["lambda_mean"][0], 0, 0, 0, 0]
        det = solve_ivp(rhs, (0, 5), z0, t_eval=times, rtol=1e-10, atol=1e-12).y
        idx = np.searchsorted(rec.t, times - 1e-9)
        dev.append(math.sqrt(n) * np.array([rec["m"][idx] - det[0], rec["lambda_mean"][idx] - det[1]]))
    dev = np.array(dev)
    lna = solve_ivp(rhs, (0, 5), [0, 3, 0, 0, 0, 0], t_eval=times, rtol=1e-10, atol=1e-12).y
    # the sample sd of 64 Gaussians has relative sd ~ 1/sqrt(128): allow about 3.4 of those
    assert np.allclose(dev[:, 0].std(0), np.sqrt(lna[2]), rtol=0.3)
    assert np.allclose(dev[:, 1].std(0), np.sqrt(lna[5]), rtol=0.3)
