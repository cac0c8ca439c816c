"""N-particle jump-diffusion simulated exactly in law by Poisson thinning.

Each intensity is split as lambda_i(t) = xi_i(t) + c(t): xi_i is a private
Ornstein-Uhlenbeck process and c is a common field that receives every
mean-field kick 2*beta*s_j/N and decays like exp(-alpha t) between flips.
Because the kick is the same for all particles, a flip costs O(1) and each
xi_i is only synchronized (by its exact OU transition) when particle i is
proposed or an observation is taken.

Candidate events come from a global clock of rate 2N with a uniformly chosen
particle and a mark u uniform on (0, 2); the candidate is accepted iff
u < 1 + tanh(s_i lambda_i).  Random numbers are consumed in an order that does
not depend on the state, so two runs with the same seed see the same clock,
marks and Brownian increments.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import DomainError, ModelParams, NumericalError
from .records import RunRecord

PARTICLE_HEADER = ("t", "m", "lambda_mean", "lambda_var", "flips")

# Upper bound of the thinning envelope, per particle.
ENVELOPE = 2.0


def ou_moments(dt, params: ModelParams):
    """Mean factor and standard deviation of the exact OU transition over ``dt``."""
    dt = np.asarray(dt, dtype=float)
    if np.any(dt < 0):
        raise DomainError("OU transition needs dt >= 0")
    a = np.exp(-params.alpha * dt)
    if params.alpha > 0:
        var = params.sigma**2 * -np.expm1(-2.0 * params.alpha * dt) / (2.0 * params.alpha)
    else:
        var = params.sigma**2 * dt
    return a, np.sqrt(var)


def ou_transition(xi, dt, params: ModelParams, rng: np.random.Generator):
    """Sample xi(t + dt) given xi(t) for d xi = -alpha xi dt + sigma dB."""
    a, sd = ou_moments(dt, params)
    xi = np.asarray(xi, dtype=float)
    z = rng.standard_normal(np.broadcast(xi, a).shape)
    out = a * xi + sd * z
    return float(out) if out.ndim == 0 else out


def seed_sequence(seed) -> np.random.SeedSequence:
    """Accept an int seed (or None) or an already spawned SeedSequence."""
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


class NoiseStreams:
    """Buffered draws from the two generators that drive a run.

    ``events`` yields candidate holding times (standard exponentials), particle
    indices and thinning marks; ``diffusion`` yields the Gaussian increments of
    the private OU parts.  Both are spawned from one ``SeedSequence``.
    """

    def __init__(self, seed, n_particles: int, block: int = 4096):
        seq = seed_sequence(seed)
        init_seq, event_seq, diff_seq = seq.spawn(3)
        self.init = np.random.Generator(np.random.PCG64(init_seq))
        self.events = np.random.Generator(np.random.PCG64(event_seq))
        self.diffusion = np.random.Generator(np.random.PCG64(diff_seq))
        self.n = n_particles
        self.block = int(block)
        self._ev = ([], [], [])
        self._ev_pos = 0
        self._z = []
        self._z_pos = 0
        self.consumed_events = 0
        self.consumed_normals = 0

    def refill_events(self):
        b = self.block
        self._ev = (
            self.events.standard_exponential(b).tolist(),
            self.events.integers(0, self.n, b).tolist(),
            (ENVELOPE * self.events.random(b)).tolist(),
        )
        self._ev_pos = 0

    def next_event(self):
        if self._ev_pos >= len(self._ev[0]):
            self.refill_events()
        k = self._ev_pos
        self._ev_pos = k + 1
        self.consumed_events += 1
        return self._ev[0][k], self._ev[1][k], self._ev[2][k]

    def next_normal(self) -> float:
        if self._z_pos >= len(self._z):
            self._z = self.diffusion.standard_normal(self.block).tolist()
            self._z_pos = 0
        z = self._z[self._z_pos]
        self._z_pos += 1
        self.consumed_normals += 1
        return z

    def normals(self, n: int) -> np.ndarray:
        out = np.empty(n)
        k = 0
        while k < n:
            if self._z_pos >= len(self._z):
                self._z = self.diffusion.standard_normal(max(self.block, n - k)).tolist()
                self._z_pos = 0
            take = min(n - k, len(self._z) - self._z_pos)
            out[k:k + take] = self._z[self._z_pos:self._z_pos + take]
            self._z_pos += take
            k += take
        self.consumed_normals += n
        return out


@dataclass
class EventLog:
    times: list = field(default_factory=list)
    particles: list = field(default_factory=list)
    spins_before: list = field(default_factory=list)
    proposed: int = 0
    accepted: int = 0

    @property
    def acceptance_ratio(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


@dataclass
class InitialCondition:
    """Point-mass intensity lambda0 and i.i.d. spins with mean m0, unless explicit arrays are given."""

    lambda0: float = 3.0
    m0: float = 0.0
    spins: np.ndarray | None = None
    lambdas: np.ndarray | None = None

    def __post_init__(self):
        if not -1.0 <= self.m0 <= 1.0:
            raise DomainError(f"m0 must lie in [-1, 1], got {self.m0}")
        if not math.isfinite(self.lambda0):
            raise DomainError("lambda0 must be finite")

    def sample(self, n: int, rng: np.random.Generator):
        if self.spins is not None:
            spins = np.asarray(self.spins, dtype=np.int64)
            if spins.shape != (n,) or not np.all(np.abs(spins) == 1):
                raise DomainError("explicit spins must be an array of N values in {-1, +1}")
        else:
            up = rng.random(n) < (1.0 + self.m0) / 2.0
            spins = np.where(up, 1, -1)
        if self.lambdas is not None:
            lam = np.asarray(self.lambdas, dtype=float)
            if lam.shape != (n,) or not np.all(np.isfinite(lam)):
                raise DomainError("explicit intensities must be N finite values")
        else:
            lam = np.full(n, float(self.lambda0))
        return spins, lam


@dataclass
class ParticleState:
    params: ModelParams
    time: float
    spins: list
    xi: list
    xi_sync_time: list
    common_field: float
    common_time: float
    spin_sum: int
    streams: NoiseStreams
    flips: int = 0
    log: EventLog = field(default_factory=EventLog)
    keep_events: bool = False
    # particle whose xi and the common field are synchronized to ``time``; None
    # once the clock has moved on.
    synced: int | None = None

    @property
    def n(self) -> int:
        return len(self.spins)

    def common_at(self, t: float) -> float:
        return self.common_field * math.exp(-self.params.alpha * (t - self.common_time))

    def spin_array(self) -> np.ndarray:
        return np.array(self.spins, dtype=np.int64)

    def lambdas(self) -> np.ndarray:
        """Intensities at ``self.time`` without consuming randomness (xi at last sync, decayed mean)."""
        if self.params.sigma == 0:
            xi = np.array(self.xi) * math.exp(-self.params.alpha * self.time)
        else:
            xi = np.array(self.xi) * np.exp(-self.params.alpha * (self.time - np.array(self.xi_sync_time)))
        return xi + self.common_at(self.time)


def initial_state(params: ModelParams, init: InitialCondition, seed, keep_events=False) -> ParticleState:
    n = params.n_particles
    streams = NoiseStreams(seed, n)
    spins, lam = init.sample(n, streams.init)
    return ParticleState(
        params=params,
        time=0.0,
        spins=[int(s) for s in spins],
        xi=lam.tolist(),
        xi_sync_time=[0.0] * n,
        common_field=0.0,
        common_time=0.0,
        spin_sum=int(spins.sum()),
        streams=streams,
        keep_events=keep_events,
    )


def empirical_magnetization(state: ParticleState) -> float:
    return state.spin_sum / state.n


def _sync_particle(state: ParticleState, i: int, t: float) -> float:
    """Bring xi_i and the common field to time t; return lambda_i(t)."""
    p = state.params
    if p.sigma == 0:
        xi = state.xi[i] * math.exp(-p.alpha * t)
    else:
        dt = t - state.xi_sync_time[i]
        a = math.exp(-p.alpha * dt)
        if p.alpha > 0:
            sd = p.sigma * math.sqrt(-math.expm1(-2.0 * p.alpha * dt) / (2.0 * p.alpha))
        else:
            sd = p.sigma * math.sqrt(dt)
        xi = a * state.xi[i] + sd * state.streams.next_normal()
        state.xi[i] = xi
        state.xi_sync_time[i] = t
    state.common_field = state.common_at(t)
    state.common_time = t
    return xi + state.common_field


def propose_and_thin(state: ParticleState):
    """Draw the next candidate event and decide whether it is accepted.

    Returns ``(candidate_time, particle_index, accepted)``.  The state's clock
    is advanced and the proposed particle synchronized; an accepted candidate
    must be followed by :func:`apply_flip` before the next proposal.
    """
    e, i, u = state.streams.next_event()
    t = state.time + e / (ENVELOPE * state.n)
    lam = _sync_particle(state, i, t)
    state.time = t
    state.synced = i
    state.log.proposed += 1
    rate = 1.0 + math.tanh(state.spins[i] * lam)
    if not 0.0 <= rate <= ENVELOPE:
        raise NumericalError(f"flip rate {rate} escaped the thinning envelope")
    return t, i, u < rate


def apply_flip(state: ParticleState, i: int) -> ParticleState:
    if state.synced != i or state.common_time != state.time:
        raise NumericalError(f"particle {i} is not synchronized to the current clock")
    s = state.spins[i]
    state.spins[i] = -s
    state.spin_sum -= 2 * s
    state.common_field += 2.0 * state.params.beta * s / state.n
    state.flips += 1
    state.log.accepted += 1
    if state.keep_events:
        state.log.times.append(state.time)
        state.log.particles.append(i)
        state.log.spins_before.append(s)
    return state


def _observe(state: ParticleState, t: float):
    """Synchronize every particle to ``t`` and return (m, mean lambda, var lambda)."""
    p = state.params
    if p.sigma == 0:
        lam = np.array(state.xi) * math.exp(-p.alpha * t)
    else:
        sync = np.array(state.xi_sync_time)
        a, sd = ou_moments(t - sync, p)
        lam = a * np.array(state.xi) + sd * state.streams.normals(state.n)
        state.xi = lam.tolist()
        state.xi_sync_time = [t] * state.n
    c = state.common_at(t)
    lam = lam + c
    if not np.all(np.isfinite(lam)):
        raise NumericalError(f"non-finite intensity at t={t}")
    return state.spin_sum / state.n, float(lam.mean()), float(lam.var())


def _obs_times(t0: float, horizon: float, cadence: float) -> list[float]:
    k = int(math.floor(horizon / cadence + 1e-9))
    times = [t0 + j * cadence for j in range(k + 1)]
    if t0 + horizon - times[-1] > 1e-9 * max(1.0, horizon):
        times.append(t0 + horizon)
    return times


@dataclass
class ParticleRun:
    record: RunRecord
    state: ParticleState

    @property
    def log(self) -> EventLog:
        return self.state.log


def simulate(params: ModelParams, init: InitialCondition | None = None, horizon: float = 1.0,
             cadence: float = 0.1, seed=0, *, state: ParticleState | None = None,
             keep_events: bool = False) -> ParticleRun:
    """Run the thinning simulator for ``horizon`` time units.

    Observables are emitted every ``cadence`` (plus the final time).  Passing
    the ``state`` of a previous run continues it; ``init`` and ``seed`` are then
    ignored.
    """
    if not horizon > 0:
        raise DomainError(f"horizon must be positive, got {horizon}")
    if not cadence > 0:
        raise DomainError(f"cadence must be positive, got {cadence}")
    if state is None:
        state = initial_state(params, init or InitialCondition(), seed, keep_events)
        n_expected = ENVELOPE * params.n_particles * horizon
        state.streams.block = int(min(65536, max(64, 1.1 * n_expected + 16)))
    params = state.params
    t0 = state.time
    t_end = t0 + horizon
    obs = _obs_times(t0, horizon, cadence)
    rows = []

    # Hot loop: the body of propose_and_thin + apply_flip with locals hoisted.
    streams = state.streams
    spins, xi, sync = state.spins, state.xi, state.xi_sync_time
    n = state.n
    alpha, sigma = params.alpha, params.sigma
    kick = 2.0 * params.beta / n
    clock_rate = ENVELOPE * n
    ou_scale = sigma / math.sqrt(2.0 * alpha) if alpha > 0 else 0.0
    noiseless = sigma == 0
    exp, tanh, sqrt, expm1 = math.exp, math.tanh, math.sqrt, math.expm1
    next_event, next_normal = streams.next_event, streams.next_normal
    keep = state.keep_events
    log = state.log

    t = state.time
    c, tc = state.common_field, state.common_time
    spin_sum, flips = state.spin_sum, state.flips
    proposed = accepted = 0
    k_obs = 0

    def flush():
        state.time, state.common_field, state.common_time = t, c, tc
        state.spin_sum, state.flips = spin_sum, flips
        log.proposed += proposed
        log.accepted += accepted

    while True:
        e, i, u = next_event()
        t_new = t + e / clock_rate
        while k_obs < len(obs) and obs[k_obs] <= min(t_new, t_end):
            flush()
            proposed = accepted = 0
            m, lm, lv = _observe(state, obs[k_obs])
            xi, sync = state.xi, state.xi_sync_time
            c, tc = state.common_field, state.common_time
            rows.append((obs[k_obs], m, lm, lv, flips))
            k_obs += 1
        if t_new > t_end:
            # Memorylessness: dropping the overshooting candidate keeps the law exact.
            t = t_end
            break
        t = t_new
        if noiseless:
            lam_i = xi[i] * exp(-alpha * t)
        else:
            dt = t - sync[i]
            if alpha > 0:
                x = exp(-alpha * dt) * xi[i] + ou_scale * sqrt(-expm1(-2.0 * alpha * dt)) * next_normal()
            else:
                x = xi[i] + sigma * sqrt(dt) * next_normal()
            xi[i] = x
            sync[i] = t
            lam_i = x
        c *= exp(-alpha * (t - tc))
        tc = t
        proposed += 1
        s = spins[i]
        if u < 1.0 + tanh(s * (lam_i + c)):
            spins[i] = -s
            spin_sum -= 2 * s
            c += kick * s
            flips += 1
            accepted += 1
            if keep:
                log.times.append(t)
                log.particles.append(i)
                log.spins_before.append(s)

    flush()
    state.synced = None
    record = RunRecord.from_rows(PARTICLE_HEADER, rows, engine="particles")
    return ParticleRun(record, state)


def simulate_reference_euler(params: ModelParams, init: InitialCondition | None = None,
                             horizon: float = 1.0, dt: float = 1e-3, seed=0, *,
                             cadence: float | None = None, replicas: int = 1):
    """Fixed-step reference scheme: flip with probability rate*dt, Euler-Maruyama for lambda.

    Returns a :class:`RunRecord` for a single replica, or for ``replicas > 1`` a
    tuple ``(final flip counts, final magnetizations)`` over independent replicas.
    """
    if not horizon > 0:
        raise DomainError(f"horizon must be positive, got {horizon}")
    if not dt > 0 or ENVELOPE * dt >= 0.1:
        raise DomainError(f"dt={dt} too large: need 2*dt < 0.1 to keep the flip-coin bias small")
    init = init or InitialCondition()
    n = params.n_particles
    seq = seed_sequence(seed)
    init_seq, step_seq = seq.spawn(2)
    rng0 = np.random.Generator(np.random.PCG64(init_seq))
    rng = np.random.Generator(np.random.PCG64(step_seq))
    spins = np.empty((replicas, n))
    lam = np.empty((replicas, n))
    for r in range(replicas):
        s, l0 = init.sample(n, rng0)
        spins[r], lam[r] = s, l0
    n_steps = int(round(horizon / dt))
    if abs(n_steps * dt - horizon) > 1e-9 * horizon:
        raise DomainError("horizon must be an integer multiple of dt")
    cadence = cadence or horizon
    every = max(1, int(round(cadence / dt)))
    flips = np.zeros(replicas, dtype=np.int64)
    kick = 2.0 * params.beta / n
    sq = params.sigma * math.sqrt(dt)
    rows = []

    def observe(k):
        rows.append((k * dt, spins[0].mean(), lam[0].mean(), lam[0].var(), flips[0]))

    observe(0)
    for k in range(1, n_steps + 1):
        u = rng.random((replicas, n))
        flip = u < (1.0 + np.tanh(spins * lam)) * dt
        shift = kick * np.where(flip, spins, 0.0).sum(axis=1, keepdims=True)
        lam = lam - params.alpha * lam * dt + shift
        if sq > 0:
            lam = lam + sq * rng.standard_normal((replicas, n))
        spins = np.where(flip, -spins, spins)
        flips += flip.sum(axis=1)
        if replicas == 1 and (k % every == 0 or k == n_steps):
            observe(k)
    if replicas == 1:
        return RunRecord.from_rows(PARTICLE_HEADER, rows, engine="euler")
    return flips, spins.mean(axis=1)


def thinning_flip_counts(params: ModelParams, init: InitialCondition | None, horizon: float,
                         replicas: int, seed=0) -> np.ndarray:
    """Total flip counts over ``[0, horizon]`` from independent thinning replicas."""
    children = seed_sequence(seed).spawn(replicas)
    out = np.empty(replicas, dtype=np.int64)
    for r, child in enumerate(children):
        out[r] = simulate(params, init, horizon, horizon, child).state.flips
    return out
