"""Exact simulation of the N-particle momentum-conserving collision process.

The dynamics is the Markov jump process in which each unordered pair {i, j}
collides at rate lambda(v_i, v_j)/N and the outgoing pair is drawn from the
kernel's normalized collision rate. Time-inhomogeneous bounded-rate variants
are simulated by thinning. The log-likelihood of exponential rate tilts along
a recorded trajectory is evaluated in closed form over inter-event intervals.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .densities import VelocityDensity
from .errors import BoundViolationError, ConfigurationError
from .kernels import (CollisionKernel, conserving_partner,
                      gauss_hermite_wprime_integral, gaussian_density,
                      outgoing_pair, SQRT2)

_ROW_SUM_REFRESH = 4096  # events between full row-sum recomputations


# -- states and records ------------------------------------------------------

class ParticleState:
    """N velocities with cached pair rates.

    pair_rates[i, j] = lambda(v_i, v_j) with zero diagonal; total_rate is the
    generator normalization (1/N) * sum over unordered pairs.
    """

    def __init__(self, velocities: np.ndarray, kernel: CollisionKernel,
                 time: float = 0.0):
        velocities = np.array(velocities, dtype=float)
        if velocities.ndim != 2 or velocities.shape[0] < 2:
            raise ConfigurationError("need at least 2 particles, shape (N, d)")
        self.time = float(time)
        self.velocities = velocities
        self.kernel = kernel
        self.pair_rates = self._full_pair_rates()
        self.row_sums = self.pair_rates.sum(axis=1)

    def _full_pair_rates(self) -> np.ndarray:
        v = self.velocities
        rates = np.asarray(self.kernel.scattering_rate(v[:, None, :], v[None, :, :]),
                           dtype=float)
        np.fill_diagonal(rates, 0.0)
        return rates

    @property
    def n_particles(self) -> int:
        return self.velocities.shape[0]

    @property
    def dim(self) -> int:
        return self.velocities.shape[1]

    @property
    def total_rate(self) -> float:
        return float(self.row_sums.sum()) / (2.0 * self.n_particles)

    def momentum(self) -> np.ndarray:
        return self.velocities.sum(axis=0)

    def check_invariants(self, momentum_tol: float = 1e-9):
        n = self.n_particles
        mom = np.max(np.abs(self.momentum()))
        if mom > momentum_tol * n:
            raise ConfigurationError(f"total momentum {mom:.3e} exceeds "
                                     f"{momentum_tol:.1e}*N")
        fresh = self._full_pair_rates()
        total_fresh = fresh.sum() / (2.0 * n)
        if abs(self.total_rate - total_fresh) > 1e-10 * max(total_fresh, 1e-300):
            raise ConfigurationError("cached total rate inconsistent")

    def copy(self) -> "ParticleState":
        out = object.__new__(ParticleState)
        out.time = self.time
        out.velocities = self.velocities.copy()
        out.kernel = self.kernel
        out.pair_rates = self.pair_rates.copy()
        out.row_sums = self.row_sums.copy()
        return out


@dataclass(frozen=True)
class CollisionEvent:
    """One collision: pair indices i < j, incoming and outgoing velocities."""

    t: float
    i: int
    j: int
    v_in: tuple          # (v_i, v_j) before the jump
    v_out: tuple         # (v_i, v_j) after the jump

    def as_json(self) -> str:
        return json.dumps({"t": self.t, "i": self.i, "j": self.j,
                           "in": [list(self.v_in[0]), list(self.v_in[1])],
                           "out": [list(self.v_out[0]), list(self.v_out[1])]})

    @classmethod
    def from_json(cls, line: str) -> "CollisionEvent":
        d = json.loads(line)
        return cls(t=d["t"], i=d["i"], j=d["j"],
                   v_in=(np.array(d["in"][0]), np.array(d["in"][1])),
                   v_out=(np.array(d["out"][0]), np.array(d["out"][1])))


@dataclass
class Trajectory:
    """Initial configuration plus the ordered collision log up to the horizon."""

    initial_time: float
    initial_velocities: np.ndarray
    events: list
    horizon: float

    @property
    def n_particles(self) -> int:
        return self.initial_velocities.shape[0]

    def intervals(self) -> Iterator[tuple]:
        """Yield (t_start, t_end, velocities) over the piecewise-constant path."""
        v = self.initial_velocities.copy()
        t = self.initial_time
        for ev in self.events:
            yield t, ev.t, v
            v[ev.i] = ev.v_out[0]
            v[ev.j] = ev.v_out[1]
            t = ev.t
        yield t, self.horizon, v

    def final_velocities(self) -> np.ndarray:
        for *_unused, v in self.intervals():
            pass
        return v

    def replay_check(self):
        """Verify the recorded incoming velocities against a replay, bitwise."""
        v = self.initial_velocities.copy()
        last_t = self.initial_time
        for ev in self.events:
            if not (ev.t > last_t):
                raise ConfigurationError("event times not strictly increasing")
            if not (np.array_equal(v[ev.i], ev.v_in[0])
                    and np.array_equal(v[ev.j], ev.v_in[1])):
                raise ConfigurationError(f"replay mismatch at t={ev.t}")
            v[ev.i] = ev.v_out[0]
            v[ev.j] = ev.v_out[1]
            last_t = ev.t

    def initial_json(self) -> str:
        return json.dumps({"time": self.initial_time,
                           "velocities": self.initial_velocities.tolist()})

    def max_momentum_drift(self) -> float:
        p0 = self.initial_velocities.sum(axis=0)
        worst = 0.0
        for *_unused, v in self.intervals():
            worst = max(worst, float(np.max(np.abs(v.sum(axis=0) - 0.0))))
        return max(worst, float(np.max(np.abs(p0))))


@dataclass
class FlowRecord:
    """Collision log viewed as the empirical flow, normalized by 1/N at query."""

    events: list
    n_particles: int
    horizon: float

    def mass(self) -> float:
        """Total flow mass: number of collisions over N."""
        return len(self.events) / self.n_particles

    def functional(self, fn: Callable) -> float:
        """(1/N) sum of fn(t, v, v*, v', v'*) over recorded collisions."""
        total = 0.0
        for ev in self.events:
            total += float(fn(ev.t, ev.v_in[0], ev.v_in[1],
                              ev.v_out[0], ev.v_out[1]))
        return total / self.n_particles

    def to_jsonl(self) -> str:
        return "".join(ev.as_json() + "\n" for ev in self.events)

    @classmethod
    def from_jsonl(cls, text: str, n_particles: int, horizon: float):
        events = [CollisionEvent.from_json(line)
                  for line in text.splitlines() if line.strip()]
        return cls(events=events, n_particles=n_particles, horizon=horizon)


# -- initial conditions -------------------------------------------------------

def sample_initial(density: VelocityDensity, n_particles: int, mode: str,
                   rng: np.random.Generator, kernel: CollisionKernel,
                   n_updates: Optional[int] = None,
                   step_scale: Optional[float] = None) -> ParticleState:
    """Sample N velocities from density^N conditioned on zero total momentum.

    gaussian_project subtracts the sample mean from an iid draw, which is the
    exact conditional law for an isotropic centered Gaussian. mcmc runs
    momentum-preserving pair-update Metropolis from an iid-centered start;
    the default budget of 50*N elementary pair updates is a heuristic.
    """
    if n_particles < 2:
        raise ConfigurationError("need at least 2 particles")
    if mode == "gaussian_project":
        if not density.is_gaussian:
            raise ConfigurationError(
                "gaussian_project requires a Gaussian density; use mode='mcmc'")
        v = density.sample(rng, n_particles)
        v -= v.mean(axis=0)
        return ParticleState(v, kernel)
    if mode != "mcmc":
        raise ConfigurationError(f"unknown initial sampling mode {mode!r}")

    v = density.sample(rng, n_particles)
    v -= v.mean(axis=0)
    budget = 50 * n_particles if n_updates is None else int(n_updates)
    if step_scale is None:
        step_scale = 0.7 * math.sqrt(density.second_moment() / density.dim)
    per_batch = n_particles // 2
    n_batches = max(1, math.ceil(budget / per_batch))
    logm = density.logpdf
    for _ in range(n_batches):
        perm = rng.permutation(n_particles)
        ii = perm[:per_batch]
        jj = perm[per_batch:2 * per_batch]
        xi = rng.normal(0.0, step_scale, size=(per_batch, density.dim))
        vi_new = v[ii] + xi
        vj_new = conserving_partner(v[ii] + v[jj], vi_new)
        log_ratio = (logm(vi_new) + logm(vj_new) - logm(v[ii]) - logm(v[jj]))
        accept = np.log(rng.uniform(size=per_batch)) <= log_ratio
        v[ii[accept]] = vi_new[accept]
        v[jj[accept]] = vj_new[accept]
    return ParticleState(v, kernel)


# -- homogeneous simulation ----------------------------------------------------

def simulate(state: ParticleState, kernel: CollisionKernel, horizon: float,
             rng: np.random.Generator):
    """Exact event-by-event simulation up to the horizon.

    Waiting times are exponential in the cached total rate; the colliding
    pair is selected proportionally to its rate with O(N) row bookkeeping
    per event. Returns the trajectory and its flow record; the input state
    is not modified.
    """
    if horizon < 0:
        raise ConfigurationError("horizon must be nonnegative")
    work = state.copy()
    t = work.time
    t_end = work.time + horizon
    events: list = []
    n = work.n_particles
    rates = work.pair_rates
    row_sums = work.row_sums
    v = work.velocities
    since_refresh = 0

    while True:
        total = float(row_sums.sum()) / (2.0 * n)
        if total <= 0.0:
            break
        t_next = t + rng.exponential(1.0 / total)
        if t_next > t_end:
            break
        t = t_next
        i, j = _select_pair(rng, rates, row_sums)
        vi, vj = v[i].copy(), v[j].copy()
        vp, vps = kernel.sample_outgoing(rng, vi, vj)
        a, b = (i, j) if i < j else (j, i)
        v_in = (vi, vj) if i < j else (vj, vi)
        v_out = (vp, vps) if i < j else (vps, vp)
        events.append(CollisionEvent(t=t, i=a, j=b, v_in=v_in, v_out=v_out))
        v[a] = v_out[0]
        v[b] = v_out[1]
        _update_pair_rows(kernel, v, rates, row_sums, a, b)
        since_refresh += 1
        if since_refresh >= _ROW_SUM_REFRESH:
            np.copyto(row_sums, rates.sum(axis=1))
            since_refresh = 0

    traj = Trajectory(initial_time=state.time,
                      initial_velocities=state.velocities.copy(),
                      events=events, horizon=t_end)
    flow = FlowRecord(events=events, n_particles=n, horizon=t_end)
    return traj, flow


def _select_pair(rng, rates, row_sums):
    """Ordered-pair selection proportional to rates[i, j]; unordered pairs
    are hit with probability proportional to their rate (each counted twice)."""
    cum = np.cumsum(row_sums)
    i = int(np.searchsorted(cum, rng.uniform() * cum[-1], side="right"))
    i = min(i, len(row_sums) - 1)
    row = rates[i]
    cum_row = np.cumsum(row)
    j = int(np.searchsorted(cum_row, rng.uniform() * cum_row[-1], side="right"))
    j = min(j, len(row) - 1)
    return i, j


def _update_pair_rows(kernel, v, rates, row_sums, a, b):
    n = v.shape[0]
    for idx in (a, b):
        new_row = np.asarray(kernel.scattering_rate(
            np.broadcast_to(v[idx], v.shape), v), dtype=float).copy()
        new_row[idx] = 0.0
        delta = new_row - rates[idx]
        rates[idx, :] = new_row
        rates[:, idx] = new_row
        row_sums += delta
        row_sums[idx] = new_row.sum()
    # rows a and b were both touched twice; recompute their sums exactly
    row_sums[a] = rates[a].sum()
    row_sums[b] = rates[b].sum()


# -- time-dependent kernels and thinning ----------------------------------------

class TimeDependentKernel:
    """Time-inhomogeneous collision kernel with a uniform rate bound."""

    rate_bound: float

    def rate(self, t, v, vstar):
        raise NotImplementedError

    def density(self, t, v, vstar, wprime):
        raise NotImplementedError

    def sample_wprime(self, t, rng, v, vstar):
        raise NotImplementedError


class HomogeneousTilt(TimeDependentKernel):
    """A time-independent kernel viewed as a (bounded) tilt."""

    def __init__(self, kernel: CollisionKernel, rate_bound: float):
        self.kernel = kernel
        self.rate_bound = float(rate_bound)

    def rate(self, t, v, vstar):
        return self.kernel.scattering_rate(v, vstar)

    def density(self, t, v, vstar, wprime):
        return self.kernel.density(v, vstar, wprime)

    def sample_wprime(self, t, rng, v, vstar):
        return self.kernel.sample_wprime(rng, v, vstar)[0]


class GaussianShapeTilt(TimeDependentKernel):
    """State-independent tilt c * N(0, width^2 I) in the outgoing coordinate."""

    def __init__(self, rate_const: float, width: float, dim: int):
        self.rate_const = float(rate_const)
        self.width = float(width)
        self.dim = int(dim)
        self.rate_bound = float(rate_const)

    def rate(self, t, v, vstar):
        return np.broadcast_to(
            self.rate_const, np.broadcast(np.asarray(v)[..., 0],
                                          np.asarray(vstar)[..., 0]).shape).copy()

    def density(self, t, v, vstar, wprime):
        out = self.rate_const * gaussian_density(wprime, var=self.width ** 2)
        return np.broadcast_to(out, np.broadcast(
            np.asarray(v)[..., 0], np.asarray(vstar)[..., 0], out).shape).copy()

    def sample_wprime(self, t, rng, v, vstar):
        return rng.normal(0.0, self.width, size=self.dim)


def simulate_tilted(state: ParticleState, tilt: TimeDependentKernel,
                    horizon: float, rng: np.random.Generator):
    """Thinning simulation of a bounded time-dependent collision rate.

    A homogeneous clock of total rate rate_bound*(N-1)/2 dominates the true
    pair rates; at each ring a uniform pair is accepted with probability
    rate/rate_bound. An observed rate above the bound aborts the run.
    """
    if horizon < 0:
        raise ConfigurationError("horizon must be nonnegative")
    n = state.n_particles
    v = state.velocities.copy()
    t = state.time
    t_end = state.time + horizon
    dominating = tilt.rate_bound * (n - 1) / 2.0
    events: list = []
    while dominating > 0.0:
        t_next = t + rng.exponential(1.0 / dominating)
        if t_next > t_end:
            break
        t = t_next
        i = int(rng.integers(n))
        j = int(rng.integers(n - 1))
        if j >= i:
            j += 1
        lam = float(tilt.rate(t, v[i], v[j]))
        if lam > tilt.rate_bound * (1.0 + 1e-9):
            raise BoundViolationError(
                f"rate {lam:.6g} exceeds declared bound {tilt.rate_bound:.6g} "
                f"at t={t:.6g}, v={v[i]}, v*={v[j]}")
        if rng.uniform() > lam / tilt.rate_bound:
            continue
        wp = tilt.sample_wprime(t, rng, v[i], v[j])
        vp, vps = outgoing_pair(v[i], v[j], wp)
        a, b = (i, j) if i < j else (j, i)
        v_in = (v[i].copy(), v[j].copy()) if i < j else (v[j].copy(), v[i].copy())
        v_out = (vp, vps) if i < j else (vps, vp)
        events.append(CollisionEvent(t=t, i=a, j=b, v_in=v_in, v_out=v_out))
        v[a] = v_out[0]
        v[b] = v_out[1]

    traj = Trajectory(initial_time=state.time,
                      initial_velocities=state.velocities.copy(),
                      events=events, horizon=t_end)
    flow = FlowRecord(events=events, n_particles=n, horizon=t_end)
    return traj, flow


# -- pair test functions and the tilt log-likelihood ----------------------------

class PairTestFunction:
    """Bounded test function F(t; v, v*, v', v'*), symmetric in each pair.

    Implementations must be piecewise constant in t between breakpoints()
    and should provide the tilted pair rate int r e^F when known in closed
    form; otherwise it falls back to w'-quadrature.
    """

    def breakpoints(self) -> Sequence[float]:
        return ()

    def __call__(self, t, v, vstar, vp, vpstar):
        raise NotImplementedError

    def tilted_rate(self, t, v, vstar, kernel: CollisionKernel):
        """lambda^F matrix for batched pairs; None requests quadrature."""
        return None


class ZeroPairFunction(PairTestFunction):
    def __call__(self, t, v, vstar, vp, vpstar):
        return np.zeros(np.broadcast(np.asarray(v)[..., 0],
                                     np.asarray(vstar)[..., 0]).shape)

    def tilted_rate(self, t, v, vstar, kernel):
        return kernel.scattering_rate(v, vstar)


class StepPairFunction(PairTestFunction):
    """F = gamma on [t_on, t_off), zero elsewhere; constant in velocities."""

    def __init__(self, gamma: float, t_on: float, t_off: float):
        self.gamma = float(gamma)
        self.t_on = float(t_on)
        self.t_off = float(t_off)

    def breakpoints(self):
        return (self.t_on, self.t_off)

    def _active(self, t):
        return self.t_on <= t < self.t_off

    def __call__(self, t, v, vstar, vp, vpstar):
        base = self.gamma if self._active(t) else 0.0
        return np.broadcast_to(base, np.broadcast(
            np.asarray(v)[..., 0], np.asarray(vstar)[..., 0]).shape).copy()

    def tilted_rate(self, t, v, vstar, kernel):
        factor = math.exp(self.gamma) if self._active(t) else 1.0
        return factor * np.asarray(kernel.scattering_rate(v, vstar), dtype=float)


class TiltLogRatio(PairTestFunction):
    """F = log of the tilted over the base collision density.

    The tilted pair rate is then exactly the tilt's own rate, so no
    quadrature is needed.
    """

    def __init__(self, tilt: TimeDependentKernel, kernel: CollisionKernel):
        self.tilt = tilt
        self.kernel = kernel

    def __call__(self, t, v, vstar, vp, vpstar):
        wp = (np.asarray(vp, dtype=float) - np.asarray(vpstar, dtype=float)) / SQRT2
        num = np.asarray(self.tilt.density(t, v, vstar, wp), dtype=float)
        den = np.asarray(self.kernel.density(v, vstar, wp), dtype=float)
        return np.log(num) - np.log(den)

    def tilted_rate(self, t, v, vstar, kernel):
        return self.tilt.rate(t, v, vstar)


def _pair_rate_matrix(fn: PairTestFunction, t, v, kernel) -> np.ndarray:
    """lambda^F over all ordered particle pairs at time t."""
    vi = v[:, None, :]
    vj = v[None, :, :]
    closed = fn.tilted_rate(t, vi, vj, kernel)
    if closed is not None:
        return np.asarray(closed, dtype=float)

    def integrand(wp):
        vp, vps = outgoing_pair(vi[..., None, :], vj[..., None, :], wp)
        b = kernel.density(vi[..., None, :], vj[..., None, :], wp)
        return b * np.exp(fn(t, vi[..., None, :], vj[..., None, :], vp, vps))

    return gauss_hermite_wprime_integral(integrand, kernel.dim,
                                         kernel.envelope.decay,
                                         rel_tol=kernel.quad_rel_tol)


def girsanov_log_likelihood(traj: Trajectory, flow: FlowRecord,
                            fn: PairTestFunction,
                            kernel: CollisionKernel) -> float:
    """Log of the exponential tilt functional along a trajectory.

    Equals N*Q^N(F) minus the integrated compensator
    (1/N) sum over unordered pairs of (lambda^F - lambda); between collisions
    the integrand is constant, so the time integral is a finite sum split at
    the test function's breakpoints. For bounded F and rates, exp of this is
    a mean-one martingale.
    """
    n = flow.n_particles
    jump_sum = n * flow.functional(fn)

    comp = 0.0
    breaks = sorted(b for b in fn.breakpoints())
    for t0, t1, v in traj.intervals():
        if t1 <= t0:
            continue
        cuts = [t0] + [b for b in breaks if t0 < b < t1] + [t1]
        lam = np.asarray(kernel.scattering_rate(v[:, None, :], v[None, :, :]),
                         dtype=float)
        for a, b in zip(cuts[:-1], cuts[1:]):
            lam_f = _pair_rate_matrix(fn, a, v, kernel)
            diff = lam_f - lam
            unordered = 0.5 * (diff.sum() - np.trace(diff))
            comp += (b - a) * unordered / n
    return float(jump_sum - comp)
