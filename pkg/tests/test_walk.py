"""Simulation, tilted simulation, and tilt log-likelihoods."""

import math

import numpy as np
import pytest
from scipy import stats

from kacflow import densities, kernels, walk
from kacflow.errors import BoundViolationError, ConfigurationError

RNG = lambda seed: np.random.default_rng(seed)


@pytest.fixture(scope="module")
def maxwell():
    return kernels.make_kernel("maxwell_sigma1", dim=1)


@pytest.fixture(scope="module")
def speedy():
    return kernels.make_kernel("paper_example", dim=1)


def test_gaussian_projection_zero_sum_and_variance(maxwell):
    rng = RNG(0)
    n_rep, n = 100_000, 4
    draws = rng.normal(size=(n_rep, n))
    draws -= draws.mean(axis=1, keepdims=True)
    per_rep = np.mean(draws ** 2, axis=1)
    se = per_rep.std(ddof=1) / math.sqrt(n_rep)
    # projection of an iid N(0,1) sample: per-coordinate variance 1 - 1/N
    assert abs(per_rep.mean() - 0.75) < 4.0 * se

    st = walk.sample_initial(densities.gaussian(1.0, 1), 4, "gaussian_project",
                             RNG(1), maxwell)
    assert np.max(np.abs(st.momentum())) < 1e-12


def test_gaussian_project_rejects_mixture(maxwell):
    bimodal = densities.symmetric_bimodal()
    with pytest.raises(ConfigurationError):
        walk.sample_initial(bimodal, 8, "gaussian_project", RNG(2), maxwell)


def test_mcmc_preserves_momentum(maxwell):
    bimodal = densities.symmetric_bimodal()
    st = walk.sample_initial(bimodal, 64, "mcmc", RNG(3), maxwell)
    assert np.max(np.abs(st.momentum())) <= 1e-12 * 64


def test_mcmc_matches_target_density(maxwell):
    # pooled single-particle marginal approaches the mixture for moderate N
    bimodal = densities.symmetric_bimodal(offset=1.5, sigma=0.5)
    rng = RNG(4)
    samples = []
    for _ in range(200):
        st = walk.sample_initial(bimodal, 32, "mcmc", rng, maxwell)
        samples.append(st.velocities[:, 0])
    pooled = np.concatenate(samples)
    # compare second and fourth moments to the mixture's
    m2 = bimodal.second_moment()
    assert abs(np.mean(pooled ** 2) - m2) < 0.05
    m4_target = 3 * 0.5**4 + 6 * 0.5**2 * 1.5**2 + 1.5**4
    assert abs(np.mean(pooled ** 4) - m4_target) < 0.35


def test_single_particle_rejected(maxwell):
    with pytest.raises(ConfigurationError):
        walk.sample_initial(densities.gaussian(1.0, 1), 1, "gaussian_project",
                            RNG(5), maxwell)


def test_zero_horizon_no_events(maxwell):
    st = walk.sample_initial(densities.gaussian(1.0, 1), 8, "gaussian_project",
                             RNG(6), maxwell)
    traj, flow = walk.simulate(st, maxwell, 0.0, RNG(7))
    assert traj.events == [] and flow.mass() == 0.0


def test_two_particle_event_count_poisson(maxwell):
    # single pair at rate 1/N = 1/2, horizon 10: Poisson mean 5
    rng = RNG(8)
    st = walk.sample_initial(densities.gaussian(1.0, 1), 2, "gaussian_project",
                             rng, maxwell)
    counts = np.array([len(walk.simulate(st, maxwell, 10.0, rng)[0].events)
                       for _ in range(10_000)])
    se = counts.std(ddof=1) / math.sqrt(len(counts))
    assert abs(counts.mean() - 5.0) < 4.0 * se


def test_replay_determinism_and_consistency(speedy):
    st = walk.sample_initial(densities.gaussian(1.0, 1), 16, "gaussian_project",
                             RNG(9), speedy)
    traj1, flow1 = walk.simulate(st, speedy, 2.0, RNG(10))
    traj2, flow2 = walk.simulate(st, speedy, 2.0, RNG(10))
    assert flow1.to_jsonl() == flow2.to_jsonl()
    assert traj1.initial_json() == traj2.initial_json()
    traj1.replay_check()


def test_rate_cache_coherence(speedy):
    st = walk.sample_initial(densities.gaussian(1.0, 1), 32, "gaussian_project",
                             RNG(11), speedy)
    rng = RNG(12)
    traj, _ = walk.simulate(st, speedy, 2.0, rng)
    final = walk.ParticleState(traj.final_velocities(), speedy, time=traj.horizon)
    # compare a fresh state's bookkeeping against continuing the incremental one
    work = st.copy()
    traj2, _ = walk.simulate(st, speedy, 2.0, RNG(12))
    fresh = walk.ParticleState(traj2.final_velocities(), speedy)
    assert np.allclose(final.pair_rates, fresh.pair_rates, rtol=1e-10, atol=0)
    final.check_invariants()


def test_momentum_drift_long_run(maxwell):
    st = walk.sample_initial(densities.gaussian(1.0, 1), 100, "gaussian_project",
                             RNG(13), maxwell)
    traj, flow = walk.simulate(st, maxwell, 40.0, RNG(14))
    assert len(traj.events) > 1500
    assert traj.max_momentum_drift() <= 1e-9 * 100


def test_flow_jsonl_round_trip(maxwell):
    st = walk.sample_initial(densities.gaussian(1.0, 1), 8, "gaussian_project",
                             RNG(15), maxwell)
    traj, flow = walk.simulate(st, maxwell, 1.0, RNG(16))
    text = flow.to_jsonl()
    back = walk.FlowRecord.from_jsonl(text, flow.n_particles, flow.horizon)
    assert back.to_jsonl() == text
    assert back.mass() == flow.mass()


# -- tilted simulation -----------------------------------------------------------

def test_constant_rate_tilt_event_count():
    # rate c = 1 per pair: events over [0, T] Poisson with mean c*T*(N-1)/2
    tilt = walk.GaussianShapeTilt(1.0, 1.0, 1)
    k = kernels.make_kernel("maxwell_sigma1", dim=1)
    st = walk.sample_initial(densities.gaussian(1.0, 1), 4, "gaussian_project",
                             RNG(17), k)
    rng = RNG(18)
    counts = np.array([len(walk.simulate_tilted(st, tilt, 2.0, rng)[0].events)
                       for _ in range(10_000)])
    se = counts.std(ddof=1) / math.sqrt(len(counts))
    assert abs(counts.mean() - 3.0) < 4.0 * se


def test_tilted_matches_homogeneous_distribution(maxwell):
    # thinning with the base kernel reproduces the homogeneous event counts
    st = walk.sample_initial(densities.gaussian(1.0, 1), 6, "gaussian_project",
                             RNG(19), maxwell)
    tilt = walk.HomogeneousTilt(maxwell, rate_bound=1.0)
    rng = RNG(20)
    direct = np.array([len(walk.simulate(st, maxwell, 2.0, rng)[0].events)
                       for _ in range(10_000)])
    thinned = np.array([len(walk.simulate_tilted(st, tilt, 2.0, rng)[0].events)
                        for _ in range(10_000)])
    stat = stats.ks_2samp(direct, thinned).statistic
    assert stat < 1.6276 * math.sqrt(2.0 / 10_000)


def test_bound_violation_detected(maxwell):
    st = walk.sample_initial(densities.gaussian(1.0, 1), 4, "gaussian_project",
                             RNG(21), maxwell)
    lying_tilt = walk.GaussianShapeTilt(2.0, 1.0, 1)
    lying_tilt.rate_bound = 1.0  # claims a bound below the actual rate
    with pytest.raises(BoundViolationError):
        walk.simulate_tilted(st, lying_tilt, 5.0, RNG(22))


# -- tilt log-likelihood -----------------------------------------------------------

def test_loglik_zero_function(maxwell):
    st = walk.sample_initial(densities.gaussian(1.0, 1), 8, "gaussian_project",
                             RNG(23), maxwell)
    traj, flow = walk.simulate(st, maxwell, 1.0, RNG(24))
    assert walk.girsanov_log_likelihood(traj, flow, walk.ZeroPairFunction(),
                                        maxwell) == 0.0


def test_loglik_additive_over_disjoint_supports(maxwell):
    st = walk.sample_initial(densities.gaussian(1.0, 1), 8, "gaussian_project",
                             RNG(25), maxwell)
    traj, flow = walk.simulate(st, maxwell, 2.0, RNG(26))
    f1 = walk.StepPairFunction(0.4, 0.0, 1.0)
    f2 = walk.StepPairFunction(-0.2, 1.0, 2.0)

    class Combined(walk.PairTestFunction):
        def breakpoints(self):
            return (0.0, 1.0, 2.0)

        def __call__(self, t, v, vs, vp, vps):
            return f1(t, v, vs, vp, vps) + f2(t, v, vs, vp, vps)

        def tilted_rate(self, t, v, vs, kernel):
            g = (0.4 if 0.0 <= t < 1.0 else 0.0) + (-0.2 if 1.0 <= t < 2.0 else 0.0)
            return math.exp(g) * np.asarray(kernel.scattering_rate(v, vs))

    la = walk.girsanov_log_likelihood(traj, flow, f1, maxwell)
    lb = walk.girsanov_log_likelihood(traj, flow, f2, maxwell)
    lc = walk.girsanov_log_likelihood(traj, flow, Combined(), maxwell)
    assert abs(lc - (la + lb)) <= 1e-10 * max(1.0, abs(lc))


def test_loglik_quadrature_fallback_matches_closed_form(maxwell):
    st = walk.sample_initial(densities.gaussian(1.0, 1), 6, "gaussian_project",
                             RNG(27), maxwell)
    traj, flow = walk.simulate(st, maxwell, 1.0, RNG(28))
    f = walk.StepPairFunction(0.3, 0.0, 0.5)

    class NoClosedForm(walk.StepPairFunction):
        def tilted_rate(self, t, v, vs, kernel):
            return None

    a = walk.girsanov_log_likelihood(traj, flow, f, maxwell)
    b = walk.girsanov_log_likelihood(traj, flow, NoClosedForm(0.3, 0.0, 0.5),
                                     maxwell)
    assert abs(a - b) < 1e-8 * max(1.0, abs(a))


def test_martingale_mean_one(maxwell):
    # bounded F: exp(log-likelihood) has mean exactly one
    f = walk.StepPairFunction(0.3, 0.0, 0.5)
    rng = RNG(29)
    st = walk.sample_initial(densities.gaussian(1.0, 1), 8, "gaussian_project",
                             rng, maxwell)
    vals = np.empty(10_000)
    for r in range(vals.size):
        traj, flow = walk.simulate(st, maxwell, 1.0, rng)
        vals[r] = math.exp(walk.girsanov_log_likelihood(traj, flow, f, maxwell))
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert abs(vals.mean() - 1.0) < 3.0 * se
