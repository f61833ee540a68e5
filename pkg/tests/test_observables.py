"""Empirical measures, pathwise balance, and Wasserstein-1."""

import itertools
import math

import numpy as np
import pytest

from kacflow import densities, kernels, observables, walk

RNG = lambda seed: np.random.default_rng(seed)


@pytest.fixture(scope="module")
def maxwell():
    return kernels.make_kernel("maxwell_sigma1", dim=1)


def test_two_point_measure_mean_zero():
    mu = observables.empirical_measure(np.array([[1.0], [-1.0]]))
    assert mu.n_points == 2
    assert mu.mean() == 0.0
    assert mu.moment(lambda v: np.abs(v[..., 0])) == 1.0


def test_histogram_mass_plus_overflow_is_one():
    rng = RNG(0)
    mu = observables.empirical_measure(rng.normal(0, 3, size=(1000, 1)))
    edges = [np.linspace(-2, 2, 9)]
    masses, overflow = mu.histogram(edges)
    assert masses.sum() + overflow == pytest.approx(1.0, abs=1e-15)
    assert overflow > 0.0


def test_second_moment_matches_direct_sum():
    rng = RNG(1)
    v = rng.normal(size=(500, 2))
    mu = observables.empirical_measure(v)
    direct = np.mean(np.sum(v * v, axis=1))
    assert abs(mu.moment(lambda x: np.sum(x * x, axis=-1)) - direct) <= 1e-12


def test_balance_momentum_component(maxwell):
    st = walk.sample_initial(densities.gaussian(1.0, 1), 50, "gaussian_project",
                             RNG(2), maxwell)
    traj, flow = walk.simulate(st, maxwell, 1.0, RNG(3))
    phi = observables.coordinate_test_function(axis=0)
    assert observables.balance_residual(traj, flow, phi) <= 1e-9


def test_balance_constant_function(maxwell):
    st = walk.sample_initial(densities.gaussian(1.0, 1), 20, "gaussian_project",
                             RNG(4), maxwell)
    traj, flow = walk.simulate(st, maxwell, 1.0, RNG(5))
    phi = observables.constant_test_function()
    assert observables.balance_residual(traj, flow, phi) == 0.0


def test_balance_random_smooth_functions(maxwell):
    st = walk.sample_initial(densities.gaussian(1.0, 1), 100, "gaussian_project",
                             RNG(6), maxwell)
    traj, flow = walk.simulate(st, maxwell, 1.0, RNG(7))
    rng = RNG(8)
    for _ in range(10):
        phi = observables.random_smooth_test_function(rng)
        assert observables.balance_residual(traj, flow, phi) <= 1e-8


def test_balance_non_polynomial_time_dependence(maxwell):
    st = walk.sample_initial(densities.gaussian(1.0, 1), 30, "gaussian_project",
                             RNG(9), maxwell)
    traj, flow = walk.simulate(st, maxwell, 1.0, RNG(10))

    class Wavy(observables.TimeTestFunction):
        t_degree = None

        def value(self, t, v):
            return math.sin(1.7 * t) * np.exp(-0.5 * np.sum(v * v, axis=-1))

        def dt(self, t, v):
            return 1.7 * math.cos(1.7 * t) * np.exp(-0.5 * np.sum(v * v, axis=-1))

    assert observables.balance_residual(traj, flow, Wavy()) <= 1e-8


def test_w1_identical_measures_zero():
    mu = observables.empirical_measure(np.array([[0.5], [1.5], [-2.0]]))
    assert observables.wasserstein1(mu, mu).value == 0.0


def test_w1_point_masses():
    mu = observables.empirical_measure(np.array([[0.25]]))
    nu = observables.empirical_measure(np.array([[-1.0]]))
    assert observables.wasserstein1(mu, nu).value == pytest.approx(1.25, rel=1e-12)


def test_w1_matches_assignment_oracle():
    rng = RNG(11)
    a = rng.normal(size=(4, 1))
    b = rng.normal(size=(4, 1))
    mu = observables.empirical_measure(a)
    nu = observables.empirical_measure(b)
    # brute-force minimum-cost matching over all pairings of equal-weight atoms
    oracle = min(np.mean(np.abs(a[:, 0] - b[list(perm), 0]))
                 for perm in itertools.permutations(range(4)))
    assert observables.wasserstein1(mu, nu).value == pytest.approx(oracle,
                                                                   rel=1e-12)


def test_w1_dimension_mismatch():
    mu = observables.empirical_measure(np.zeros((3, 1)))
    nu = observables.empirical_measure(np.zeros((3, 2)))
    with pytest.raises(Exception):
        observables.wasserstein1(mu, nu)


def test_sliced_w1_translated_gaussians():
    rng = RNG(12)
    a = rng.normal(size=(4000, 2))
    b = rng.normal(size=(4000, 2)) + np.array([1.0, 0.0])
    res = observables.wasserstein1(observables.empirical_measure(a),
                                   observables.empirical_measure(b),
                                   rng=RNG(13))
    # sliced W1 of a unit translation: E|cos(theta)| = 2/pi, up to direction
    # noise and the positive finite-sample bias of each projected distance
    assert res.stderr > 0.0
    assert abs(res.value - 2.0 / math.pi) < 4.0 * res.stderr + 0.03


def test_flow_functional_symmetric_under_recorded_swaps(maxwell):
    st = walk.sample_initial(densities.gaussian(1.0, 1), 10, "gaussian_project",
                             RNG(14), maxwell)
    _, flow = walk.simulate(st, maxwell, 2.0, RNG(15))
    sym = lambda t, v, vs, vp, vps: (np.sum(v + vs) * np.sum(vp * vps)) ** 2
    swapped_in = lambda t, v, vs, vp, vps: sym(t, vs, v, vp, vps)
    swapped_out = lambda t, v, vs, vp, vps: sym(t, v, vs, vps, vp)
    base = flow.functional(sym)
    assert flow.functional(swapped_in) == base
    assert flow.functional(swapped_out) == base
    assert flow.mass() * flow.n_particles == len(flow.events)
