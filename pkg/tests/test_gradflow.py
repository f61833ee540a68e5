"""Dirichlet form, kinematic term, and the cost decomposition identity."""

import math

import numpy as np
import pytest

from kacflow import densities, gradflow as gf, kernels, kinetic_solver as ks, \
    ldp, walk
from kacflow.errors import ConfigurationError

RNG = lambda seed: np.random.default_rng(seed)


@pytest.fixture(scope="module")
def maxwell():
    return kernels.make_kernel("maxwell_sigma1", dim=1)


@pytest.fixture(scope="module")
def frame(maxwell):
    return gf.MaxwellFrame(6.0, 64, maxwell)


@pytest.fixture(scope="module")
def bimodal_grid():
    return ks.DensityGrid.from_density(densities.symmetric_bimodal(1.5, 0.5),
                                       6.0, 64)


def random_positive_density(rng, n=64, v_max=6.0):
    base = ks.DensityGrid.maxwellian(1, v_max, n)
    bump = rng.uniform(0.3, 1.8) * np.exp(
        -0.5 * ((base.axis - rng.normal(0.0, 1.0)) / rng.uniform(0.8, 1.6)) ** 2)
    vals = base.values * (0.4 + bump)
    return ks.DensityGrid(1, v_max, n, vals).normalize_conserved()


def test_dirichlet_zero_at_maxwellian(maxwell, frame):
    M = ks.DensityGrid.maxwellian(1, 6.0, 64)
    res = gf.dirichlet_form(M, maxwell, frame)
    assert abs(res.value) <= 1e-10
    assert abs(res.two_form_gap) <= 1e-12


def test_dirichlet_two_form_gap_on_random_densities(maxwell, frame):
    rng = RNG(0)
    for _ in range(10):
        f = random_positive_density(rng)
        res = gf.dirichlet_form(f, maxwell, frame)
        assert res.value >= 0.0
        assert abs(res.two_form_gap) <= 1e-8


def test_dirichlet_requires_detailed_balance(bimodal_grid):
    speedy = kernels.make_kernel("paper_example", dim=1)
    with pytest.raises(ConfigurationError):
        gf.dirichlet_form(bimodal_grid, speedy)


def test_donsker_varadhan_consistency(maxwell, frame, bimodal_grid):
    closed = gf.dirichlet_form(bimodal_grid, maxwell, frame).value
    sup = gf.dirichlet_form_variational(bimodal_grid, maxwell, frame)
    assert abs(closed - sup) <= 1e-4
    assert sup <= closed + 1e-10  # grid test functions form a subclass


def test_kinematic_zero_at_stationarity(maxwell, frame):
    M = ks.DensityGrid.maxwellian(1, 6.0, 64)
    pair = ldp.solution_pair(M, maxwell, 0.4, 8)
    assert abs(gf.kinematic_term(pair, maxwell, frame)) <= 1e-6


def test_kinematic_nonnegative(maxwell, frame, bimodal_grid):
    pair = ldp.solution_pair(bimodal_grid, maxwell, 0.4, 8)
    assert gf.kinematic_term(pair, maxwell, frame) >= 0.0


def test_kinematic_variational_lower_bounds(maxwell, frame, bimodal_grid):
    tilt = walk.GaussianShapeTilt(1.4, 0.8, 1)
    pair = ldp.tilted_pair(ks.DensityGrid.maxwellian(1, 6.0, 64), tilt, 0.5, 10)
    closed = gf.kinematic_term(pair, maxwell, frame)
    rng = RNG(1)
    n = 64
    K = pair.n_intervals
    for _ in range(20):
        # symmetric random fields: even in w and w' separately, alpha > 0
        aw = rng.uniform(0.2, 1.0)
        f_amp = rng.normal(0.0, 0.3)
        x = frame.axis
        even = np.exp(-0.5 * (x / rng.uniform(1.0, 3.0)) ** 2)
        fld = f_amp * (even[None, :, None] * even[None, None, :]
                       * np.exp(-0.1 * x ** 2)[:, None, None])
        big_f = np.broadcast_to(fld, (K, n, n, n)).copy()
        alpha = np.broadcast_to(aw + 0.3 * even[None, :, None]
                                * even[None, None, :], (K, n, n, n)).copy()
        bound = gf.variational_kinematic_lower_bound(pair, maxwell, alpha,
                                                     big_f, frame)
        assert bound <= closed + 1e-6


def test_gradient_flow_identity_solution_path(maxwell, frame, bimodal_grid):
    pair = ldp.solution_pair(bimodal_grid, maxwell, 0.5, 40)
    rep = gf.gradient_flow_residual(pair, maxwell, frame)
    assert rep.dynamical_cost == 0.0
    assert rep.residual <= 1e-4


def test_gradient_flow_identity_tilted_path(maxwell):
    tilt = walk.GaussianShapeTilt(1.6, 0.7, 1)
    rels = {}
    for n, K in ((32, 10), (64, 20), (128, 40)):
        f0 = ks.DensityGrid.maxwellian(1, 6.0, n)
        pair = ldp.tilted_pair(f0, tilt, 0.8, K)
        rep = gf.gradient_flow_residual(pair, maxwell)
        rels[n] = rep.relative_residual
    assert rels[64] <= 1e-3
    assert rels[32] > rels[64] > rels[128]


def test_gradient_flow_terms_positive(maxwell, frame, bimodal_grid):
    tilt = walk.GaussianShapeTilt(1.3, 0.85, 1)
    pair = ldp.tilted_pair(bimodal_grid, tilt, 0.4, 8)
    rep = gf.gradient_flow_residual(pair, maxwell, frame)
    assert rep.dynamical_cost > 0.0
    assert rep.dirichlet_integral >= 0.0
    assert rep.kinematic >= 0.0


def test_energy_dissipation_stationary_start(maxwell):
    M = ks.DensityGrid.maxwellian(1, 6.0, 64)
    rep = gf.energy_dissipation_check(M, maxwell, 0.5, 10)
    assert abs(rep.lhs) <= 1e-6 and abs(rep.rhs) <= 1e-12
    assert abs(rep.slack) <= 1e-6


def test_energy_dissipation_bimodal(maxwell, bimodal_grid):
    rep = gf.energy_dissipation_check(bimodal_grid, maxwell, 1.0, 20)
    assert abs(rep.slack) <= 1e-3
    for earlier, later in zip(rep.entropy_path[:-1], rep.entropy_path[1:]):
        assert later <= earlier + 1e-6


def test_energy_dissipation_rejects_unbounded_rates(bimodal_grid):
    speedy = kernels.make_kernel("paper_example", dim=1)
    with pytest.raises(ConfigurationError):
        gf.energy_dissipation_check(bimodal_grid, speedy, 0.5, 10)


def test_perturbed_flow_has_positive_cost_and_identity(maxwell, frame,
                                                       bimodal_grid):
    # same density path, different flow: the identity still holds with J > 0
    pair = ldp.solution_pair(bimodal_grid, maxwell, 0.5, 40)
    rep = gf.gradient_flow_residual(pair.scaled_flow(1.0), maxwell, frame)
    assert rep.residual <= 1e-4

    bumped = ldp.PathPair(
        pair.geometry, pair.times, list(pair.node_values),
        q_fields=[1.15 * pair.q_at(l) for l in range(pair.n_intervals)])
    j_b = ldp.dynamical_cost(bumped, maxwell)
    assert j_b > 0.0


def test_maxwell_relative_density_invariants(bimodal_grid):
    rel = gf.MaxwellRelativeDensity(bimodal_grid)
    rel.check_invariants()
    # coordinate round trip at random points
    rng = RNG(2)
    v = rng.uniform(-4, 4, size=50)
    vs = rng.uniform(-4, 4, size=50)
    V = (v + vs) / math.sqrt(2.0)
    w = (v - vs) / math.sqrt(2.0)
    np.testing.assert_allclose((V + w) / math.sqrt(2.0), v, rtol=0, atol=1e-13)
    np.testing.assert_allclose((V - w) / math.sqrt(2.0), vs, rtol=0, atol=1e-13)
