"""Entropy, Dirichlet form, and kinematic term under detailed balance.

All quadratures run on a (V, w, w') tensor grid built from the velocity
axis, where V = (v+v*)/sqrt2 and w, w' are the incoming and outgoing
relative coordinates. On this grid the swap of incoming and outgoing pairs
is an exact index transpose (w <-> w'), so the algebraic identities that
detailed balance provides hold to rounding rather than to quadrature error.
Supported for d = 1; higher dimensions put the triple tensor beyond desk
scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize

from .errors import ConfigurationError
from .kernels import CollisionKernel, detailed_balance_check, gaussian_density, SQRT2
from .kinetic_solver import DensityGrid
from .ldp import PathPair, relative_entropy
from .walk import HomogeneousTilt

_DB_CACHE: dict = {}


def _require_detailed_balance(kernel: CollisionKernel, tol: float = 1e-8):
    if not kernel.detailed_balance:
        raise ConfigurationError("kernel does not declare detailed balance")
    key = id(kernel)
    if key not in _DB_CACHE:
        _DB_CACHE[key] = detailed_balance_check(kernel, 500,
                                                np.random.default_rng(123))
    if _DB_CACHE[key] > tol:
        raise ConfigurationError(
            f"detailed balance residual {_DB_CACHE[key]:.3e} exceeds {tol:.1e}")


def _interp_zero_outside(axis, values, points):
    out = np.interp(points, axis, values, left=0.0, right=0.0)
    inside = (points >= axis[0]) & (points <= axis[-1])
    return np.where(inside, out, 0.0)


def _cubic_zero_outside(axis, values, points):
    from scipy.interpolate import CubicSpline
    spline = CubicSpline(axis, values, bc_type="natural", extrapolate=False)
    pts = np.asarray(points, dtype=float)
    out = spline(np.clip(pts, axis[0], axis[-1]))
    inside = (pts >= axis[0]) & (pts <= axis[-1])
    return np.where(inside, out, 0.0)


@dataclass
class MaxwellRelativeDensity:
    """A grid density expressed relative to the box-renormalized Maxwellian."""

    grid: DensityGrid

    def __post_init__(self):
        if self.grid.dim != 1:
            raise ConfigurationError("Maxwell-relative computations support d=1")
        self.maxwellian = DensityGrid.maxwellian(1, self.grid.v_max, self.grid.n)
        self.h = self.grid.values / self.maxwellian.values
        self.axis = self.grid.axis

    def h_at(self, points) -> np.ndarray:
        """Interpolated relative density, zero outside the box.

        Cubic, clipped at zero: square roots of the interpolated products
        appear in the Dirichlet and kinematic quadratures.
        """
        return np.maximum(_cubic_zero_outside(self.axis, self.h, points), 0.0)

    def maxwell_mass(self) -> float:
        return float(np.sum(self.h * self.maxwellian.values)) * self.grid.h

    def check_invariants(self, tol: float = 1e-6):
        if np.any(self.h < 0):
            raise ConfigurationError("negative relative density")
        if abs(self.maxwell_mass() - 1.0) > tol:
            raise ConfigurationError("relative density does not integrate to 1")


class MaxwellFrame:
    """Shared (V, w, w') tensor quadrature for one velocity axis and kernel."""

    def __init__(self, v_max: float, n: int, kernel: CollisionKernel):
        self.axis = DensityGrid(1, v_max, n, np.zeros(n)).axis
        self.h_ax = self.axis[1] - self.axis[0]
        self.kernel = kernel
        x = self.axis
        self.v_in = (x[:, None] + x[None, :]) / SQRT2    # (V, w) -> v
        self.vs_in = (x[:, None] - x[None, :]) / SQRT2   # (V, w) -> v*
        g = gaussian_density(x[:, None])
        self.g_axis = g
        # sigma-bar: kernel density over the Gaussian w'-profile
        b = np.asarray(kernel.density(self.v_in[:, :, None, None],
                                      self.vs_in[:, :, None, None],
                                      x[None, None, :, None]), dtype=float)
        self.sigma_bar = b / g[None, None, :]
        # cells whose incoming or outgoing pair leaves the box are excluded
        # from the quadrature; their Maxwellian mass is tallied instead
        box = float(x[-1])
        pair_inside = (np.abs(self.v_in) <= box) & (np.abs(self.vs_in) <= box)
        self.mask = pair_inside[:, :, None] & pair_inside[:, None, :]
        raw = (g[:, None, None] * g[None, :, None] * g[None, None, :]
               * self.h_ax ** 3)
        self.excluded_mass = float(np.sum(raw * ~self.mask))
        # full measure weights g(V) g(w) g(w') h^3 on the retained cells
        self.weights = raw * self.mask

    def incoming_product(self, rel: MaxwellRelativeDensity) -> np.ndarray:
        """h(v) h(v*) over the (V, w) plane."""
        return rel.h_at(self.v_in) * rel.h_at(self.vs_in)


@dataclass(frozen=True)
class DirichletResult:
    value: float          # square form
    difference_value: float
    two_form_gap: float


def dirichlet_form(density: DensityGrid, kernel: CollisionKernel,
                   frame: Optional[MaxwellFrame] = None) -> DirichletResult:
    """Nonlinear Dirichlet form of a density under a detailed-balance kernel.

    Returns the square form (half the squared jump of sqrt(h h*) across
    collisions) together with the product-minus-geometric-mean form; their
    gap vanishes identically on the symmetric grid and is reported as a
    diagnostic.
    """
    _require_detailed_balance(kernel)
    frame = frame or MaxwellFrame(density.v_max, density.n, kernel)
    rel = MaxwellRelativeDensity(density)
    p_in = frame.incoming_product(rel)                 # (V, w)
    root = np.sqrt(p_in)
    w3 = frame.weights * frame.sigma_bar
    square = 0.5 * float(np.sum(w3 * (root[:, None, :] - root[:, :, None]) ** 2))
    diff = float(np.sum(w3 * (p_in[:, :, None]
                              - root[:, :, None] * root[:, None, :])))
    return DirichletResult(value=square, difference_value=diff,
                           two_form_gap=square - diff)


def dirichlet_form_variational(density: DensityGrid, kernel: CollisionKernel,
                               frame: Optional[MaxwellFrame] = None,
                               max_iter: int = 2000) -> float:
    """Donsker-Varadhan form: sup over grid test functions of the jump payoff.

    The supremum is taken over sums phi(v) + phi(v*) with phi a grid
    function, found by quasi-Newton ascent; it reproduces the closed-form
    Dirichlet value up to the flatness of the functional near its maximizer.
    """
    _require_detailed_balance(kernel)
    frame = frame or MaxwellFrame(density.v_max, density.n, kernel)
    rel = MaxwellRelativeDensity(density)
    p_in = frame.incoming_product(rel)
    w3 = frame.weights * frame.sigma_bar
    axis = frame.axis
    n = len(axis)

    from .kinetic_solver import linear_stencil
    idx_v, wts_v = linear_stencil(axis, frame.v_in[..., None])
    idx_vs, wts_vs = linear_stencil(axis, frame.vs_in[..., None])

    def s_phi(phi):
        out = (wts_v * phi[idx_v]).sum(axis=0) + (wts_vs * phi[idx_vs]).sum(axis=0)
        return out.reshape(n, n)

    base = w3 * p_in[:, :, None]

    def objective(phi):
        s = s_phi(phi)
        expd = np.exp(s[:, None, :] - s[:, :, None])
        val = float(np.sum(base * (1.0 - expd)))
        field = base * expd
        # derivative wrt s at (V, w') minus at (V, w), scattered onto phi
        d_out = field.sum(axis=1)      # coefficient of s[a, c]
        d_in = field.sum(axis=2)       # coefficient of s[a, b]
        coeff = (d_in - d_out).ravel()
        grad = np.zeros(n)
        for corner in range(idx_v.shape[0]):
            grad += np.bincount(idx_v[corner], weights=wts_v[corner] * coeff,
                                minlength=n)
            grad += np.bincount(idx_vs[corner], weights=wts_vs[corner] * coeff,
                                minlength=n)
        return -val, -grad

    res = optimize.minimize(objective, np.zeros(n), jac=True, method="L-BFGS-B",
                            options={"maxiter": max_iter, "ftol": 1e-18,
                                     "gtol": 1e-12})
    return -float(res.fun)


def kinematic_term(pair: PathPair, kernel: CollisionKernel,
                   frame: Optional[MaxwellFrame] = None) -> float:
    """Flow cost against the geometric-mean reference in Maxwell coordinates.

    Twice the integral over time and the (V, w, w') Maxwellian measure of
    p log(2p / (sqrt(h h* h' h'*) sigma-bar)) - p + half the reference,
    with the usual conventions at vanishing densities.
    """
    _require_detailed_balance(kernel)
    geo = pair.geometry
    frame = frame or MaxwellFrame(geo.v_max, geo.n, kernel)
    total = 0.0
    for l, dt in enumerate(pair.dt):
        total += dt * _kinematic_slice(pair, l, frame)
    return 2.0 * total


def _kinematic_slice(pair: PathPair, l: int, frame: MaxwellFrame) -> float:
    geo = pair.geometry
    rel = MaxwellRelativeDensity(geo.grid(pair.mid_values(l)))
    p_in = frame.incoming_product(rel)
    root = np.sqrt(p_in)
    geom_ref = root[:, :, None] * root[:, None, :] * frame.sigma_bar

    p = _flow_in_maxwell_coords(pair, l, frame, rel)
    # flow mass on cells without reference support means an infinite cost;
    # values at rounding scale are interpolation floor, not genuine support
    tol = 1e-12 * float(p.max(initial=0.0))
    if np.any((p > tol) & (geom_ref <= 0) & frame.mask):
        return math.inf
    pos = (p > tol) & (geom_ref > 0)
    safe_p = np.where(pos, p, 1.0)
    safe_ref = np.where(geom_ref > 0, geom_ref, 1.0)
    integrand = np.where(
        pos, p * (np.log(2.0 * safe_p) - np.log(safe_ref)) - p + 0.5 * geom_ref,
        0.5 * geom_ref)
    return float(np.sum(frame.weights * integrand))


def _flow_in_maxwell_coords(pair: PathPair, l: int, frame: MaxwellFrame,
                            rel: MaxwellRelativeDensity) -> np.ndarray:
    """Flow density of interval l relative to the Maxwellian triple measure."""
    if pair.tilt is not None:
        tilt = pair.tilt
        if isinstance(tilt, HomogeneousTilt):
            b = np.asarray(tilt.kernel.density(
                frame.v_in[:, :, None, None], frame.vs_in[:, :, None, None],
                frame.axis[None, None, :, None]), dtype=float)
        else:
            b = np.asarray(tilt.density(
                pair.mid_time(l), frame.v_in[:, :, None, None],
                frame.vs_in[:, :, None, None],
                frame.axis[None, None, :, None]), dtype=float)
        sigma_tilt = b / frame.g_axis[None, None, :]
        return 0.5 * frame.incoming_product(rel)[:, :, None] * sigma_tilt
    # dense flow: bilinear lookup of q at (v(V,w), v*(V,w), w'_c)
    q = pair.q_at(l)
    from .kinetic_solver import linear_stencil
    geo = pair.geometry
    idx_v, wts_v = linear_stencil(geo.table.axis, frame.v_in[..., None])
    idx_vs, wts_vs = linear_stencil(geo.table.axis, frame.vs_in[..., None])
    n = len(frame.axis)
    out = np.zeros((n * n, n))
    for ca in range(idx_v.shape[0]):
        for cb in range(idx_vs.shape[0]):
            w2 = (wts_v[ca] * wts_vs[cb])[:, None]
            out += w2 * q[idx_v[ca], idx_vs[cb], :]
        # w' axis needs no lookup: the frame shares the flow's w' grid
    q_at = out.reshape(n, n, n)
    meas = (frame.g_axis[:, None, None] * frame.g_axis[None, :, None]
            * frame.g_axis[None, None, :])
    return q_at / meas


@dataclass(frozen=True)
class GradientFlowReport:
    dynamical_cost: float
    entropy_initial: float
    entropy_final: float
    dirichlet_integral: float
    kinematic: float
    residual: float
    relative_residual: float


def gradient_flow_residual(pair: PathPair, kernel: CollisionKernel,
                           frame: Optional[MaxwellFrame] = None) -> GradientFlowReport:
    """Mismatch of the entropy/Dirichlet/kinematic decomposition of the cost.

    The flow cost is evaluated on the (v, v*, w') grid while every term on
    the other side uses the Maxwell-relative (V, w, w') frame, so the
    residual measures true discretization error with no shared cancellation.
    """
    from .ldp import dynamical_cost
    _require_detailed_balance(kernel)
    geo = pair.geometry
    frame = frame or MaxwellFrame(geo.v_max, geo.n, kernel)
    maxw = DensityGrid.maxwellian(1, geo.v_max, geo.n)

    j_val = dynamical_cost(pair, kernel)
    h0 = relative_entropy(pair.initial_density, maxw)
    h1 = relative_entropy(pair.final_density, maxw)
    dirichlet = 0.0
    for l, dt in enumerate(pair.dt):
        dirichlet += dt * dirichlet_form(geo.grid(pair.mid_values(l)), kernel,
                                         frame).value
    kin = kinematic_term(pair, kernel, frame)
    rhs = 0.5 * (h1 - h0) + 0.5 * dirichlet + 0.5 * kin
    residual = abs(j_val - rhs)
    scale = max(abs(j_val), abs(0.5 * (h1 - h0)), 0.5 * dirichlet, 0.5 * kin,
                1e-300)
    relative = residual / scale if math.isfinite(residual) else math.inf
    return GradientFlowReport(dynamical_cost=j_val, entropy_initial=h0,
                              entropy_final=h1, dirichlet_integral=dirichlet,
                              kinematic=kin, residual=residual,
                              relative_residual=relative)


@dataclass(frozen=True)
class EnergyDissipationReport:
    lhs: float
    rhs: float
    slack: float
    entropy_path: tuple


def energy_dissipation_check(initial: DensityGrid, kernel: CollisionKernel,
                             horizon: float, n_intervals: int,
                             frame: Optional[MaxwellFrame] = None
                             ) -> EnergyDissipationReport:
    """Entropy plus dissipation along the solution started from the initial law.

    Requires a bounded scattering rate (speed-weighted kernels are rejected).
    Along the solution with its own reference flow the inequality holds with
    equality up to discretization, and the entropy decreases node by node.
    """
    from .ldp import solution_pair
    _require_detailed_balance(kernel)
    if kernel.tail.gamma > 0:
        raise ConfigurationError(
            "the energy-dissipation bound needs a bounded scattering rate")
    geo_pair = solution_pair(initial, kernel, horizon, n_intervals)
    frame = frame or MaxwellFrame(initial.v_max, initial.n, kernel)
    maxw = DensityGrid.maxwellian(1, initial.v_max, initial.n)

    entropies = tuple(relative_entropy(geo_pair.node_density(l), maxw)
                      for l in range(n_intervals + 1))
    dirichlet = 0.0
    for l, dt in enumerate(geo_pair.dt):
        dirichlet += dt * dirichlet_form(
            geo_pair.geometry.grid(geo_pair.mid_values(l)), kernel, frame).value
    kin = kinematic_term(geo_pair, kernel, frame)
    lhs = entropies[-1] + dirichlet + kin
    rhs = entropies[0]
    return EnergyDissipationReport(lhs=lhs, rhs=rhs, slack=rhs - lhs,
                                   entropy_path=entropies)


def variational_kinematic_lower_bound(pair: PathPair, kernel: CollisionKernel,
                                      alpha, big_f,
                                      frame: Optional[MaxwellFrame] = None
                                      ) -> float:
    """Value of the two-function variational form of the kinematic term.

    alpha and big_f are arrays over (time interval, V, w, w') with the pair
    symmetries; alpha must be bounded away from zero. Every admissible pair
    gives a lower bound of the closed form; the swap of incoming and
    outgoing coordinates is the exact (w, w') index transpose.
    """
    _require_detailed_balance(kernel)
    geo = pair.geometry
    frame = frame or MaxwellFrame(geo.v_max, geo.n, kernel)
    total = 0.0
    for l, dt in enumerate(pair.dt):
        rel = MaxwellRelativeDensity(geo.grid(pair.mid_values(l)))
        p = _flow_in_maxwell_coords(pair, l, frame, rel)
        p_in = frame.incoming_product(rel)
        ref = 0.5 * p_in[:, :, None] * frame.sigma_bar  # reference flow density
        f_l = big_f[l]
        a_l = alpha[l]
        swap_f = np.swapaxes(f_l, 1, 2)
        swap_a = np.swapaxes(a_l, 1, 2)
        bracket = (2.0 * p * f_l
                   - ref * (np.expm1(f_l) / a_l + np.expm1(swap_f) * swap_a))
        total += dt * float(np.sum(frame.weights * bracket))
    return total
