"""Empirical measures, the pathwise balance identity, and transport distances.

All operations are pure functions over immutable inputs. The empirical flow
is kept as the exact event log (see walk.FlowRecord); binning is a lossy view
used only for plotting and grid conversions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, stats

from .errors import ConfigurationError
from .walk import FlowRecord, Trajectory


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniform weights 1/N on N support points in R^d."""

    points: np.ndarray

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def moment(self, fn: Callable) -> float:
        return float(np.mean(fn(self.points)))

    def mean(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def histogram(self, edges_per_axis: Sequence[np.ndarray]):
        """Conservative binning: each point wholly in its containing cell.

        Returns (masses, overflow) with masses summing to 1 - overflow;
        points outside the box are reported as overflow, not an error.
        """
        pts = self.points
        d = self.dim
        inside = np.ones(self.n_points, dtype=bool)
        idx = []
        for a in range(d):
            edges = np.asarray(edges_per_axis[a])
            ia = np.searchsorted(edges, pts[:, a], side="right") - 1
            inside &= (ia >= 0) & (ia < len(edges) - 1)
            idx.append(np.clip(ia, 0, len(edges) - 2))
        shape = tuple(len(e) - 1 for e in edges_per_axis)
        masses = np.zeros(shape)
        flat = np.ravel_multi_index([ia[inside] for ia in idx], shape)
        np.add.at(masses.ravel(), flat, 1.0 / self.n_points)
        overflow = float(np.sum(~inside)) / self.n_points
        return masses, overflow


def empirical_measure(velocities_or_state) -> EmpiricalMeasure:
    """Empirical measure of a velocity array or a ParticleState."""
    v = getattr(velocities_or_state, "velocities", velocities_or_state)
    return EmpiricalMeasure(points=np.array(v, dtype=float))


# -- time-dependent scalar test functions --------------------------------------

class TimeTestFunction:
    """phi(t, v) with a time derivative; t_degree, when set, is the polynomial
    degree in t (enables exact Gauss-Legendre time integration)."""

    t_degree: Optional[int] = None

    def value(self, t, v):
        raise NotImplementedError

    def dt(self, t, v):
        raise NotImplementedError


class SeparableTestFunction(TimeTestFunction):
    """phi(t, v) = poly(t) * shape(v) with polynomial coefficients in t."""

    def __init__(self, coeffs: Sequence[float], shape: Callable):
        self.coeffs = np.asarray(coeffs, dtype=float)  # ascending order
        self.shape = shape
        self.t_degree = len(self.coeffs) - 1

    def _poly(self, t):
        return np.polynomial.polynomial.polyval(t, self.coeffs)

    def _dpoly(self, t):
        der = np.polynomial.polynomial.polyder(self.coeffs)
        return np.polynomial.polynomial.polyval(t, der) if len(der) else 0.0

    def value(self, t, v):
        return self._poly(t) * self.shape(np.asarray(v, dtype=float))

    def dt(self, t, v):
        return self._dpoly(t) * self.shape(np.asarray(v, dtype=float))


def coordinate_test_function(axis: int = 0) -> SeparableTestFunction:
    return SeparableTestFunction([1.0], lambda v: v[..., axis])


def constant_test_function() -> SeparableTestFunction:
    return SeparableTestFunction([1.0], lambda v: np.ones(v.shape[:-1]))


def random_smooth_test_function(rng: np.random.Generator,
                                t_degree: int = 2) -> SeparableTestFunction:
    """Gaussian bump in v times a random polynomial in t."""
    center = rng.normal(0.0, 1.5)
    width = rng.uniform(0.6, 2.0)
    amp = rng.uniform(0.5, 2.0)
    coeffs = rng.normal(0.0, 1.0, size=t_degree + 1)

    def shape(v):
        r2 = np.sum((v - center) ** 2, axis=-1)
        return amp * np.exp(-0.5 * r2 / (width * width))

    return SeparableTestFunction(coeffs, shape)


# -- the balance identity --------------------------------------------------------

def balance_residual(traj: Trajectory, flow: FlowRecord,
                     phi: TimeTestFunction) -> float:
    """Absolute residual of the measure-flow balance identity along a path.

    Evaluates pi_T(phi_T) - pi_0(phi_0) - int pi_t(d_t phi) dt plus the flow
    term with phi(v) + phi(v*) - phi(v') - phi(v'*). The time integral is a
    Gauss-Legendre sum per inter-event interval, exact when phi is polynomial
    in t; otherwise adaptive quadrature is used. The identity holds pathwise,
    so the residual measures only arithmetic error.
    """
    n = flow.n_particles

    first = last = None
    time_integral = 0.0
    for t0, t1, v in traj.intervals():
        if first is None:
            first = float(np.sum(phi.value(t0, v))) / n
        last = (t1, v.copy())
        if t1 > t0:
            time_integral += _interval_integral(phi, t0, t1, v) / n

    end_val = float(np.sum(phi.value(last[0], last[1]))) / n

    flow_term = flow.functional(
        lambda t, v, vs, vp, vps: phi.value(t, v) + phi.value(t, vs)
        - phi.value(t, vp) - phi.value(t, vps))

    return abs(end_val - first - time_integral + flow_term)


def _interval_integral(phi: TimeTestFunction, t0: float, t1: float,
                       v: np.ndarray) -> float:
    """int_{t0}^{t1} sum_i d_t phi(t, v_i) dt for frozen velocities."""
    if phi.t_degree is not None:
        n_nodes = max(1, math.ceil((phi.t_degree + 1) / 2))
        x, w = np.polynomial.legendre.leggauss(n_nodes)
        ts = 0.5 * (t1 - t0) * x + 0.5 * (t1 + t0)
        return 0.5 * (t1 - t0) * sum(
            wi * float(np.sum(phi.dt(ti, v))) for ti, wi in zip(ts, w))
    val, _ = integrate.quad(lambda t: float(np.sum(phi.dt(t, v))), t0, t1,
                            limit=200)
    return val


# -- Wasserstein-1 ---------------------------------------------------------------

@dataclass(frozen=True)
class Wasserstein1Result:
    value: float
    stderr: float  # Monte Carlo error over directions; 0 for exact d=1


def _as_weighted_points(obj):
    """(points (m,d), weights (m,)) view of a measure-like object."""
    if isinstance(obj, EmpiricalMeasure):
        m = obj.n_points
        return obj.points, np.full(m, 1.0 / m)
    if isinstance(obj, tuple) and len(obj) == 2:
        pts, w = obj
        return np.asarray(pts, dtype=float), np.asarray(w, dtype=float)
    if hasattr(obj, "cell_centers") and hasattr(obj, "cell_masses"):
        return obj.cell_centers(), obj.cell_masses()
    raise ConfigurationError(f"cannot interpret {type(obj).__name__} as a measure")


def wasserstein1(mu, nu, n_directions: int = 64,
                 rng: Optional[np.random.Generator] = None) -> Wasserstein1Result:
    """W1 distance between two finitely supported measures.

    d=1 is the exact sorted-quantile coupling. d>=2 is the sliced distance:
    the average over random directions of the 1-D distance between projected
    measures, reported with its Monte Carlo standard error.
    """
    pts_a, w_a = _as_weighted_points(mu)
    pts_b, w_b = _as_weighted_points(nu)
    if pts_a.shape[1] != pts_b.shape[1]:
        raise ConfigurationError("dimension mismatch between measures")
    d = pts_a.shape[1]
    if d == 1:
        val = stats.wasserstein_distance(pts_a[:, 0], pts_b[:, 0], w_a, w_b)
        return Wasserstein1Result(value=float(val), stderr=0.0)
    rng = np.random.default_rng(0) if rng is None else rng
    dirs = rng.normal(size=(n_directions, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    vals = np.array([
        stats.wasserstein_distance(pts_a @ u, pts_b @ u, w_a, w_b) for u in dirs])
    return Wasserstein1Result(value=float(vals.mean()),
                              stderr=float(vals.std(ddof=1)
                                           / math.sqrt(n_directions)))
