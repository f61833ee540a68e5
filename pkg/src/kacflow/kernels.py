"""Collision kernels for the momentum-conserving binary collision process.

A kernel assigns to each incoming pair (v, v*) a rate density B(v, v*, w')
per unit volume of the outgoing relative coordinate w' = (v' - v'*)/sqrt(2).
The outgoing pair is reconstructed from the conserved sum, so every collision
preserves v + v* up to the last bit that float addition allows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConfigurationError, NumericsError, ValidationError

SQRT2 = math.sqrt(2.0)

# Gauss-Hermite orders tried in sequence by the adaptive quadrature.
_GH_ORDERS_1D = (24, 48, 96, 192, 384)
_GH_ORDERS_2D = (16, 32, 64, 128)


def gaussian_density(x: np.ndarray, var: float = 1.0) -> np.ndarray:
    """Centered Gaussian density with covariance var*I, evaluated on (..., d)."""
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    norm = (2.0 * math.pi * var) ** (-0.5 * d)
    return norm * np.exp(-0.5 * np.sum(x * x, axis=-1) / var)


def conserving_partner(total: np.ndarray, first: np.ndarray) -> np.ndarray:
    """Partner velocity total - first, rounded once.

    first + partner reproduces total up to one rounding of the subtraction;
    exact bitwise equality is not attainable in binary64 for all inputs.
    """
    return np.asarray(total, dtype=float) - np.asarray(first, dtype=float)


def outgoing_pair(v: np.ndarray, vstar: np.ndarray, wprime: np.ndarray):
    """Outgoing velocities for incoming (v, v*) and relative coordinate w'."""
    s = np.asarray(v, dtype=float) + np.asarray(vstar, dtype=float)
    vp = 0.5 * s + np.asarray(wprime, dtype=float) / SQRT2
    return vp, conserving_partner(s, vp)


@dataclass(frozen=True)
class CollisionCoords:
    """Center/relative coordinates of a collision.

    center is the midpoint (v + v*)/2; w and wprime are the incoming and
    outgoing relative coordinates (v - v*)/sqrt(2) and (v' - v'*)/sqrt(2).
    """

    center: np.ndarray
    w: np.ndarray
    wprime: Optional[np.ndarray] = None

    @classmethod
    def from_incoming(cls, v, vstar, wprime=None) -> "CollisionCoords":
        v = np.asarray(v, dtype=float)
        vstar = np.asarray(vstar, dtype=float)
        return cls(center=0.5 * (v + vstar), w=(v - vstar) / SQRT2,
                   wprime=None if wprime is None else np.asarray(wprime, dtype=float))

    @property
    def center_normalized(self) -> np.ndarray:
        """The sqrt(2)-normalized center (v + v*)/sqrt(2)."""
        return self.center * SQRT2

    def incoming(self):
        half = self.w / SQRT2
        return self.center + half, self.center - half

    def outgoing(self):
        if self.wprime is None:
            raise ValueError("no outgoing relative coordinate set")
        s = 2.0 * self.center
        vp = self.center + self.wprime / SQRT2
        return vp, conserving_partner(s, vp)


@dataclass(frozen=True)
class Envelope:
    """Upper bound amp * (1 + |v-v*|**speed_gamma) * exp(-decay*|w'|^2) on B.

    speed_gamma=None drops the relative-speed factor (bound independent of the
    incoming pair), which makes the rejection sampler exact for kernels whose
    w'-profile is itself Gaussian.
    """

    amp: float
    decay: float
    speed_gamma: Optional[float] = None

    def speed_factor(self, v, vstar) -> np.ndarray:
        if self.speed_gamma is None:
            return np.ones(np.broadcast(v, vstar).shape[:-1])
        s = np.linalg.norm(np.asarray(v) - np.asarray(vstar), axis=-1)
        return 1.0 + s ** self.speed_gamma

    def value(self, v, vstar, wprime) -> np.ndarray:
        w2 = np.sum(np.asarray(wprime, dtype=float) ** 2, axis=-1)
        return self.amp * self.speed_factor(v, vstar) * np.exp(-self.decay * w2)


@dataclass(frozen=True)
class GaussianFloor:
    """Lower bound amp * exp(-decay*|w'|^2) on B (non-degeneracy)."""

    amp: float
    decay: float

    def value(self, wprime) -> np.ndarray:
        w2 = np.sum(np.asarray(wprime, dtype=float) ** 2, axis=-1)
        return self.amp * np.exp(-self.decay * w2)


@dataclass(frozen=True)
class TailBound:
    """Gaussian-tail constants: int B e^{eta |w'|^2} dw' <= coeff*(1+|v-v*|^gamma)."""

    coeff: float
    eta: float
    gamma: float


@dataclass
class CollisionKernel:
    """A validated collision kernel.

    density(v, vstar, wprime) must broadcast over leading axes; velocity
    arguments carry the dimension on the trailing axis. Kernels are immutable
    after construction and safe to share across threads; sampling takes a
    caller-supplied random generator.
    """

    dim: int
    density: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    envelope: Envelope
    floor: GaussianFloor
    tail: TailBound
    closed_form_rate: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    detailed_balance: bool = False
    name: str = "custom"
    quad_rel_tol: float = 1e-8
    _rate_order: Optional[int] = field(default=None, repr=False)

    # -- scattering rate ---------------------------------------------------

    def scattering_rate(self, v, vstar) -> np.ndarray:
        """Total collision rate of the pair: the w'-integral of the density."""
        v = np.atleast_2d(np.asarray(v, dtype=float))
        vstar = np.atleast_2d(np.asarray(vstar, dtype=float))
        if v.shape[-1] != self.dim or vstar.shape[-1] != self.dim:
            raise ConfigurationError(
                f"dimension mismatch: kernel dim {self.dim}, got {v.shape[-1]}")
        if self.closed_form_rate is not None:
            out = np.asarray(self.closed_form_rate(v, vstar), dtype=float)
        else:
            out = self._rate_by_quadrature(v, vstar)
        return out[0] if out.shape == (1,) else out

    def diagonal_rate(self, v) -> np.ndarray:
        """Rate of a pair with equal velocities (enters the 1/N correction)."""
        return self.scattering_rate(v, v)

    def _rate_by_quadrature(self, v, vstar) -> np.ndarray:
        integrand = lambda wp: self.density(v[..., None, :], vstar[..., None, :], wp)
        return gauss_hermite_wprime_integral(
            integrand, self.dim, self.envelope.decay, rel_tol=self.quad_rel_tol)

    # -- sampling ----------------------------------------------------------

    def sample_wprime(self, rng: np.random.Generator, v, vstar,
                      max_proposals: int = 100_000):
        """Rejection-sample w' from B(v, v*, .)/lambda; returns (w', proposals)."""
        v = np.asarray(v, dtype=float)
        vstar = np.asarray(vstar, dtype=float)
        scale = math.sqrt(0.5 / self.envelope.decay)
        bound_amp = self.envelope.amp * float(self.envelope.speed_factor(v, vstar))
        for n in range(1, max_proposals + 1):
            wp = rng.normal(0.0, scale, size=self.dim)
            ratio = float(self.density(v, vstar, wp)) / (
                bound_amp * math.exp(-self.envelope.decay * float(wp @ wp)))
            if ratio > 1.0 + 1e-9:
                raise ValidationError(
                    f"envelope violated during sampling: acceptance ratio {ratio:.6g} "
                    f"at v={v}, v*={vstar}, w'={wp}")
            if rng.uniform() <= ratio:
                return wp, n
        raise NumericsError(f"no acceptance within {max_proposals} proposals")

    def sample_outgoing(self, rng: np.random.Generator, v, vstar):
        """Draw an outgoing pair (v', v'*) with v' + v'* = v + v*."""
        wp, _ = self.sample_wprime(rng, v, vstar)
        return outgoing_pair(v, vstar, wp)

    def sample_wprime_batch(self, rng: np.random.Generator, v, vstar, n: int):
        """n independent w' draws for a fixed pair (vectorized rejection)."""
        v = np.asarray(v, dtype=float)
        vstar = np.asarray(vstar, dtype=float)
        scale = math.sqrt(0.5 / self.envelope.decay)
        bound_amp = self.envelope.amp * float(self.envelope.speed_factor(v, vstar))
        out = np.empty((n, self.dim))
        got = 0
        while got < n:
            m = max(2 * (n - got), 1024)
            wp = rng.normal(0.0, scale, size=(m, self.dim))
            env = bound_amp * np.exp(-self.envelope.decay * np.sum(wp * wp, axis=-1))
            ratio = self.density(v, vstar, wp) / env
            if np.any(ratio > 1.0 + 1e-9):
                bad = wp[np.argmax(ratio)]
                raise ValidationError(f"envelope violated at w'={bad}")
            keep = wp[rng.uniform(size=m) <= ratio]
            take = min(len(keep), n - got)
            out[got:got + take] = keep[:take]
            got += take
        return out


def gauss_hermite_wprime_integral(integrand, dim: int, decay: float,
                                  rel_tol: float = 1e-8) -> np.ndarray:
    """Adaptive Gauss-Hermite quadrature of integrand(w') over R^dim.

    The integrand must decay at least like exp(-decay*|w'|^2); nodes are
    rescaled accordingly. Orders are doubled until two successive values
    agree to rel_tol.
    """
    orders = _GH_ORDERS_1D if dim == 1 else _GH_ORDERS_2D
    prev = None
    for order in orders:
        x, w = np.polynomial.hermite.hermgauss(order)
        if dim == 1:
            nodes = (x / math.sqrt(decay))[:, None]
            weights = (w * np.exp(x * x)) / math.sqrt(decay)
        else:
            xx, yy = np.meshgrid(x, x, indexing="ij")
            nodes = np.stack([xx.ravel(), yy.ravel()], axis=-1) / math.sqrt(decay)
            weights = np.outer(w * np.exp(x * x), w * np.exp(x * x)).ravel() / decay
        est = np.sum(integrand(nodes) * weights, axis=-1)
        if prev is not None:
            err = np.max(np.abs(est - prev) / np.maximum(np.abs(est), 1e-300))
            if err <= rel_tol:
                return est
        prev = est
    raise NumericsError(
        f"w'-quadrature did not converge to rel tol {rel_tol:.1e}; achieved {err:.3e}")


# -- built-in kernels -------------------------------------------------------

def _maxwell_sigma1(dim: int) -> CollisionKernel:
    def density(v, vstar, wprime):
        out = gaussian_density(wprime)
        return np.broadcast_to(out, np.broadcast(
            np.asarray(v)[..., 0], np.asarray(vstar)[..., 0], out).shape).copy()

    amp = (2.0 * math.pi) ** (-0.5 * dim)
    return CollisionKernel(
        dim=dim,
        density=density,
        envelope=Envelope(amp=amp, decay=0.5, speed_gamma=None),
        floor=GaussianFloor(amp=amp, decay=0.5),
        tail=TailBound(coeff=2.0 ** (0.5 * dim), eta=0.25, gamma=0.0),
        closed_form_rate=lambda v, vstar: np.ones(np.broadcast(
            np.asarray(v)[..., 0], np.asarray(vstar)[..., 0]).shape),
        detailed_balance=True,
        name="maxwell_sigma1",
    )


def _paper_example(dim: int) -> CollisionKernel:
    def density(v, vstar, wprime):
        s = np.linalg.norm(np.asarray(v, dtype=float) - np.asarray(vstar, dtype=float),
                           axis=-1)
        w2 = np.sum(np.asarray(wprime, dtype=float) ** 2, axis=-1)
        return (1.0 + s) * np.exp(-w2)

    pi_d2 = math.pi ** (0.5 * dim)
    return CollisionKernel(
        dim=dim,
        density=density,
        envelope=Envelope(amp=1.0, decay=1.0, speed_gamma=1.0),
        floor=GaussianFloor(amp=1.0, decay=1.0),
        tail=TailBound(coeff=(2.0 * math.pi) ** (0.5 * dim), eta=0.5, gamma=1.0),
        closed_form_rate=lambda v, vstar: pi_d2 * (1.0 + np.linalg.norm(
            np.asarray(v, dtype=float) - np.asarray(vstar, dtype=float), axis=-1)),
        detailed_balance=False,
        name="speed_weighted_gaussian",
    )


_BUILTINS = {
    "maxwell_sigma1": _maxwell_sigma1,
    "paper_example": _paper_example,
}


def make_kernel(spec, dim: Optional[int] = None, validate: bool = True,
                n_validation: int = 1000, rng=None) -> CollisionKernel:
    """Build a kernel from a descriptor {"name", "dim", "params"} or a name.

    Built-ins: "maxwell_sigma1" (Gaussian w'-profile, unit rate, detailed
    balance) and "paper_example" (relative-speed-weighted Gaussian profile).
    Custom kernels go through custom_kernel().
    """
    if isinstance(spec, str):
        spec = {"name": spec, "dim": dim if dim is not None else 1}
    name = spec.get("name")
    if name == "custom":
        raise ConfigurationError(
            "custom kernels are constructed programmatically via custom_kernel()")
    if name not in _BUILTINS:
        raise ConfigurationError(
            f"unknown kernel {name!r}; built-ins: {sorted(_BUILTINS)}")
    d = int(spec.get("dim", dim or 1))
    if d < 1:
        raise ConfigurationError(f"dimension must be >= 1, got {d}")
    kernel = _BUILTINS[name](d)
    if validate:
        validate_kernel(kernel, n_samples=n_validation, rng=rng)
    return kernel


def custom_kernel(dim: int, density, envelope: Envelope, floor: GaussianFloor,
                  tail: TailBound, closed_form_rate=None, detailed_balance=False,
                  name: str = "custom", validate: bool = True,
                  n_validation: int = 1000, rng=None) -> CollisionKernel:
    """Wrap a user-supplied density; the envelope is mandatory."""
    if envelope is None:
        raise ConfigurationError("custom kernels require an explicit envelope")
    if floor is None or tail is None:
        raise ConfigurationError("custom kernels require floor and tail constants")
    kernel = CollisionKernel(dim=dim, density=density, envelope=envelope,
                             floor=floor, tail=tail,
                             closed_form_rate=closed_form_rate,
                             detailed_balance=detailed_balance, name=name)
    if validate:
        validate_kernel(kernel, n_samples=n_validation, rng=rng)
    return kernel


def validate_kernel(kernel: CollisionKernel, n_samples: int = 1000, rng=None):
    """Spot-check the kernel invariants at random points.

    Checks incoming-pair symmetry, evenness in w', the Gaussian floor, and
    envelope domination; a handful of pairs also get a quadrature check of
    the declared tail bound. Raises ValidationError naming the first
    violating point.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    d = kernel.dim
    v = rng.normal(0.0, 2.0, size=(n_samples, d))
    vstar = rng.normal(0.0, 2.0, size=(n_samples, d))
    wp = rng.normal(0.0, 1.5, size=(n_samples, d))

    b = np.asarray(kernel.density(v, vstar, wp), dtype=float)
    checks = [
        ("incoming-pair symmetry", np.abs(b - kernel.density(vstar, v, wp)),
         1e-12 * np.maximum(np.abs(b), 1e-300)),
        ("outgoing evenness", np.abs(b - kernel.density(v, vstar, -wp)),
         1e-12 * np.maximum(np.abs(b), 1e-300)),
        ("gaussian floor", np.maximum(kernel.floor.value(wp) - b, 0.0),
         1e-12 * np.maximum(kernel.floor.value(wp), 1e-300)),
        ("envelope domination", np.maximum(b - kernel.envelope.value(v, vstar, wp), 0.0),
         1e-12 * np.maximum(kernel.envelope.value(v, vstar, wp), 1e-300)),
    ]
    for label, err, tol in checks:
        bad = np.nonzero(err > tol)[0]
        if bad.size:
            i = int(bad[0])
            raise ValidationError(
                f"{label} violated at v={v[i]}, v*={vstar[i]}, w'={wp[i]} "
                f"(error {err[i]:.3e})")

    # Tail bound: a few pairs, quadrature against the declared constants.
    sub = slice(0, min(32, n_samples))
    vv, ss = v[sub], vstar[sub]
    integrand = lambda w: kernel.density(vv[:, None, :], ss[:, None, :], w) * np.exp(
        kernel.tail.eta * np.sum(w * w, axis=-1))
    lhs = gauss_hermite_wprime_integral(
        integrand, d, kernel.envelope.decay - kernel.tail.eta, rel_tol=1e-6)
    rhs = kernel.tail.coeff * (
        1.0 + np.linalg.norm(vv - ss, axis=-1) ** kernel.tail.gamma)
    bad = np.nonzero(lhs > rhs * (1.0 + 1e-8))[0]
    if bad.size:
        i = int(bad[0])
        raise ValidationError(
            f"tail bound violated at v={vv[i]}, v*={ss[i]}: {lhs[i]:.6g} > {rhs[i]:.6g}")


def scattering_rate(kernel: CollisionKernel, v, vstar):
    """Module-level alias for CollisionKernel.scattering_rate."""
    return kernel.scattering_rate(v, vstar)


def sample_outgoing(kernel: CollisionKernel, rng, v, vstar):
    """Module-level alias for CollisionKernel.sample_outgoing."""
    return kernel.sample_outgoing(rng, v, vstar)


def detailed_balance_check(kernel: CollisionKernel, n_samples: int = 2000,
                           rng=None) -> float:
    """Largest relative detailed-balance residual at random points.

    In the coordinates (V, w, w') with V = (v+v*)/sqrt(2), detailed balance
    with respect to the standard Maxwellian reads
    exp(-|w|^2/2) B(V,w,w') = exp(-|w'|^2/2) B(V,w',w); the residual is the
    absolute difference over the sum of the two sides.
    """
    rng = np.random.default_rng(7) if rng is None else rng
    d = kernel.dim
    V = rng.normal(0.0, 1.5, size=(n_samples, d))
    w = rng.normal(0.0, 1.5, size=(n_samples, d))
    wp = rng.normal(0.0, 1.5, size=(n_samples, d))

    def b_tilde(V, a, b):
        v = (V + a) / SQRT2
        vstar = (V - a) / SQRT2
        return np.asarray(kernel.density(v, vstar, b), dtype=float)

    lhs = np.exp(-0.5 * np.sum(w * w, axis=-1)) * b_tilde(V, w, wp)
    rhs = np.exp(-0.5 * np.sum(wp * wp, axis=-1)) * b_tilde(V, wp, w)
    denom = lhs + rhs
    res = np.where(denom > 0.0, np.abs(lhs - rhs) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.max(res))
