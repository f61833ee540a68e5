"""Initial velocity densities: centered Gaussians and Gaussian mixtures.

Every built-in density has zero mean, admits exact iid sampling, and can be
spot-checked against the Gaussian lower-bound requirement on a compact box.
The Fourier-integrability requirement on the initial data is documented but
not enforced: it cannot be verified numerically for arbitrary densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class VelocityDensity:
    """Mixture of isotropic Gaussians sum_j weights[j] N(means[j], sigmas[j]^2 I)."""

    dim: int
    weights: tuple
    means: tuple        # tuple of length-dim tuples
    sigmas: tuple
    name: str = "gaussian_mixture"

    @property
    def is_gaussian(self) -> bool:
        return len(self.weights) == 1

    def pdf(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = np.zeros(v.shape[:-1])
        for wj, mj, sj in zip(self.weights, self.means, self.sigmas):
            diff = v - np.asarray(mj)
            norm = (2.0 * math.pi * sj * sj) ** (-0.5 * self.dim)
            out = out + wj * norm * np.exp(-0.5 * np.sum(diff * diff, axis=-1)
                                           / (sj * sj))
        return out

    def logpdf(self, v) -> np.ndarray:
        return np.log(np.maximum(self.pdf(v), 1e-300))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        out = rng.normal(size=(n, self.dim))
        out *= np.asarray(self.sigmas)[comp][:, None]
        out += np.asarray(self.means)[comp]
        return out

    def second_moment(self) -> float:
        """E|v|^2 of the mixture."""
        total = 0.0
        for wj, mj, sj in zip(self.weights, self.means, self.sigmas):
            total += wj * (self.dim * sj * sj + float(np.sum(np.square(mj))))
        return total

    def gaussian_floor_margin(self, box: float = 6.0, n: int = 2001) -> float:
        """min over the box of pdf(v)/(gamma*exp(-|v|^2/gamma)) for the best gamma.

        A value >= 1 certifies the Gaussian lower bound on the box. Only a
        numeric spot check; gamma is scanned over a coarse range.
        """
        if self.dim == 1:
            pts = np.linspace(-box, box, n)[:, None]
        else:
            axis = np.linspace(-box, box, int(math.sqrt(n)))
            pts = np.stack(np.meshgrid(*([axis] * self.dim), indexing="ij"),
                           axis=-1).reshape(-1, self.dim)
        p = self.pdf(pts)
        r2 = np.sum(pts * pts, axis=-1)
        best = 0.0
        for gamma in np.geomspace(1e-3, 1.0, 40):
            floor = gamma * np.exp(-r2 / gamma)
            best = max(best, float(np.min(p / floor)))
        return best


def gaussian(sigma: float = 1.0, dim: int = 1) -> VelocityDensity:
    return VelocityDensity(dim=dim, weights=(1.0,),
                           means=(tuple([0.0] * dim),), sigmas=(float(sigma),),
                           name="gaussian")


def make_density(spec, dim: int | None = None) -> VelocityDensity:
    """Build a density from {"name", ...} descriptors used in run configs."""
    if isinstance(spec, VelocityDensity):
        return spec
    if isinstance(spec, str):
        spec = {"name": spec}
    name = spec.get("name")
    d = int(spec.get("dim", dim or 1))
    if name == "gaussian":
        return gaussian(sigma=float(spec.get("sigma", 1.0)), dim=d)
    if name == "gaussian_mixture":
        weights = tuple(float(x) for x in spec["weights"])
        sigmas = tuple(float(x) for x in spec["sigmas"])
        means = tuple(tuple(np.atleast_1d(np.asarray(m, dtype=float)))
                      for m in spec["means"])
        if abs(sum(weights) - 1.0) > 1e-12:
            raise ConfigurationError("mixture weights must sum to 1")
        mean = np.sum([w * np.asarray(m) for w, m in zip(weights, means)], axis=0)
        if np.max(np.abs(mean)) > 1e-12:
            raise ConfigurationError(f"mixture must have zero mean, got {mean}")
        if any(len(m) != d for m in means):
            raise ConfigurationError("mixture means must match the dimension")
        return VelocityDensity(dim=d, weights=weights, means=means, sigmas=sigmas)
    raise ConfigurationError(f"unknown density {name!r}")


def symmetric_bimodal(offset: float = 1.5, sigma: float = 0.5,
                      dim: int = 1) -> VelocityDensity:
    """Equal-weight two-bump mixture at +-offset along the first axis."""
    m = [0.0] * dim
    mp = list(m)
    mp[0] = offset
    mm = list(m)
    mm[0] = -offset
    return VelocityDensity(dim=dim, weights=(0.5, 0.5),
                           means=(tuple(mp), tuple(mm)),
                           sigmas=(sigma, sigma), name="bimodal")
