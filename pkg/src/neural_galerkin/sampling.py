"""Sampling measures for Monte-Carlo estimation of the Galerkin operators.

Two measure families are supported: a uniform box (the static baseline) and
an equal- or unequal-weight isotropic Gaussian mixture (the solution-adapted
measure built from the network's own nodes).  All draws take an explicit
``numpy.random.Generator``; there is no global RNG state, so identical
(measure, n, seed) triples reproduce bit-identical sample sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp


@dataclass
class UniformBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.atleast_1d(np.asarray(self.lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(self.hi, dtype=float))
        if self.lo.shape != self.hi.shape or np.any(self.lo >= self.hi):
            raise ValueError("uniform box requires lo < hi componentwise")

    @property
    def d(self) -> int:
        return self.lo.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.d))

    def log_density(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        inside = np.all((X >= self.lo) & (X <= self.hi), axis=1)
        log_vol = float(np.sum(np.log(self.hi - self.lo)))
        out = np.full(X.shape[0], -np.inf)
        out[inside] = -log_vol
        return out


@dataclass
class GaussianMixture:
    """Isotropic Gaussian mixture: means (m, d), per-component stds (m,)."""

    means: np.ndarray
    stds: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.stds = np.atleast_1d(np.asarray(self.stds, dtype=float))
        m = self.means.shape[0]
        if self.weights is None:
            self.weights = np.full(m, 1.0 / m)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.stds.shape != (m,) or self.weights.shape != (m,):
            raise ValueError("stds and weights must have one entry per component")
        if np.any(self.stds <= 0) or np.any(self.weights < 0):
            raise ValueError("stds must be positive, weights non-negative")
        total = self.weights.sum()
        if total <= 0:
            raise ValueError("weights must not all vanish")
        self.weights = self.weights / total

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.d))
        return self.means[comp] + self.stds[comp, None] * noise

    def log_density(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        d = self.d
        diff = X[:, None, :] - self.means[None, :, :]
        sq = np.sum(diff * diff, axis=2) / (self.stds ** 2)[None, :]
        log_comp = (-0.5 * sq - d * np.log(self.stds)[None, :]
                    - 0.5 * d * np.log(2.0 * np.pi))
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights)
        return logsumexp(log_comp + log_w[None, :], axis=1)


Measure = UniformBox | GaussianMixture


@dataclass
class SampleSet:
    """Points drawn from a measure together with their generating density."""

    points: np.ndarray  # (n, d)
    log_density: np.ndarray  # (n,)
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.points.shape[0]


def draw(measure: Measure, n: int, rng: np.random.Generator,
         seed: int | None = None) -> SampleSet:
    """Draw n i.i.d. samples and record the measure's log-density at them."""
    if n < 1:
        raise ValueError("need n >= 1 samples")
    points = measure.sample(n, rng)
    return SampleSet(points=points, log_density=measure.log_density(points),
                     seed=seed)


def density(measure: Measure, x: np.ndarray) -> np.ndarray:
    """Normalized probability density of the measure at x (or batch of x)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    out = np.exp(measure.log_density(np.atleast_2d(x)))
    return float(out[0]) if single else out


def dump_csv(samples: SampleSet, path) -> None:
    """Debugging aid: write points and log-densities as CSV."""
    data = np.column_stack([samples.points, samples.log_density])
    d = samples.points.shape[1]
    header = ",".join([f"x{i}" for i in range(d)] + ["log_density"])
    np.savetxt(path, data, delimiter=",", header=header, comments="")
