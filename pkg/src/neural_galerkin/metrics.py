"""Reported quantities: relative l2 error, residual estimate, Monte-Carlo
marginals, and density statistics of squared-coefficient networks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import pde
from .nets import (SHALLOW_SQUARED_GAUSSIAN, NetSpec, ParamVector,
                   as_mixture, eval_batch)
from .sampling import GaussianMixture, Measure, draw


def rel_l2_error(reference: np.ndarray, approx: np.ndarray,
                 rooted: bool = False) -> float:
    """Ratio sum_k ||u(t_k) - u~(t_k)||^2 / sum_k ||u(t_k)||^2.

    The default is the plain ratio of squared norms; ``rooted=True`` takes
    the square root for a conventional relative l2 norm.
    """
    reference = np.atleast_2d(np.asarray(reference, dtype=float))
    approx = np.atleast_2d(np.asarray(approx, dtype=float))
    if reference.shape != approx.shape:
        raise ValueError("reference and approximation must share a grid")
    denom = float(np.sum(reference ** 2))
    if denom == 0.0:
        raise ZeroDivisionError("reference trajectory is identically zero")
    ratio = float(np.sum((reference - approx) ** 2)) / denom
    return np.sqrt(ratio) if rooted else ratio


def residual_estimate(spec: NetSpec, theta: ParamVector,
                      theta_dot: np.ndarray, problem, t: float,
                      kappa: float, n: int,
                      rng: np.random.Generator) -> float:
    """Monte-Carlo estimate of (1/2) E |grad_theta U . theta_dot - f|^2
    under the network's own widened mixture (bandwidth scale kappa)."""
    measure = as_mixture(spec, theta, kappa)
    samples = draw(measure, n, rng)
    be = eval_batch(spec, theta, samples.points, pde.required_mask(problem))
    r = be.grad_theta @ np.asarray(theta_dot) - pde.rhs_batch(
        problem, t, samples.points, be)
    return 0.5 * float(np.mean(r * r))


def marginals(u_fn, measure_fn, axis: int, d: int, t_grid, xi_grid,
              n: int = 8192, rng: np.random.Generator | None = None
              ) -> np.ndarray:
    """Monte-Carlo marginal of u along one axis.

    ``u_fn(t, X)`` evaluates the field; ``measure_fn(t)`` returns a Measure
    over the remaining d-1 coordinates from which the integration variables
    are drawn (importance sampling against its density).  Returns an array
    of shape (len(t_grid), len(xi_grid)).
    """
    rng = rng or np.random.default_rng(0)
    t_grid = np.asarray(t_grid, dtype=float)
    xi_grid = np.asarray(xi_grid, dtype=float)
    other = [k for k in range(d) if k != axis]
    out = np.empty((t_grid.size, xi_grid.size))
    for it, t in enumerate(t_grid):
        if d == 1:
            X = xi_grid[:, None]
            out[it] = u_fn(t, X)
            continue
        measure = measure_fn(t)
        Z = draw(measure, n, rng)
        inv_q = np.exp(-Z.log_density)  # (n,)
        X = np.empty((xi_grid.size, n, d))
        X[:, :, other] = Z.points[None, :, :]
        X[:, :, axis] = xi_grid[:, None]
        vals = u_fn(t, X.reshape(-1, d)).reshape(xi_grid.size, n)
        out[it] = np.mean(vals * inv_q[None, :], axis=1)
    return out


@dataclass
class DensityStats:
    mean: np.ndarray
    cov: np.ndarray
    entropy: float
    #: entropy under the coefficient-sum normalization U / sum_i c_i^2,
    #: which matches the reported convention but is not a true density
    #: unless all bandwidths agree
    entropy_coeff_norm: float
    #: Monte-Carlo standard error of the entropy estimate
    entropy_se: float
    node_weights: np.ndarray
    total_mass: float


def component_masses(spec: NetSpec, theta: ParamVector) -> np.ndarray:
    """Integral of each squared-coefficient node: c_i^2 (pi / w_i^2)^(d/2)."""
    if spec.architecture != SHALLOW_SQUARED_GAUSSIAN:
        raise ValueError("density statistics need a squared-coefficient net")
    c, w = theta.coeff, theta.bandwidth
    if np.all(c == 0.0):
        raise ValueError("all coefficients vanish; density undefined")
    return c * c * (np.pi / (w * w)) ** (spec.d / 2.0)


def normalized_mixture(spec: NetSpec, theta: ParamVector) -> GaussianMixture:
    """The squared-coefficient net as an exactly normalized mixture."""
    masses = component_masses(spec, theta)
    stds = 1.0 / (np.sqrt(2.0) * np.abs(theta.bandwidth))
    return GaussianMixture(means=theta.centers.copy(), stds=stds,
                           weights=masses / masses.sum())


def mixture_moments(spec: NetSpec, theta: ParamVector
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and covariance of the normalized squared-coefficient net.

    Closed-form mixture moments (no Monte-Carlo noise): mean = sum_i v_i b_i
    and cov = sum_i v_i (s_i^2 I + b_i b_i^T) - mean mean^T with node
    weights v_i and per-node variance s_i^2 = 1 / (2 w_i^2).
    """
    masses = component_masses(spec, theta)
    v = masses / masses.sum()
    b = theta.centers
    s2 = 1.0 / (2.0 * theta.bandwidth ** 2)
    mean = v @ b
    cov = (np.einsum("i,ij,ik->jk", v, b, b)
           + np.diag(np.full(spec.d, float(v @ s2)))
           - np.outer(mean, mean))
    return mean, cov


def density_stats(spec: NetSpec, theta: ParamVector, n: int,
                  rng: np.random.Generator) -> DensityStats:
    """Sample mean, covariance, and Monte-Carlo entropy of the normalized
    squared-coefficient network density."""
    masses = component_masses(spec, theta)
    total = float(masses.sum())
    mixture = normalized_mixture(spec, theta)
    X = mixture.sample(n, rng)
    u = eval_batch(spec, theta, X).u
    log_norm = np.log(u / total)
    entropy = -float(np.mean(log_norm))
    se = float(np.std(log_norm, ddof=1)) / np.sqrt(n)
    coeff_sum = float(np.sum(theta.coeff ** 2))
    entropy_alt = -float(np.mean(np.log(u / coeff_sum)))
    return DensityStats(
        mean=X.mean(axis=0),
        cov=np.cov(X.T, bias=False).reshape(spec.d, spec.d),
        entropy=entropy,
        entropy_coeff_norm=entropy_alt,
        entropy_se=se,
        node_weights=masses / total,
        total_mass=total,
    )


def gaussian_entropy(cov: np.ndarray) -> float:
    """Differential entropy of a Gaussian with the given covariance."""
    cov = np.atleast_2d(cov)
    d = cov.shape[0]
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise ValueError("covariance must be positive definite")
    return 0.5 * (d * np.log(2.0 * np.pi * np.e) + logdet)
