"""Independent reference solutions used for acceptance checks.

- :func:`ac_reference`: semi-implicit finite-difference solver for the
  reaction-diffusion benchmark (diffusion implicit via a cyclic tridiagonal
  solve, reaction explicit).
- :func:`fp_moment_odes`: closed linear ODEs for the mean and covariance of
  the harmonic-trap particle density, integrated with the adaptive
  Dormand-Prince integrator.
- :func:`euler_maruyama`: direct particle simulation of the underlying SDE
  with ensemble statistics.

None of these routes share code with the Galerkin solver they benchmark,
beyond the shared ODE integrator used at very tight tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .integrators import integrate_ode
from .pde import ForceSpec


@dataclass
class GridTrajectory:
    times: np.ndarray  # (k,)
    x: np.ndarray  # (w,)
    u: np.ndarray  # (k, w)


def ac_reference(n_grid: int, dt: float, eps: float, reaction_coeff,
                 u0, t_end: float, domain=(0.0, 2.0 * np.pi),
                 n_snapshots: int = 51) -> GridTrajectory:
    """Semi-implicit Euler reference for u_t = eps u_xx - a(t,x)(u - u^3).

    Periodic second-order central differences on ``n_grid`` points; the
    diffusion term is treated implicitly (cyclic tridiagonal system via a
    Sherman-Morrison correction of a plain tridiagonal solve), the reaction
    explicitly.
    """
    if n_grid < 16:
        raise ValueError("need at least 16 grid points")
    lo, hi = domain
    w = n_grid
    h = (hi - lo) / w
    x = lo + h * np.arange(w)
    u = np.asarray(u0(x), dtype=float).copy()

    # (I - dt eps D2) with periodic wrap folded in by Sherman-Morrison:
    # A_cyclic = A_tri + alpha (e_0 e_{w-1}^T + e_{w-1} e_0^T) is handled as
    # A_tri' + uu vv^T with the standard rank-1 trick.
    r = dt * eps / (h * h)
    # base cyclic coefficients: diag 1 + 2r, off-diag -r (incl. corners)
    gamma = -(1.0 + 2.0 * r)  # free parameter of the rank-1 split
    diag = np.full(w, 1.0 + 2.0 * r)
    diag_mod = diag.copy()
    diag_mod[0] -= gamma
    diag_mod[-1] -= (r * r) / gamma
    band = np.zeros((3, w))
    band[0, 1:] = -r
    band[1, :] = diag_mod
    band[2, :-1] = -r
    uu = np.zeros(w)
    uu[0] = gamma
    uu[-1] = -r
    zz = scipy.linalg.solve_banded((1, 1), band, uu)

    def cyclic_solve(b):
        y = scipy.linalg.solve_banded((1, 1), band, b)
        vy = y[0] - (r / gamma) * y[-1]
        vz = zz[0] - (r / gamma) * zz[-1]
        return y - zz * (vy / (1.0 + vz))

    n_steps = int(round(t_end / dt))
    snap_every = max(1, n_steps // (n_snapshots - 1))
    times = [0.0]
    snaps = [u.copy()]
    t = 0.0
    for k in range(n_steps):
        a = reaction_coeff(t, x)
        rhs = u - dt * a * (u - u ** 3)
        u = cyclic_solve(rhs)
        t = (k + 1) * dt
        if not np.all(np.isfinite(u)):
            raise FloatingPointError(f"reference solution blew up at t={t}")
        if (k + 1) % snap_every == 0 or k + 1 == n_steps:
            times.append(t)
            snaps.append(u.copy())
    return GridTrajectory(times=np.array(times), x=x, u=np.array(snaps))


def fp_moment_odes(d: int, alpha: float, a, D: float, mean0: np.ndarray,
                   cov0: np.ndarray, t_end: float, rtol: float = 1e-10,
                   atol: float = 1e-12) -> tuple:
    """Mean and covariance ODEs of the harmonic-trap particle density.

        dm_i/dt = -(1 + alpha) m_i + a(t) + (alpha/d) sum_j m_j
        dC_ij/dt = -2 (1 + alpha) C_ij
                   + (alpha/d) sum_k (C_kj + C_ki) + 2 D delta_ij

    The diffusion source uses the SDE diffusion coefficient D, the only
    dimensionally consistent reading of the inverse-temperature constant.
    Returns (times, means (k, d), covs (k, d, d)).
    """
    mean0 = np.asarray(mean0, dtype=float)
    cov0 = np.asarray(cov0, dtype=float)
    if not np.allclose(cov0, cov0.T):
        raise ValueError("cov0 must be symmetric")
    ones = np.ones(d)

    def rhs(t, y):
        m = y[:d]
        C = y[d:].reshape(d, d)
        dm = -(1.0 + alpha) * m + a(t) + (alpha / d) * m.sum()
        col = C.sum(axis=0)
        dC = (-2.0 * (1.0 + alpha) * C
              + (alpha / d) * (np.outer(ones, col) + np.outer(col, ones))
              + 2.0 * D * np.eye(d))
        return np.concatenate([dm, dC.ravel()])

    y0 = np.concatenate([mean0, cov0.ravel()])
    ts, ys = integrate_ode(rhs, 0.0, y0, t_end, rtol=rtol, atol=atol)
    means = ys[:, :d]
    covs = ys[:, d:].reshape(-1, d, d)
    return ts, means, covs


@dataclass
class EnsembleTrajectory:
    times: np.ndarray
    means: np.ndarray  # (k, d)
    covs: np.ndarray  # (k, d, d)
    endpoint: np.ndarray  # (paths, d) raw samples at t_end
    paths: int


def euler_maruyama(force: ForceSpec, d: int, paths: int, dt: float,
                   t_end: float, rng: np.random.Generator,
                   x0_sampler=None, record_every: int = 10
                   ) -> EnsembleTrajectory:
    """Euler-Maruyama simulation of dX_i = h_i dt + sqrt(2 D) dW_i.

    ``x0_sampler(paths, rng)`` draws the initial ensemble (standard normal
    by default).  Ensemble mean and covariance are recorded every
    ``record_every`` steps.
    """
    if paths < 1:
        raise ValueError("need at least one path")
    if x0_sampler is None:
        X = rng.standard_normal((paths, d))
    else:
        X = np.asarray(x0_sampler(paths, rng), dtype=float)
    n_steps = int(round(t_end / dt))
    sq = np.sqrt(2.0 * force.D * dt)
    times = [0.0]
    means = [X.mean(axis=0)]
    covs = [np.cov(X.T, bias=False).reshape(d, d)]
    t = 0.0
    for k in range(n_steps):
        drift = force.drift(t, X)
        X = X + dt * drift + sq * rng.standard_normal((paths, d))
        t = (k + 1) * dt
        if not np.all(np.isfinite(X)):
            raise FloatingPointError(f"particle ensemble blew up at t={t}")
        if (k + 1) % record_every == 0 or k + 1 == n_steps:
            times.append(t)
            means.append(X.mean(axis=0))
            covs.append(np.cov(X.T, bias=False).reshape(d, d))
    return EnsembleTrajectory(times=np.array(times), means=np.array(means),
                              covs=np.array(covs), endpoint=X, paths=paths)
