"""Monte-Carlo assembly of the Galerkin system and the regularized solve.

The instantaneous parameter dynamics solve (M + lambda I) eta = F with

    M = (1/n) sum_i g_i (x) g_i,   F = (1/n) sum_i g_i f(t, x_i, U),

where g_i is the parameter gradient of the network at sample x_i.  Samples
are brought into a canonical (lexicographic) order and reduced with a fixed
pairwise tree before averaging, so the estimates are exactly invariant
under permutations of the sample set and independent of any worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import pde
from .nets import NetSpec, ParamVector, eval_batch
from .sampling import Measure, SampleSet


@dataclass
class AssembledSystem:
    M: np.ndarray  # (p, p)
    F: np.ndarray  # (p,)
    t: float
    n: int
    lam: float


def pairwise_sum(terms: np.ndarray, axis: int = 0) -> np.ndarray:
    """Deterministic balanced-tree sum along ``axis`` (axis 0 internally)."""
    arr = np.moveaxis(np.asarray(terms), axis, 0)
    while arr.shape[0] > 1:
        k = arr.shape[0]
        if k % 2:
            tail = arr[-1]
            arr = arr[:-1:2] + arr[1::2]
            arr = np.concatenate([arr, tail[None]], axis=0)
        else:
            arr = arr[::2] + arr[1::2]
    return arr[0]


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Index array sorting points lexicographically by coordinates.

    Reducing in this order makes the floating-point sums independent of
    the order in which the samples were produced.
    """
    return np.lexsort(points.T[::-1])


def default_regularization(M: np.ndarray) -> float:
    """Scale-free Tikhonov floor: 1e-6 tr(M) / p."""
    p = M.shape[0]
    return 1e-6 * float(np.trace(M)) / p


def assemble(spec: NetSpec, theta: ParamVector, problem, t: float,
             samples: SampleSet, reweight: Measure | None = None,
             lam: float | None = None,
             self_normalize: bool = True) -> AssembledSystem:
    """Estimate M and F from a sample set at time t.

    In plain mode the samples are treated as draws from the assembly
    measure itself.  With ``reweight`` given, the samples were drawn from
    an adapted measure (recorded in ``samples.log_density``) while the
    integrals are taken against the reference measure ``reweight``; each
    term is multiplied by the density ratio reference/adapted.  Because the
    adapted measure's normalization is generally unknown in closed form,
    the weights are self-normalized by their sample mean (bias O(1/n)),
    which can be disabled via ``self_normalize=False``.
    """
    mask = pde.required_mask(problem)
    X = samples.points
    be = eval_batch(spec, theta, X, mask)
    g = be.grad_theta  # (n, p_active)
    f = pde.rhs_batch(problem, t, X, be)

    weights = None
    if reweight is not None:
        log_ref = reweight.log_density(X)
        weights = np.exp(log_ref - samples.log_density)
        if not np.all(np.isfinite(weights)) or np.any(weights < 0):
            raise ValueError("non-finite or negative importance weight")
        if self_normalize:
            weights = weights / weights.mean()

    order = canonical_order(X)
    g = g[order]
    f = f[order]
    if weights is not None:
        weights = weights[order]
        g_w = g * weights[:, None]
    else:
        g_w = g

    n = samples.n
    M = pairwise_sum(np.einsum("ni,nj->nij", g_w, g)) / n
    F = pairwise_sum(g_w * f[:, None]) / n
    M = 0.5 * (M + M.T)  # exact symmetry against roundoff
    if lam is None:
        lam = default_regularization(M)
    return AssembledSystem(M=M, F=F, t=t, n=n, lam=lam)


class SingularSystemError(np.linalg.LinAlgError):
    """M + lambda I is not positive definite; the caller must raise lambda."""


def solve_theta_dot(sys: AssembledSystem) -> np.ndarray:
    """Solve (M + lambda I) eta = F via Cholesky factorization."""
    if sys.lam < 0:
        raise ValueError("regularization must be >= 0")
    A = sys.M + sys.lam * np.eye(sys.M.shape[0])
    try:
        cho = scipy.linalg.cho_factor(A, lower=True)
    except scipy.linalg.LinAlgError as err:
        raise SingularSystemError(
            f"Galerkin matrix singular at t={sys.t} (lambda={sys.lam}); "
            "increase the regularization") from err
    eta = scipy.linalg.cho_solve(cho, sys.F)
    resid = np.linalg.norm(A @ eta - sys.F)
    if not resid <= 1e-8 * (np.linalg.norm(sys.F) + 1.0):
        raise SingularSystemError(
            f"solve residual {resid:.3e} exceeds tolerance at t={sys.t}")
    return eta
