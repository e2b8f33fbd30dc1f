"""Right-hand sides f(t, x, u) of the supported PDE families.

Covered families: Korteweg-de Vries, Allen-Cahn with a time/space-varying
reaction coefficient, linear advection with time-only or time-space-varying
velocity, and Fokker-Planck equations for pairwise-interacting particles in
a moving trap.  Closed-form benchmark solutions are provided where they
exist (two-soliton KdV, displaced-initial-condition advection).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nets import BatchEval, DerivMask


@dataclass(frozen=True)
class PeriodicBox:
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    @property
    def d(self) -> int:
        return len(self.lo)

    @property
    def lengths(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)


@dataclass(frozen=True)
class UnboundedRd:
    d: int


@dataclass(frozen=True)
class ForceSpec:
    """One-body trap force plus harmonic pair interaction for the particle
    system: g(t, x) = a(t) - x (harmonic trap) or (a(t) - x)^3 (aharmonic),
    K(x, y) = (alpha / d) (y - x), diffusion coefficient D."""

    trap: str  # "harmonic" | "aharmonic"
    a: Callable[[float], float]
    alpha: float
    D: float

    def __post_init__(self):
        if self.trap not in ("harmonic", "aharmonic"):
            raise ValueError(f"unknown trap type {self.trap!r}")
        if self.D < 0:
            raise ValueError("diffusion coefficient must be >= 0")

    def one_body(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.trap == "harmonic":
            return self.a(t) - x
        return (self.a(t) - x) ** 3

    def one_body_dx(self, t: float, x: np.ndarray) -> np.ndarray:
        if self.trap == "harmonic":
            return -np.ones_like(x)
        return -3.0 * (self.a(t) - x) ** 2

    def drift(self, t: float, X: np.ndarray) -> np.ndarray:
        """h_i(t, x) = g(t, x_i) + sum_j K(x_i, x_j), for X of shape (n, d)."""
        pair = self.alpha * (X.mean(axis=1, keepdims=True) - X)
        return self.one_body(t, X) + pair

    def drift_div_terms(self, t: float, X: np.ndarray) -> np.ndarray:
        """Diagonal derivatives d h_i / d x_i, shape (n, d)."""
        d = X.shape[1]
        return self.one_body_dx(t, X) + self.alpha * (1.0 - d) / d


@dataclass(frozen=True)
class Kdv:
    """KdV equation u_t = -u_xxx - 6 u u_x on a periodic interval."""

    domain: PeriodicBox

    @property
    def d(self) -> int:
        return 1


@dataclass(frozen=True)
class AllenCahn:
    """Reaction-diffusion u_t = eps u_xx - a(t, x)(u - u^3), periodic in 1-D."""

    eps: float
    reaction_coeff: Callable[[float, np.ndarray], np.ndarray]
    domain: PeriodicBox

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def d(self) -> int:
        return 1


@dataclass(frozen=True)
class Advection:
    """Transport u_t = -a(t, x) . grad u on R^d."""

    velocity: Callable[[float, np.ndarray], np.ndarray]
    d: int
    time_only: bool = False

    @property
    def domain(self) -> UnboundedRd:
        return UnboundedRd(self.d)


@dataclass(frozen=True)
class FokkerPlanck:
    """Density evolution of interacting particles: u_t = sum_i
    (-d_{x_i}(u h_i) + D d^2_{x_i} u), divergence expanded analytically."""

    force: ForceSpec
    d: int

    @property
    def domain(self) -> UnboundedRd:
        return UnboundedRd(self.d)


@dataclass(frozen=True)
class TimeReversed:
    """Wrapper running a problem backwards: f~(t, x, u) = -f(T - t, x, u)."""

    inner: "PdeProblem"
    horizon: float

    @property
    def d(self) -> int:
        return self.inner.d

    @property
    def domain(self):
        return self.inner.domain


PdeProblem = Kdv | AllenCahn | Advection | FokkerPlanck | TimeReversed


def required_mask(problem: PdeProblem, with_mixed: bool = False) -> DerivMask:
    """Derivative mask the problem's right-hand side needs, plus grad_theta."""
    if isinstance(problem, TimeReversed):
        return required_mask(problem.inner, with_mixed)
    if isinstance(problem, Kdv):
        return DerivMask(grad_theta=True, grad_x=True, d3_x=True,
                         mixed_spatial=with_mixed)
    if isinstance(problem, AllenCahn):
        return DerivMask(grad_theta=True, diag_hess_x=True,
                         mixed_spatial=with_mixed)
    if isinstance(problem, Advection):
        return DerivMask(grad_theta=True, grad_x=True,
                         mixed_spatial=with_mixed)
    return DerivMask(grad_theta=True, grad_x=True, diag_hess_x=True,
                     mixed_spatial=with_mixed)


def rhs_batch(problem: PdeProblem, t: float, X: np.ndarray,
              be: BatchEval) -> np.ndarray:
    """Evaluate f(t, x_i, U) for a batch of points, shape (n,)."""
    if isinstance(problem, TimeReversed):
        return -rhs_batch(problem.inner, problem.horizon - t, X, be)
    if isinstance(problem, Kdv):
        _require(be.d3_x is not None and be.grad_x is not None,
                 "KdV needs grad_x and d3_x")
        return -be.d3_x - 6.0 * be.u * be.grad_x[:, 0]
    if isinstance(problem, AllenCahn):
        _require(be.diag_hess_x is not None, "Allen-Cahn needs diag_hess_x")
        a = problem.reaction_coeff(t, X[:, 0])
        return problem.eps * be.diag_hess_x[:, 0] - a * (be.u - be.u ** 3)
    if isinstance(problem, Advection):
        _require(be.grad_x is not None, "advection needs grad_x")
        vel = problem.velocity(t, X)
        return -np.sum(vel * be.grad_x, axis=1)
    if isinstance(problem, FokkerPlanck):
        _require(be.grad_x is not None and be.diag_hess_x is not None,
                 "Fokker-Planck needs grad_x and diag_hess_x")
        force = problem.force
        h = force.drift(t, X)
        div = force.drift_div_terms(t, X).sum(axis=1)
        return (-be.u * div - np.sum(h * be.grad_x, axis=1)
                + force.D * be.diag_hess_x.sum(axis=1))
    raise TypeError(f"unknown problem type {type(problem)!r}")


def rhs(problem: PdeProblem, t: float, x: np.ndarray, bundle) -> float:
    """Single-point right-hand side; see :func:`rhs_batch`."""
    be = BatchEval(
        u=np.atleast_1d(np.asarray(bundle.u, dtype=float)),
        grad_x=None if bundle.grad_x is None else np.atleast_2d(bundle.grad_x),
        diag_hess_x=(None if bundle.diag_hess_x is None
                     else np.atleast_2d(bundle.diag_hess_x)),
        d3_x=None if bundle.d3_x is None else np.atleast_1d(bundle.d3_x),
    )
    return float(rhs_batch(problem, t, np.atleast_2d(x), be)[0])


def rhs_grad_theta(problem: PdeProblem, t: float, X: np.ndarray,
                   be: BatchEval) -> np.ndarray:
    """Parameter gradient of the right-hand side, shape (n, p_active).

    Requires the mixed-spatial fields of the evaluation; used by the
    optimization-based implicit time step.
    """
    if isinstance(problem, TimeReversed):
        return -rhs_grad_theta(problem.inner, problem.horizon - t, X, be)
    if isinstance(problem, AllenCahn):
        _require(be.grad_theta_diag_hess is not None,
                 "need mixed spatial derivatives")
        a = problem.reaction_coeff(t, X[:, 0])
        return (problem.eps * be.grad_theta_diag_hess[:, :, 0]
                - (a * (1.0 - 3.0 * be.u ** 2))[:, None] * be.grad_theta)
    if isinstance(problem, Advection):
        _require(be.grad_theta_grad_x is not None,
                 "need mixed spatial derivatives")
        vel = problem.velocity(t, X)
        return -np.einsum("nk,npk->np", vel, be.grad_theta_grad_x)
    if isinstance(problem, FokkerPlanck):
        _require(be.grad_theta_grad_x is not None
                 and be.grad_theta_diag_hess is not None,
                 "need mixed spatial derivatives")
        force = problem.force
        h = force.drift(t, X)
        div = force.drift_div_terms(t, X).sum(axis=1)
        return (-div[:, None] * be.grad_theta
                - np.einsum("nk,npk->np", h, be.grad_theta_grad_x)
                + force.D * be.grad_theta_diag_hess.sum(axis=2))
    raise NotImplementedError(
        f"analytic rhs parameter gradient not available for {type(problem)!r}")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(f"derivative bundle incomplete: {msg}")


# Advection coefficients and exact solution --------------------------------

def advection_scales(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis amplitude and frequency vectors of the benchmark velocity."""
    a_s = np.arange(1, d + 1, dtype=float)
    a_v = 2.0 + (2.0 / d) * np.arange(0, d, dtype=float)
    return a_s, a_v


def velocity_time_only(d: int) -> Callable[[float, np.ndarray], np.ndarray]:
    """a_t(t) = a_s * (sin(a_v pi t) + 5/4), independent of x."""
    a_s, a_v = advection_scales(d)

    def vel(t, X):
        v = a_s * (np.sin(a_v * np.pi * t) + 1.25)
        return np.broadcast_to(v, X.shape)

    return vel


def velocity_spacetime(d: int) -> Callable[[float, np.ndarray], np.ndarray]:
    """a_st(t, x) = a_s * (sin(a_v pi t) + 3) * (x + 1) / 10."""
    a_s, a_v = advection_scales(d)

    def vel(t, X):
        return a_s * (np.sin(a_v * np.pi * t) + 3.0) * (X + 1.0) / 10.0

    return vel


def advection_displacement(d: int, t: float) -> np.ndarray:
    """Closed-form integral of the time-only velocity over [0, t]."""
    a_s, a_v = advection_scales(d)
    return a_s * ((1.0 - np.cos(a_v * np.pi * t)) / (a_v * np.pi) + 1.25 * t)


def advection_exact(u0: Callable[[np.ndarray], np.ndarray], d: int,
                    t: float, X: np.ndarray) -> np.ndarray:
    """Exact solution u(t, x) = u0(x - s(t)) of the time-only-velocity
    transport problem; raises if called for a space-dependent velocity."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    s = advection_displacement(d, t)
    return u0(X - s[None, :])


# KdV exact solution --------------------------------------------------------

def kdv_exact(k1: float, k2: float, x1: float, x2: float, t: float,
              x: np.ndarray) -> np.ndarray:
    """Two-soliton solution of u_t = -u_xxx - 6 u u_x on the real line.

    Built from the bilinear (Hirota) form u = 2 d^2/dx^2 log F with
    F = 1 + e1 + e2 + A12 e1 e2, phases eta_i = k_i (x - x_i) - k_i^3 t,
    and interaction coefficient A12 = ((k1 - k2) / (k1 + k2))^2.  The
    solitons have amplitudes k_i^2 / 2, speeds k_i^2 and are located near
    x_1, x_2 at t = 0.
    """
    if k1 <= 0 or k2 <= 0 or k1 == k2:
        raise ValueError("need distinct positive wavenumbers")
    x = np.asarray(x, dtype=float)
    e1 = np.exp(k1 * (x - x1) - k1 ** 3 * t)
    e2 = np.exp(k2 * (x - x2) - k2 ** 3 * t)
    A = ((k1 - k2) / (k1 + k2)) ** 2
    F = 1.0 + e1 + e2 + A * e1 * e2
    Fx = k1 * e1 + k2 * e2 + A * (k1 + k2) * e1 * e2
    Fxx = k1 ** 2 * e1 + k2 ** 2 * e2 + A * (k1 + k2) ** 2 * e1 * e2
    return 2.0 * (Fxx * F - Fx * Fx) / (F * F)


def kdv_soliton(k: float, x0: float, t: float, x: np.ndarray) -> np.ndarray:
    """Single soliton (k^2 / 2) sech^2((k / 2)(x - k^2 t - x0))."""
    x = np.asarray(x, dtype=float)
    return (k ** 2 / 2.0) / np.cosh(0.5 * k * (x - k ** 2 * t - x0)) ** 2
