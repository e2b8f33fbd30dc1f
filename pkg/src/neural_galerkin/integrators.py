"""Time integration of the parameter dynamics M(theta) theta_dot = F(t, theta).

Three schemes are available:

- forward Euler with a fixed step,
- the Dormand-Prince 5(4) embedded pair with PI step-size control (the
  adaptive explicit workhorse),
- an optimization-based backward Euler step that minimizes the
  time-discrete residual with SGD or Adam.

At every explicit stage (and every implicit inner iteration) a fresh sample
set is drawn from the measure policy to estimate M and F, unless
``freeze_per_step`` pins one sample set per step for variance studies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import pde
from .assembly import assemble, solve_theta_dot
from .nets import NetSpec, ParamVector, as_mixture, eval_batch
from .sampling import Measure, draw


class StepSizeUnderflow(RuntimeError):
    """Adaptive step fell below the minimum; stiffness or sampling noise."""


# Measure policies ---------------------------------------------------------

@dataclass
class MeasurePolicy:
    """How and where to sample when estimating M and F.

    ``kind='adaptive'`` rebuilds the network's own Gaussian mixture
    (bandwidths scaled by kappa) at the current parameters before each
    draw; ``kind='static'`` always samples the fixed ``measure``.  With
    ``reweight`` set, estimates are importance-reweighted to that nominal
    measure.
    """

    kind: str  # "adaptive" | "static"
    n: int
    measure: Measure | None = None
    kappa: float = 1.0
    reweight: Measure | None = None
    freeze_per_step: bool = False

    def __post_init__(self):
        if self.kind not in ("adaptive", "static"):
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind == "static" and self.measure is None:
            raise ValueError("static policy needs a measure")

    def measure_for(self, spec: NetSpec, theta: ParamVector) -> Measure:
        if self.kind == "static":
            return self.measure
        return as_mixture(spec, theta, self.kappa)


# Step controllers ----------------------------------------------------------

@dataclass
class ForwardEuler:
    dt: float


@dataclass
class RK45DormandPrince:
    rtol: float = 1e-6
    atol: float = 1e-8
    dt_init: float = 1e-3
    dt_min: float = 1e-12
    dt_max: float = math.inf

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class BackwardEulerOpt:
    dt: float
    inner_iters: int = 1000
    inner_lr: float = 1e-3
    optimizer: str = "adam"  # "adam" | "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_mode: str = "auto"  # "auto" | "analytic" | "fd"
    # alternative inner loss: misfit of the implicit nonlinear equation
    # instead of the time-discrete residual objective
    loss: str = "residual"  # "residual" | "equation"

    def __post_init__(self):
        if self.inner_iters < 1:
            raise ValueError("need at least one inner iteration")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


StepController = ForwardEuler | RK45DormandPrince | BackwardEulerOpt


@dataclass
class StepDiagnostics:
    t: float
    dt: float
    residual: float
    n_samples: int
    rejected: int = 0
    inner_loss: float | None = None


@dataclass
class TrajectoryRecord:
    """Checkpointed parameter trajectory plus per-step diagnostics."""

    spec: NetSpec
    times: list[float] = field(default_factory=list)
    thetas: list[np.ndarray] = field(default_factory=list)
    steps: list[StepDiagnostics] = field(default_factory=list)

    def theta_at(self, index: int) -> ParamVector:
        return ParamVector(self.spec, self.thetas[index].copy())

    @property
    def final_theta(self) -> ParamVector:
        return self.theta_at(len(self.thetas) - 1)

    def save(self, path) -> None:
        """Line-oriented record: one accepted step per line."""
        with open(path, "w") as fh:
            fh.write("# t dt residual n_samples rejected inner_loss\n")
            for s in self.steps:
                inner = "nan" if s.inner_loss is None else f"{s.inner_loss:.17g}"
                fh.write(f"{s.t:.17g} {s.dt:.17g} {s.residual:.17g} "
                         f"{s.n_samples} {s.rejected} {inner}\n")


# Galerkin vector field ------------------------------------------------------

class GalerkinField:
    """theta_dot = (M + lambda I)^{-1} F with freshly sampled estimates.

    Callable as f(t, theta_values); tracks the least-squares residual of
    the most recent solve for diagnostics.
    """

    def __init__(self, spec: NetSpec, problem, policy: MeasurePolicy,
                 rng: np.random.Generator, lam: float | None = None):
        self.spec = spec
        self.problem = problem
        self.policy = policy
        self.rng = rng
        self.lam = lam
        self.last_residual = math.nan
        self._frozen_samples = None

    def new_step(self, theta_values: np.ndarray) -> None:
        """Refresh the per-step sample cache when freezing is enabled."""
        if self.policy.freeze_per_step:
            theta = ParamVector(self.spec, theta_values)
            measure = self.policy.measure_for(self.spec, theta)
            self._frozen_samples = draw(measure, self.policy.n, self.rng)

    def _samples(self, theta: ParamVector):
        if self.policy.freeze_per_step and self._frozen_samples is not None:
            return self._frozen_samples
        measure = self.policy.measure_for(self.spec, theta)
        return draw(measure, self.policy.n, self.rng)

    def __call__(self, t: float, theta_values: np.ndarray) -> np.ndarray:
        theta = ParamVector(self.spec, theta_values)
        samples = self._samples(theta)
        sys = assemble(self.spec, theta, self.problem, t, samples,
                       reweight=self.policy.reweight, lam=self.lam)
        eta = solve_theta_dot(sys)
        # least-squares residual of the solve on the same samples
        be = eval_batch(self.spec, theta, samples.points,
                        pde.required_mask(self.problem))
        r = be.grad_theta @ eta - pde.rhs_batch(self.problem, t,
                                                samples.points, be)
        self.last_residual = 0.5 * float(np.mean(r * r))
        return eta


class _ActiveView:
    """Maps between the full parameter vector and the active coordinates."""

    def __init__(self, spec: NetSpec, theta: ParamVector):
        self.spec = spec
        self.base = theta.values.copy()
        self.sl = spec.active_slice()

    def active(self, full: np.ndarray) -> np.ndarray:
        return full[self.sl].copy()

    def full(self, active: np.ndarray) -> np.ndarray:
        out = self.base.copy()
        out[self.sl] = active
        return out


# Dormand-Prince 5(4) core ---------------------------------------------------

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    np.array([]),
    np.array([1 / 5]),
    np.array([3 / 40, 9 / 40]),
    np.array([44 / 45, -56 / 15, 32 / 9]),
    np.array([19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729]),
    np.array([9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656]),
    np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84]),
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784,
                   11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640,
                   -92097 / 339200, 187 / 2100, 1 / 40])


def _dp_step(f: Callable, t: float, y: np.ndarray, dt: float):
    """One trial Dormand-Prince step; returns (y5, error_vector)."""
    k = np.empty((7,) + y.shape)
    k[0] = f(t, y)
    for i in range(1, 7):
        yi = y + dt * np.tensordot(_DP_A[i], k[:i], axes=(0, 0))
        k[i] = f(t + _DP_C[i] * dt, yi)
    y5 = y + dt * np.tensordot(_DP_B5, k, axes=(0, 0))
    err = dt * np.tensordot(_DP_B5 - _DP_B4, k, axes=(0, 0))
    return y5, err


def _error_norm(err, y_old, y_new, rtol, atol) -> float:
    scale = atol + rtol * np.maximum(np.abs(y_old), np.abs(y_new))
    return float(np.sqrt(np.mean((err / scale) ** 2)))


def integrate_ode(f: Callable, t0: float, y0: np.ndarray, t1: float,
                  rtol: float = 1e-8, atol: float = 1e-10,
                  dt_init: float | None = None, dt_min: float = 1e-13,
                  dt_max: float = math.inf,
                  step_callback: Callable | None = None) -> tuple:
    """Adaptive Dormand-Prince 5(4) integration of a deterministic ODE.

    Returns (times, states) arrays covering every accepted step; the last
    step lands exactly on ``t1``.  ``step_callback(t, y, dt, rejected)``
    fires after each accepted step.
    """
    y = np.atleast_1d(np.asarray(y0, dtype=float)).copy()
    t = float(t0)
    span = t1 - t0
    if span <= 0:
        raise ValueError("t1 must exceed t0")
    dt = dt_init if dt_init is not None else span / 100.0
    dt = min(dt, dt_max, span)
    ts, ys = [t], [y.copy()]
    err_prev = 1.0
    while t < t1 - 1e-14 * max(1.0, abs(t1)):
        dt = min(dt, t1 - t)
        rejected = 0
        while True:
            y_new, err = _dp_step(f, t, y, dt)
            enorm = _error_norm(err, y, y_new, rtol, atol)
            if enorm <= 1.0 or dt <= dt_min * (1 + 1e-12):
                break
            rejected += 1
            dt = max(dt * max(0.2, 0.9 * enorm ** -0.2), dt_min)
        if dt < dt_min * (1 - 1e-12):
            raise StepSizeUnderflow(f"step size underflow at t={t}")
        t += dt
        y = y_new
        ts.append(t)
        ys.append(y.copy())
        if step_callback is not None:
            step_callback(t, y, dt, rejected)
        # PI controller (Gustafsson)
        if enorm == 0.0:
            fac = 5.0
        else:
            fac = 0.9 * enorm ** -0.14 * err_prev ** 0.08
        err_prev = max(enorm, 1e-10)
        dt = float(np.clip(dt * np.clip(fac, 0.2, 5.0), dt_min, dt_max))
    return np.array(ts), np.array(ys)


# Explicit stepping -----------------------------------------------------------

def step_explicit(state: tuple[float, ParamVector], controller,
                  problem, spec: NetSpec, policy: MeasurePolicy,
                  rng: np.random.Generator,
                  lam: float | None = None,
                  _field: GalerkinField | None = None):
    """Advance (t, theta) by one explicit step; returns (t', theta', diag)."""
    t, theta = state
    fld = _field or GalerkinField(spec, problem, policy, rng, lam)
    view = _ActiveView(spec, theta)
    y = view.active(theta.values)

    if isinstance(controller, ForwardEuler):
        fld.new_step(theta.values)
        eta = _field_rhs(fld, spec, view, t, y)
        y_new = y + controller.dt * eta
        diag = StepDiagnostics(t=t + controller.dt, dt=controller.dt,
                               residual=fld.last_residual, n_samples=policy.n)
        return t + controller.dt, ParamVector(spec, view.full(y_new)), diag

    if isinstance(controller, RK45DormandPrince):
        fld.new_step(theta.values)
        dt = controller.dt_init
        rejected = 0
        while True:
            y_new, err = _dp_step(lambda tt, yy: _field_rhs(fld, spec, view,
                                                            tt, yy), t, y, dt)
            enorm = _error_norm(err, y, y_new, controller.rtol,
                                controller.atol)
            if enorm <= 1.0:
                break
            rejected += 1
            dt = dt * max(0.2, 0.9 * enorm ** -0.2)
            if dt < controller.dt_min:
                raise StepSizeUnderflow(f"step size underflow at t={t}")
        diag = StepDiagnostics(t=t + dt, dt=dt, residual=fld.last_residual,
                               n_samples=policy.n, rejected=rejected)
        return t + dt, ParamVector(spec, view.full(y_new)), diag

    raise TypeError(f"not an explicit controller: {type(controller)!r}")


def _field_rhs(fld: GalerkinField, spec, view, t, y_active):
    return fld(t, view.full(y_active))


# Implicit stepping ------------------------------------------------------------

def step_implicit(state: tuple[float, ParamVector],
                  controller: BackwardEulerOpt, problem, spec: NetSpec,
                  policy: MeasurePolicy, rng: np.random.Generator):
    """Backward-Euler step solved as an inner optimization.

    Minimizes over phi the sampled time-discrete residual

        L(phi) = mean_i |U(phi, x_i) - U(theta, x_i)
                         - dt f(t + dt, x_i, U(phi))|^2

    with samples redrawn each inner iteration from the measure policy
    evaluated at the incoming theta.  Initialized at phi = theta.
    """
    t, theta = state
    dt = controller.dt
    t_new = t + dt
    measure = policy.measure_for(spec, theta)
    view = _ActiveView(spec, theta)
    phi = view.active(theta.values)

    analytic = controller.grad_mode == "analytic" or (
        controller.grad_mode == "auto" and _has_analytic_grad(spec, problem)
        and controller.loss == "residual")

    m_adam = np.zeros_like(phi)
    v_adam = np.zeros_like(phi)
    loss_val = math.nan
    for it in range(controller.inner_iters):
        samples = draw(measure, policy.n, rng)
        X = samples.points
        u_old = eval_batch(spec, theta, X).u
        if controller.loss == "residual":
            if analytic:
                loss_val, grad = _residual_loss_grad_analytic(
                    spec, view, phi, problem, t_new, dt, X, u_old)
            else:
                loss_val, grad = _loss_grad_fd(
                    lambda p: _residual_loss(spec, view, p, problem, t_new,
                                             dt, X, u_old), phi)
        else:
            loss_val, grad = _loss_grad_fd(
                lambda p: _equation_loss(spec, view, p, problem, t, t_new,
                                         dt, X, theta), phi)
        if not math.isfinite(loss_val):
            raise FloatingPointError(
                f"non-finite implicit loss at t={t}; shrink the step size")
        if controller.optimizer == "sgd":
            phi = phi - controller.inner_lr * grad
        else:
            m_adam = controller.beta1 * m_adam + (1 - controller.beta1) * grad
            v_adam = (controller.beta2 * v_adam
                      + (1 - controller.beta2) * grad * grad)
            mh = m_adam / (1 - controller.beta1 ** (it + 1))
            vh = v_adam / (1 - controller.beta2 ** (it + 1))
            phi = phi - controller.inner_lr * mh / (np.sqrt(vh)
                                                    + controller.adam_eps)
    diag = StepDiagnostics(t=t_new, dt=dt, residual=loss_val,
                           n_samples=policy.n, inner_loss=loss_val)
    return t_new, ParamVector(spec, view.full(phi)), diag


def _has_analytic_grad(spec: NetSpec, problem) -> bool:
    from .nets import SHALLOW_GAUSSIAN, SHALLOW_SQUARED_GAUSSIAN

    inner = problem.inner if isinstance(problem, pde.TimeReversed) else problem
    if isinstance(inner, pde.Kdv):
        return False
    return spec.architecture in (SHALLOW_GAUSSIAN, SHALLOW_SQUARED_GAUSSIAN)


def _residual_loss(spec, view, phi_active, problem, t_new, dt, X, u_old):
    theta_phi = ParamVector(spec, view.full(phi_active))
    be = eval_batch(spec, theta_phi, X, pde.required_mask(problem))
    f = pde.rhs_batch(problem, t_new, X, be)
    r = be.u - u_old - dt * f
    return float(np.mean(r * r))


def _residual_loss_grad_analytic(spec, view, phi_active, problem, t_new, dt,
                                 X, u_old):
    theta_phi = ParamVector(spec, view.full(phi_active))
    mask = pde.required_mask(problem, with_mixed=True)
    be = eval_batch(spec, theta_phi, X, mask)
    f = pde.rhs_batch(problem, t_new, X, be)
    df = pde.rhs_grad_theta(problem, t_new, X, be)
    r = be.u - u_old - dt * f
    grad = 2.0 * np.mean(r[:, None] * (be.grad_theta - dt * df), axis=0)
    return float(np.mean(r * r)), grad


def _equation_loss(spec, view, phi_active, problem, t, t_new, dt, X, theta):
    """Misfit of the implicit nonlinear equation
    M(phi)(phi - theta) = dt F(t_new, phi) on the sampled estimates."""
    from .sampling import SampleSet

    theta_phi = ParamVector(spec, view.full(phi_active))
    samples = SampleSet(points=X, log_density=np.zeros(X.shape[0]))
    sys = assemble(spec, theta_phi, problem, t_new, samples, lam=0.0)
    delta = phi_active - view.active(theta.values)
    mis = sys.M @ delta - dt * sys.F
    return float(np.dot(mis, mis))


def _loss_grad_fd(loss_fn, phi):
    """Central finite-difference gradient of a scalar loss."""
    base = loss_fn(phi)
    grad = np.empty_like(phi)
    for j in range(phi.shape[0]):
        h = 1e-6 * max(1.0, abs(phi[j]))
        up = phi.copy()
        up[j] += h
        dn = phi.copy()
        dn[j] -= h
        grad[j] = (loss_fn(up) - loss_fn(dn)) / (2.0 * h)
    return base, grad


# Trajectory loop --------------------------------------------------------------

def integrate(spec: NetSpec, theta0: ParamVector, t_span: tuple[float, float],
              controller: StepController, problem, policy: MeasurePolicy,
              rng: np.random.Generator,
              checkpoint_stride: int = 1) -> TrajectoryRecord:
    """Advance theta over t_span, checkpointing every ``stride`` steps.

    The initial state and the final state are always recorded.  Backward
    integration is expressed by wrapping the problem in
    :class:`~neural_galerkin.pde.TimeReversed` and integrating forward.
    """
    t0, t1 = t_span
    if t1 < t0:
        raise ValueError("t_span must be forward in time; wrap the problem "
                         "in TimeReversed for backward runs")
    rec = TrajectoryRecord(spec=spec)
    rec.times.append(t0)
    rec.thetas.append(theta0.values.copy())
    if t1 == t0:
        return rec

    if isinstance(controller, RK45DormandPrince):
        return _integrate_rk45(spec, theta0, t0, t1, controller, problem,
                               policy, rng, checkpoint_stride, rec)

    t, theta = t0, theta0
    fld = None
    if isinstance(controller, ForwardEuler):
        fld = GalerkinField(spec, problem, policy, rng)
    step_index = 0
    while t < t1 - 1e-12 * max(1.0, abs(t1)):
        dt = min(controller.dt, t1 - t)
        if isinstance(controller, BackwardEulerOpt):
            ctrl = (controller if dt == controller.dt
                    else BackwardEulerOpt(**{**controller.__dict__, "dt": dt}))
            t, theta, diag = step_implicit((t, theta), ctrl, problem, spec,
                                           policy, rng)
        else:
            ctrl = controller if dt == controller.dt else ForwardEuler(dt=dt)
            t, theta, diag = step_explicit((t, theta), ctrl, problem, spec,
                                           policy, rng, _field=fld)
        rec.steps.append(diag)
        step_index += 1
        if step_index % checkpoint_stride == 0:
            rec.times.append(t)
            rec.thetas.append(theta.values.copy())
    if rec.times[-1] != t:
        rec.times.append(t)
        rec.thetas.append(theta.values.copy())
    return rec


def _integrate_rk45(spec, theta0, t0, t1, controller, problem, policy, rng,
                    checkpoint_stride, rec: TrajectoryRecord):
    fld = GalerkinField(spec, problem, policy, rng)
    view = _ActiveView(spec, theta0)
    y = view.active(theta0.values)
    t = t0
    dt = min(controller.dt_init, controller.dt_max, t1 - t0)
    err_prev = 1.0
    step_index = 0
    while t < t1 - 1e-12 * max(1.0, abs(t1)):
        dt = min(dt, t1 - t)
        fld.new_step(view.full(y))
        rejected = 0
        while True:
            y_new, err = _dp_step(
                lambda tt, yy: _field_rhs(fld, spec, view, tt, yy), t, y, dt)
            enorm = _error_norm(err, y, y_new, controller.rtol,
                                controller.atol)
            if enorm <= 1.0:
                break
            rejected += 1
            dt = dt * max(0.2, 0.9 * enorm ** -0.2)
            if dt < controller.dt_min:
                raise StepSizeUnderflow(f"step size underflow at t={t}")
        t += dt
        y = y_new
        rec.steps.append(StepDiagnostics(
            t=t, dt=dt, residual=fld.last_residual, n_samples=policy.n,
            rejected=rejected))
        step_index += 1
        if step_index % checkpoint_stride == 0:
            rec.times.append(t)
            rec.thetas.append(view.full(y))
        fac = 5.0 if enorm == 0.0 else 0.9 * enorm ** -0.14 * err_prev ** 0.08
        err_prev = max(enorm, 1e-10)
        dt = float(np.clip(dt * np.clip(fac, 0.2, 5.0), controller.dt_min,
                           controller.dt_max))
    if rec.times[-1] != t:
        rec.times.append(t)
        rec.thetas.append(view.full(y))
    return rec
