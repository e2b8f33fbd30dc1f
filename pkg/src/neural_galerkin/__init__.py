"""Sequential-in-time Galerkin training of nonlinear PDE parametrizations.

The parameter dynamics M(theta) theta_dot = F(t, theta) are obtained by
projecting the PDE residual onto the tangent space of the parametrization;
M and F are estimated by (optionally solution-adapted) Monte-Carlo sampling
and integrated with explicit or optimization-based implicit schemes.
"""

from .assembly import (AssembledSystem, SingularSystemError, assemble,
                       default_regularization, solve_theta_dot)
from .fitting import FitConfig, FitReport, fit_initial, init_params
from .integrators import (BackwardEulerOpt, ForwardEuler, MeasurePolicy,
                          RK45DormandPrince, StepSizeUnderflow,
                          TrajectoryRecord, integrate, integrate_ode)
from .metrics import (density_stats, marginals, mixture_moments,
                      rel_l2_error, residual_estimate)
from .nets import (ARCHITECTURES, DEEP_TANH_PERIODIC, SHALLOW_GAUSSIAN,
                   SHALLOW_PERIODIC_GAUSSIAN, SHALLOW_SQUARED_GAUSSIAN,
                   BatchEval, DerivMask, DimensionError, NetSpec, ParamVector,
                   as_mixture, eval_batch, eval_bundle, load_checkpoint,
                   save_checkpoint)
from .pde import (Advection, AllenCahn, FokkerPlanck, ForceSpec, Kdv,
                  PeriodicBox, TimeReversed, advection_exact, kdv_exact,
                  kdv_soliton)
from .sampling import GaussianMixture, SampleSet, UniformBox, draw

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
