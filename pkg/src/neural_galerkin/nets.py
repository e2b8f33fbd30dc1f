"""Nonlinear ansatz networks with closed-form parameter and spatial derivatives.

Four architectures are supported:

- ``shallow_gaussian``: sum of isotropic Gaussian bumps, U = sum_i c_i
  exp(-w_i^2 |x - b_i|^2).
- ``shallow_periodic_gaussian``: same but with the periodicised exponent
  exp(-w^2 |sin(pi (x - b) / L)|^2), used on periodic boxes of period L.
- ``shallow_squared_gaussian``: coefficients enter squared (c_i^2), so the
  network is non-negative and can represent probability densities.
- ``deep_tanh_periodic``: feedforward tanh network on top of a sinusoidal
  periodic embedding, ``layers`` hidden layers of width m.

All derivatives (parameter gradient, spatial gradient, diagonal spatial
Hessian, third spatial derivative in 1-D, and the mixed parameter gradients
of the spatial derivatives) are hand-derived closed forms; there is no
autodiff dependency. The deep network uses manual backpropagation for the
parameter gradient and manual forward-mode propagation for the spatial
derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SHALLOW_GAUSSIAN = "shallow_gaussian"
SHALLOW_PERIODIC_GAUSSIAN = "shallow_periodic_gaussian"
SHALLOW_SQUARED_GAUSSIAN = "shallow_squared_gaussian"
DEEP_TANH_PERIODIC = "deep_tanh_periodic"

ARCHITECTURES = (
    SHALLOW_GAUSSIAN,
    SHALLOW_PERIODIC_GAUSSIAN,
    SHALLOW_SQUARED_GAUSSIAN,
    DEEP_TANH_PERIODIC,
)
_SHALLOW = (SHALLOW_GAUSSIAN, SHALLOW_PERIODIC_GAUSSIAN, SHALLOW_SQUARED_GAUSSIAN)
_PERIODIC = (SHALLOW_PERIODIC_GAUSSIAN, DEEP_TANH_PERIODIC)


class DimensionError(ValueError):
    """Raised when an input does not match the network layout."""


@dataclass(frozen=True)
class DerivMask:
    """Which derivative fields of an evaluation are requested."""

    grad_theta: bool = False
    grad_x: bool = False
    diag_hess_x: bool = False
    d3_x: bool = False
    #: parameter gradients of grad_x and diag_hess_x (needed by implicit steps)
    mixed_spatial: bool = False


VALUE_ONLY = DerivMask()
FULL_SHALLOW_1D = DerivMask(grad_theta=True, grad_x=True, diag_hess_x=True, d3_x=True)


@dataclass(frozen=True)
class NetSpec:
    """Architecture description: family, width m, spatial dimension d.

    ``L`` is the domain period for the periodic variants, ``layers`` the
    hidden-layer count of the deep variant.  With ``frozen_features=True``
    only the output coefficients are treated as active parameters; the
    features (bandwidths/centers or inner weights) are held fixed.
    """

    architecture: str
    m: int
    d: int
    L: float | None = None
    layers: int | None = None
    frozen_features: bool = False

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.m < 1 or self.d < 1:
            raise ValueError("m and d must be >= 1")
        if self.architecture in _PERIODIC:
            if self.L is None or self.L <= 0:
                raise ValueError("periodic architectures require L > 0")
        if self.architecture == DEEP_TANH_PERIODIC:
            if self.layers is None or self.layers < 1:
                raise ValueError("deep architecture requires layers >= 1")

    @property
    def is_shallow(self) -> bool:
        return self.architecture in _SHALLOW

    @property
    def is_periodic(self) -> bool:
        return self.architecture in _PERIODIC

    @property
    def param_count(self) -> int:
        if self.is_shallow:
            return self.m * (self.d + 2)
        m, d, ell = self.m, self.d, self.layers
        # c, W1, b1, then (W_i, b_i) for i = 2..ell
        return m + m * d + d + (ell - 1) * (m * m + m)

    def layout(self) -> dict[str, slice]:
        """Map from parameter role to index range in the flat vector."""
        m, d = self.m, self.d
        if self.is_shallow:
            return {
                "coeff": slice(0, m),
                "bandwidth": slice(m, 2 * m),
                "center": slice(2 * m, 2 * m + m * d),
            }
        out = {"coeff": slice(0, m)}
        pos = m
        out["weight_1"] = slice(pos, pos + m * d)
        pos += m * d
        out["bias_1"] = slice(pos, pos + d)
        pos += d
        for i in range(2, self.layers + 1):
            out[f"weight_{i}"] = slice(pos, pos + m * m)
            pos += m * m
            out[f"bias_{i}"] = slice(pos, pos + m)
            pos += m
        return out

    def active_slice(self) -> slice:
        """Active parameter range: everything, or coefficients only when frozen."""
        return slice(0, self.m) if self.frozen_features else slice(0, self.param_count)

    @property
    def active_count(self) -> int:
        s = self.active_slice()
        return s.stop - s.start


@dataclass
class ParamVector:
    """Flat parameter vector tied to a :class:`NetSpec` layout."""

    spec: NetSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.spec.param_count,):
            raise DimensionError(
                f"expected {self.spec.param_count} parameters, "
                f"got shape {self.values.shape}"
            )

    # Shallow accessors --------------------------------------------------
    @property
    def coeff(self) -> np.ndarray:
        return self.values[self.spec.layout()["coeff"]]

    @property
    def bandwidth(self) -> np.ndarray:
        return self.values[self.spec.layout()["bandwidth"]]

    @property
    def centers(self) -> np.ndarray:
        m, d = self.spec.m, self.spec.d
        return self.values[self.spec.layout()["center"]].reshape(m, d)

    # Deep accessors -----------------------------------------------------
    def weight(self, layer: int) -> np.ndarray:
        m, d = self.spec.m, self.spec.d
        w = self.values[self.spec.layout()[f"weight_{layer}"]]
        return w.reshape(m, d) if layer == 1 else w.reshape(m, m)

    def bias(self, layer: int) -> np.ndarray:
        return self.values[self.spec.layout()[f"bias_{layer}"]]

    def copy(self) -> "ParamVector":
        return ParamVector(self.spec, self.values.copy())

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.spec, np.asarray(values, dtype=float))


@dataclass
class BatchEval:
    """Evaluation of the network and requested derivatives at n points.

    Fields not requested in the mask are ``None``.  ``grad_theta`` and the
    mixed arrays carry only the active parameter coordinates.
    """

    u: np.ndarray  # (n,)
    grad_theta: np.ndarray | None = None  # (n, p_active)
    grad_x: np.ndarray | None = None  # (n, d)
    diag_hess_x: np.ndarray | None = None  # (n, d)
    d3_x: np.ndarray | None = None  # (n,)
    grad_theta_grad_x: np.ndarray | None = None  # (n, p_active, d)
    grad_theta_diag_hess: np.ndarray | None = None  # (n, p_active, d)


@dataclass
class EvalBundle:
    """Single-point view of a :class:`BatchEval`."""

    u: float
    grad_theta: np.ndarray | None = None
    grad_x: np.ndarray | None = None
    diag_hess_x: np.ndarray | None = None
    d3_x: float | None = None


def eval_batch(spec: NetSpec, theta: ParamVector, X: np.ndarray,
               mask: DerivMask = VALUE_ONLY) -> BatchEval:
    """Evaluate the network at points ``X`` of shape (n, d).

    Raises :class:`DimensionError` on shape mismatch and ``ValueError``
    when a derivative is requested that is not defined for this
    architecture (third derivative outside d=1 periodic-Gaussian nets,
    mixed derivatives for periodic or deep nets).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != spec.d:
        raise DimensionError(f"points have dimension {X.shape[1]}, spec.d={spec.d}")
    if not np.all(np.isfinite(X)):
        raise ValueError("evaluation points must be finite")
    if mask.d3_x:
        if spec.d != 1:
            raise ValueError("third spatial derivative only defined for d=1")
        if spec.architecture != SHALLOW_PERIODIC_GAUSSIAN:
            raise ValueError(
                "third spatial derivative only implemented for "
                "shallow_periodic_gaussian")
    if spec.is_shallow:
        return _eval_shallow(spec, theta, X, mask)
    return _eval_deep(spec, theta, X, mask)


def eval_bundle(spec: NetSpec, theta: ParamVector, x: np.ndarray,
                mask: DerivMask = VALUE_ONLY) -> EvalBundle:
    """Single-point evaluation; see :func:`eval_batch`."""
    x = np.asarray(x, dtype=float).reshape(1, -1)
    be = eval_batch(spec, theta, x, mask)
    return EvalBundle(
        u=float(be.u[0]),
        grad_theta=None if be.grad_theta is None else be.grad_theta[0],
        grad_x=None if be.grad_x is None else be.grad_x[0],
        diag_hess_x=None if be.diag_hess_x is None else be.diag_hess_x[0],
        d3_x=None if be.d3_x is None else float(be.d3_x[0]),
    )


def _eval_shallow(spec: NetSpec, theta: ParamVector, X: np.ndarray,
                  mask: DerivMask) -> BatchEval:
    n = X.shape[0]
    m, d = spec.m, spec.d
    c, w, b = theta.coeff, theta.bandwidth, theta.centers
    w2 = w * w
    squared = spec.architecture == SHALLOW_SQUARED_GAUSSIAN
    a = c * c if squared else c  # effective node amplitude
    dadc = 2.0 * c if squared else np.ones(m)

    diff = X[:, None, :] - b[None, :, :]  # (n, m, d)

    if spec.architecture == SHALLOW_PERIODIC_GAUSSIAN:
        return _eval_shallow_periodic(spec, X, mask, a, dadc, w, diff)

    r2 = np.sum(diff * diff, axis=2)  # (n, m)
    phi = np.exp(-w2[None, :] * r2)  # (n, m)
    u = phi @ a

    out = BatchEval(u=u)
    if mask.grad_x:
        psi = -2.0 * w2[None, :, None] * diff * phi[:, :, None]  # d phi / dx
        out.grad_x = np.einsum("nmk,m->nk", psi, a)
    if mask.diag_hess_x:
        chi = (-2.0 * w2[None, :, None]
               + 4.0 * (w2 * w2)[None, :, None] * diff * diff) * phi[:, :, None]
        out.diag_hess_x = np.einsum("nmk,m->nk", chi, a)

    if mask.grad_theta:
        gc = phi * dadc[None, :]
        gw = (a * (-2.0 * w))[None, :] * r2 * phi
        gb = (a * 2.0 * w2)[None, :, None] * diff * phi[:, :, None]
        out.grad_theta = _pack_shallow_grad(spec, n, gc, gw, gb)

    if mask.mixed_spatial:
        out.grad_theta_grad_x, out.grad_theta_diag_hess = _shallow_mixed(
            spec, n, a, dadc, w, diff, r2, phi)
    return out


def _eval_shallow_periodic(spec: NetSpec, X: np.ndarray, mask: DerivMask,
                           a, dadc, w, diff) -> BatchEval:
    if mask.mixed_spatial:
        raise ValueError("mixed spatial derivatives not implemented for "
                         "shallow_periodic_gaussian")
    n = X.shape[0]
    L = spec.L
    w2 = w * w
    s = np.sin(np.pi * diff / L)  # (n, m, d)
    g = np.sum(s * s, axis=2)  # (n, m)
    phi = np.exp(-w2[None, :] * g)
    u = phi @ a
    out = BatchEval(u=u)

    need_A = mask.grad_x or mask.diag_hess_x or mask.d3_x or mask.grad_theta
    if need_A:
        A = (np.pi / L) * np.sin(2.0 * np.pi * diff / L)  # d g / dx
    if mask.grad_x:
        out.grad_x = np.einsum("nmk,m->nk", -w2[None, :, None] * A * phi[:, :, None], a)
    if mask.diag_hess_x or mask.d3_x:
        B = (2.0 * np.pi ** 2 / L ** 2) * np.cos(2.0 * np.pi * diff / L)
    if mask.diag_hess_x:
        hess = (w2 * w2)[None, :, None] * A * A - w2[None, :, None] * B
        out.diag_hess_x = np.einsum("nmk,m->nk", hess * phi[:, :, None], a)
    if mask.d3_x:
        # d=1 enforced by the caller
        A1, B1 = A[:, :, 0], B[:, :, 0]
        w4, w6 = w2 * w2, w2 * w2 * w2
        term = A1 * (3.0 * w4[None, :] * B1
                     + (4.0 * np.pi ** 2 / L ** 2) * w2[None, :]
                     - w6[None, :] * A1 * A1)
        out.d3_x = (term * phi) @ a
    if mask.grad_theta:
        gc = phi * dadc[None, :]
        gw = (a * (-2.0 * w))[None, :] * g * phi
        gb = (a * w2)[None, :, None] * A * phi[:, :, None]
        out.grad_theta = _pack_shallow_grad(spec, n, gc, gw, gb)
    return out


def _pack_shallow_grad(spec: NetSpec, n: int, gc, gw, gb) -> np.ndarray:
    if spec.frozen_features:
        return gc
    m, d = spec.m, spec.d
    out = np.empty((n, spec.param_count))
    out[:, :m] = gc
    out[:, m:2 * m] = gw
    out[:, 2 * m:] = gb.reshape(n, m * d)
    return out


def _shallow_mixed(spec, n, a, dadc, w, diff, r2, phi):
    """Parameter gradients of grad_x and diag_hess_x for plain/squared
    Gaussian nets.  Returns two (n, p_active, d) arrays."""
    m, d = spec.m, spec.d
    w2 = w * w
    w3 = w2 * w
    pa = spec.active_count
    gx = np.zeros((n, pa, d))
    gh = np.zeros((n, pa, d))

    # d/dc of node terms: amplitude enters linearly through a(c)
    base_psi = -2.0 * w2[None, :, None] * diff * phi[:, :, None]
    base_chi = (-2.0 * w2[None, :, None]
                + 4.0 * (w2 * w2)[None, :, None] * diff * diff) * phi[:, :, None]
    gx[:, :m, :] = dadc[None, :, None] * base_psi
    gh[:, :m, :] = dadc[None, :, None] * base_chi

    if not spec.frozen_features:
        # d/dw
        gx[:, m:2 * m, :] = (a[None, :, None] * phi[:, :, None] * diff
                             * (4.0 * w3[None, :, None] * r2[:, :, None]
                                - 4.0 * w[None, :, None]))
        gh[:, m:2 * m, :] = (a[None, :, None] * phi[:, :, None]
                             * (-4.0 * w[None, :, None]
                                + 16.0 * w3[None, :, None] * diff * diff
                                + 4.0 * w3[None, :, None] * r2[:, :, None]
                                - 8.0 * (w3 * w2)[None, :, None]
                                * diff * diff * r2[:, :, None]))
        # d/db_j, laid out node-major as (n, m, d_j, d_k)
        eye = np.eye(d)
        gxb = (a[None, :, None, None] * phi[:, :, None, None]
               * (2.0 * w2[None, :, None, None] * eye[None, None, :, :]
                  - 4.0 * (w2 * w2)[None, :, None, None]
                  * diff[:, :, :, None] * diff[:, :, None, :]))
        ghb = (a[None, :, None, None] * phi[:, :, None, None]
               * (-8.0 * (w2 * w2)[None, :, None, None]
                  * diff[:, :, None, :] * eye[None, None, :, :]
                  + 2.0 * w2[None, :, None, None] * diff[:, :, :, None]
                  * (-2.0 * w2[None, :, None, None]
                     + 4.0 * (w2 * w2)[None, :, None, None]
                     * (diff * diff)[:, :, None, :])))
        gx[:, 2 * m:, :] = gxb.reshape(n, m * d, d)
        gh[:, 2 * m:, :] = ghb.reshape(n, m * d, d)
    return gx, gh


def _eval_deep(spec: NetSpec, theta: ParamVector, X: np.ndarray,
               mask: DerivMask) -> BatchEval:
    if mask.mixed_spatial:
        raise ValueError("mixed spatial derivatives not implemented for "
                         "deep_tanh_periodic; use finite-difference loss "
                         "gradients instead")
    n, d = X.shape
    m, ell, L = spec.m, spec.layers, spec.L
    omega = 2.0 * np.pi / L
    c = theta.coeff
    W = [theta.weight(i) for i in range(1, ell + 1)]
    bias = [theta.bias(i) for i in range(1, ell + 1)]

    arg = omega * (X - bias[0][None, :])
    Z0 = np.sin(arg)  # (n, d)
    H = []
    h = np.tanh(Z0 @ W[0].T)
    H.append(h)
    for i in range(1, ell):
        h = np.tanh(H[-1] @ W[i].T + bias[i][None, :])
        H.append(h)
    u = H[-1] @ c
    out = BatchEval(u=u)

    if mask.grad_theta:
        S = [1.0 - hh * hh for hh in H]  # tanh' at each layer
        delta = S[-1] * c[None, :]  # (n, m)
        grads = {}
        for i in range(ell - 1, 0, -1):
            grads[f"weight_{i + 1}"] = np.einsum("ni,nj->nij", delta, H[i - 1])
            grads[f"bias_{i + 1}"] = delta
            delta = (delta @ W[i]) * S[i - 1]
        grads["weight_1"] = np.einsum("ni,nj->nij", delta, Z0)
        grads["bias_1"] = (delta @ W[0]) * (-omega * np.cos(arg))
        grads["coeff"] = H[-1]
        out.grad_theta = _pack_deep_grad(spec, n, grads)
        if mask.grad_x:
            out.grad_x = (delta @ W[0]) * (omega * np.cos(arg))
    elif mask.grad_x:
        S_last = 1.0 - H[-1] * H[-1]
        delta = S_last * c[None, :]
        for i in range(ell - 1, 0, -1):
            delta = (delta @ W[i]) * (1.0 - H[i - 1] * H[i - 1])
        out.grad_x = (delta @ W[0]) * (omega * np.cos(arg))

    if mask.diag_hess_x:
        out.diag_hess_x = _deep_diag_hess(c, W, H, Z0, arg, omega, n, d)
    return out


def _deep_diag_hess(c, W, H, Z0, arg, omega, n, d):
    """Forward-mode second derivative along each coordinate axis."""
    hess = np.empty((n, d))
    cos_arg = np.cos(arg)
    for k in range(d):
        # embedding derivatives along x_k (only component k is nonzero)
        z1k = omega * cos_arg[:, k]  # dZ0_k/dx_k
        z2k = -omega * omega * Z0[:, k]  # d^2 Z0_k / dx_k^2
        hp = None
        for i, h in enumerate(H):
            if i == 0:
                ap = z1k[:, None] * W[0][None, :, k]
                app = z2k[:, None] * W[0][None, :, k]
            else:
                ap = hp @ W[i].T
                app = hpp @ W[i].T
            s = 1.0 - h * h
            hpp = s * app - 2.0 * h * s * ap * ap
            hp = s * ap
        hess[:, k] = hpp @ c
    return hess


def _pack_deep_grad(spec: NetSpec, n: int, grads: dict) -> np.ndarray:
    if spec.frozen_features:
        return grads["coeff"]
    out = np.empty((n, spec.param_count))
    for name, sl in spec.layout().items():
        out[:, sl] = grads[name].reshape(n, -1)
    return out


def as_mixture(spec: NetSpec, theta: ParamVector, kappa: float):
    """Equal-weight Gaussian mixture induced by a shallow Gaussian net.

    Component i is an isotropic Gaussian with mean b_i and standard
    deviation kappa / (sqrt(2) |w_i|); weights are 1/m independently of the
    coefficients.  The bandwidth scale kappa > 1 widens the measure beyond
    the nodes themselves.
    """
    from .sampling import GaussianMixture

    if not spec.is_shallow:
        raise ValueError("mixture measure requires a shallow Gaussian variant")
    if kappa <= 0:
        raise ValueError("kappa must be positive")
    w = theta.bandwidth
    if np.any(w == 0.0):
        raise ValueError("degenerate bandwidth: some w_i are zero")
    stds = kappa / (np.sqrt(2.0) * np.abs(w))
    weights = np.full(spec.m, 1.0 / spec.m)
    return GaussianMixture(means=theta.centers.copy(), stds=stds, weights=weights)


def fit_check_dimensions(spec: NetSpec, theta) -> dict:
    """Layout consistency diagnostics for a (spec, parameter-array) pair."""
    values = theta.values if isinstance(theta, ParamVector) else np.asarray(theta)
    report = {
        "param_count": spec.param_count,
        "active_count": spec.active_count,
        "layout": {k: (s.start, s.stop) for k, s in spec.layout().items()},
    }
    if values.ndim != 1 or values.shape[0] != spec.param_count:
        report["status"] = "dimension_error"
        report["detail"] = (f"parameter vector has shape {values.shape}, "
                            f"expected ({spec.param_count},)")
        return report
    covered = np.zeros(spec.param_count, dtype=bool)
    for s in spec.layout().values():
        if covered[s].any():
            report["status"] = "layout_error"
            report["detail"] = "overlapping layout ranges"
            return report
        covered[s] = True
    if not covered.all():
        report["status"] = "layout_error"
        report["detail"] = "layout does not cover all parameters"
        return report
    report["status"] = "consistent"
    if spec.frozen_features:
        report["inactive"] = (spec.active_count, spec.param_count)
    return report


# Checkpoint serialization -----------------------------------------------

def save_checkpoint(path, spec: NetSpec, theta: ParamVector) -> None:
    """Write a text checkpoint: architecture header plus flat parameters."""
    with open(path, "w") as fh:
        fh.write("# net checkpoint v1\n")
        fh.write(f"architecture {spec.architecture}\n")
        fh.write(f"m {spec.m}\n")
        fh.write(f"d {spec.d}\n")
        fh.write(f"L {'none' if spec.L is None else repr(spec.L)}\n")
        fh.write(f"layers {'none' if spec.layers is None else spec.layers}\n")
        fh.write(f"frozen_features {int(spec.frozen_features)}\n")
        fh.write(f"p {spec.param_count}\n")
        for v in theta.values:
            fh.write(f"{v:.17g}\n")


def load_checkpoint(path) -> tuple[NetSpec, ParamVector]:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    head = dict(ln.split(None, 1) for ln in lines[:7])
    spec = NetSpec(
        architecture=head["architecture"],
        m=int(head["m"]),
        d=int(head["d"]),
        L=None if head["L"] == "none" else float(head["L"]),
        layers=None if head["layers"] == "none" else int(head["layers"]),
        frozen_features=bool(int(head["frozen_features"])),
    )
    p = int(head["p"])
    values = np.array([float(v) for v in lines[7:7 + p]])
    return spec, ParamVector(spec, values)
