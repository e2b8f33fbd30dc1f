"""Config-driven experiment runner: the human entry point.

Verbs:

- ``run <config.cfg>``: fit the initial condition, integrate the parameter
  dynamics, compute metrics against the matching reference solution, and
  write a self-describing artifact directory (resolved config, manifest,
  metric CSVs, trajectory record, parameter checkpoints).
- ``run --suite properties``: execute the built-in invariant checks.
- ``inspect <checkpoint>``: print the parameter layout and norms.
- ``diff <runA> <runB>``: per-metric-file deltas between two artifact dirs.

Config files are INI-style (key = value under [section] headers); every
value is parsed as a Python literal where possible.  Exit codes: 0 success,
1 a configured threshold failed, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import copy
import hashlib
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__, oracles
from .assembly import SingularSystemError
from .fitting import (FitConfig, equidistant_features, fit_initial,
                      fit_linear_coeffs)
from .integrators import (BackwardEulerOpt, ForwardEuler, MeasurePolicy,
                          RK45DormandPrince, StepSizeUnderflow,
                          TrajectoryRecord, integrate, integrate_ode)
from .metrics import (density_stats, gaussian_entropy, mixture_moments,
                      rel_l2_error)
from .nets import (NetSpec, ParamVector, eval_batch, fit_check_dimensions,
                   load_checkpoint, save_checkpoint)
from .pde import (Advection, AllenCahn, FokkerPlanck, ForceSpec, Kdv,
                  PeriodicBox, TimeReversed, advection_displacement,
                  kdv_exact, velocity_spacetime, velocity_time_only)
from .sampling import GaussianMixture, UniformBox

EXIT_OK = 0
EXIT_THRESHOLD = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

NUMERICAL_ERRORS = (StepSizeUnderflow, SingularSystemError,
                    FloatingPointError, np.linalg.LinAlgError,
                    ZeroDivisionError)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# Configuration -------------------------------------------------------------

_TWO_PI = 2.0 * np.pi

_GENERIC = {
    "fitting": {"batch": 1000, "iterations": 2000, "learning_rate": 0.05,
                "replicates": 2, "optimizer": "adam"},
    "seeds": {"fit": 0, "integrate": 1, "metrics": 2},
    "output": {"dir": ""},
    "thresholds": {},
}

_EXPERIMENTS = {
    "kdv": {
        "experiment": {"name": "kdv", "t_end": 4.0, "checkpoint_stride": 1,
                       "k1": 1.0, "k2": 0.7, "x1": -5.0, "x2": 5.0,
                       "grid": 2048, "eval_times": 51, "baselines": True,
                       "baseline_m": 30, "baseline_bandwidth": 6.7},
        "architecture": {"architecture": "shallow_periodic_gaussian",
                         "m": 10, "L": 60.0},
        "sampling": {"kind": "static", "n": 1000, "kappa": 1.0,
                     "box_lo": -20.0, "box_hi": 40.0,
                     "freeze_per_step": True},
        "integrator": {"scheme": "rk45", "rtol": 1e-5, "atol": 1e-7,
                       "dt_init": 1e-3},
    },
    "allen_cahn": {
        "experiment": {"name": "allen_cahn", "t_end": 1.0,
                       "checkpoint_stride": 1, "eps": 0.05,
                       "ref_grid": 512, "ref_dt": 1e-4, "eval_times": 26,
                       "baselines": True, "baseline_m": 16,
                       "baseline_bandwidth": 3.6,
                       "u0_w": 3.1622776601683795, "u0_b1": 0.5,
                       "u0_b2": 4.4},
        "architecture": {"architecture": "deep_tanh_periodic", "m": 2,
                         "layers": 3, "L": _TWO_PI},
        "sampling": {"kind": "static", "n": 1000, "kappa": 1.0,
                     "box_lo": 0.0, "box_hi": _TWO_PI,
                     "freeze_per_step": False},
        "integrator": {"scheme": "backward_euler_opt", "dt": 1e-2,
                       "inner_iters": 300, "inner_lr": 5e-3,
                       "optimizer": "adam", "grad_mode": "auto",
                       "loss": "residual"},
        "fitting": {"iterations": 3000},
    },
    "advection_time": {
        "experiment": {"name": "advection_time", "t_end": 1.0, "d": 3,
                       "checkpoint_stride": 1, "eval_times": 21,
                       "eval_n": 4000, "compare_static": True,
                       "static_box_lo": 0.0, "static_box_hi": 15.0},
        "architecture": {"architecture": "shallow_gaussian", "m": 25},
        "sampling": {"kind": "adaptive", "n": 1000, "kappa": 1.0,
                     "freeze_per_step": True},
        "integrator": {"scheme": "rk45", "rtol": 1e-4, "atol": 1e-6,
                       "dt_init": 1e-3},
        "fitting": {"iterations": 3000},
    },
    "advection_spacetime": {
        "experiment": {"name": "advection_spacetime", "t_end": 1.0, "d": 5,
                       "checkpoint_stride": 1, "eval_n": 4000,
                       "compare_static": True, "static_box_lo": 0.0,
                       "static_box_hi": 15.0},
        "architecture": {"architecture": "shallow_gaussian", "m": 25},
        "sampling": {"kind": "adaptive", "n": 1000, "kappa": 2.0,
                     "freeze_per_step": True},
        "integrator": {"scheme": "rk45", "rtol": 1e-4, "atol": 1e-6,
                       "dt_init": 1e-3},
        "fitting": {"iterations": 3000},
    },
    "fp_harmonic": {
        "experiment": {"name": "fp_harmonic", "t_end": 1.0, "d": 4,
                       "checkpoint_stride": 4, "alpha": 0.25,
                       "diffusion": 0.01, "sigma2": 0.1, "eval_times": 11,
                       "entropy_samples": 5000},
        "architecture": {"architecture": "shallow_squared_gaussian",
                         "m": 30},
        "sampling": {"kind": "adaptive", "n": 1000, "kappa": 2.0,
                     "freeze_per_step": True},
        "integrator": {"scheme": "forward_euler", "dt": 2.5e-3},
        "fitting": {"iterations": 3000},
    },
    "fp_aharmonic": {
        "experiment": {"name": "fp_aharmonic", "t_end": 1.0, "d": 4,
                       "checkpoint_stride": 4, "alpha": -0.5,
                       "diffusion": 0.01, "sigma2": 0.1,
                       "em_paths": 10000, "em_dt": 1e-3, "em_record": 100,
                       "entropy_samples": 5000},
        "architecture": {"architecture": "shallow_squared_gaussian",
                         "m": 20},
        "sampling": {"kind": "adaptive", "n": 2000, "kappa": 2.0,
                     "freeze_per_step": True},
        "integrator": {"scheme": "forward_euler", "dt": 2.5e-3},
        "fitting": {"iterations": 3000},
    },
}

_LITERALS = {"true": True, "false": False, "none": None}


def _parse_value(text: str):
    lowered = text.strip().lower()
    if lowered in _LITERALS:
        return _LITERALS[lowered]
    try:
        return ast.literal_eval(text.strip())
    except (ValueError, SyntaxError):
        return text.strip()


def load_config(path) -> dict:
    """Read an INI config file and resolve it against the defaults."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (configparser.Error, OSError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    file_cfg = {section: {k: _parse_value(v)
                          for k, v in parser.items(section)}
                for section in parser.sections()}
    return resolve_config(file_cfg)


def resolve_config(file_cfg: dict) -> dict:
    """Merge a partial config onto the experiment defaults and validate."""
    exp_section = file_cfg.get("experiment", {})
    name = exp_section.get("name")
    if name is None:
        raise ConfigError("missing [experiment] name")
    base = name
    if name == "custom":
        base = exp_section.get("base", "kdv")
    if base not in _EXPERIMENTS:
        raise ConfigError(f"unknown experiment {base!r}; choose from "
                          f"{sorted(_EXPERIMENTS)} or custom")
    cfg = copy.deepcopy(_GENERIC)
    for section, values in _EXPERIMENTS[base].items():
        cfg.setdefault(section, {}).update(copy.deepcopy(values))
    if name == "custom":
        cfg["experiment"]["name"] = "custom"
        cfg["experiment"]["base"] = base
    for section, values in file_cfg.items():
        if section not in cfg:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in values.items():
            if section != "thresholds" and key not in cfg[section]:
                raise ConfigError(
                    f"unknown key {key!r} in section [{section}]")
            cfg[section][key] = value
    return cfg


def config_text(cfg: dict) -> str:
    """Deterministic serialization of a resolved config."""
    lines = []
    for section in sorted(cfg):
        lines.append(f"[{section}]")
        for key in sorted(cfg[section]):
            lines.append(f"{key} = {cfg[section][key]!r}")
        lines.append("")
    return "\n".join(lines)


# Small helpers --------------------------------------------------------------

def _gauss(X: np.ndarray, mu: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Diagonal-covariance Gaussian density at rows of X."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    q = np.sum((X - mu) ** 2 / var, axis=1)
    norm = float(np.sqrt(np.prod(2.0 * np.pi * var)))
    return np.exp(-0.5 * q) / norm


def _write_csv(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = [f"{v:.17g}" if isinstance(v, float) else str(v)
                     for v in row]
            fh.write(",".join(cells) + "\n")


def _theta_interp(rec: TrajectoryRecord, t: float) -> ParamVector:
    """Piecewise-linear interpolation of the checkpointed parameters."""
    times = np.asarray(rec.times)
    if t <= times[0]:
        return rec.theta_at(0)
    if t >= times[-1]:
        return rec.final_theta
    j = int(np.searchsorted(times, t))
    t0, t1 = times[j - 1], times[j]
    lam = (t - t0) / (t1 - t0)
    values = (1 - lam) * rec.thetas[j - 1] + lam * rec.thetas[j]
    return ParamVector(rec.spec, values)


def _residual_series(rec: TrajectoryRecord):
    return ([s.t for s in rec.steps], [s.residual for s in rec.steps])


def _residual_growth(rec: TrajectoryRecord) -> float:
    res = np.array([s.residual for s in rec.steps])
    if res.size < 2:
        return math.nan
    start = float(np.median(res[:min(5, res.size)]))
    if start <= 0:
        return math.inf
    return float(res.max()) / start


# Experiment construction ----------------------------------------------------

@dataclass
class Experiment:
    """Everything the runner needs for one configured study."""

    name: str
    spec: NetSpec
    problem: object
    u0: Callable[[np.ndarray], np.ndarray]
    fit_measure: object
    fit_config: FitConfig
    policy: MeasurePolicy
    controller: object
    t_end: float
    checkpoint_stride: int
    evaluate: Callable
    init: ParamVector | None = None
    #: optional override producing {"tag": TrajectoryRecord, ...}
    simulate: Callable | None = None


def _build_controller(icfg: dict):
    scheme = icfg.get("scheme")
    try:
        if scheme == "rk45":
            return RK45DormandPrince(rtol=icfg["rtol"], atol=icfg["atol"],
                                     dt_init=icfg["dt_init"])
        if scheme == "forward_euler":
            return ForwardEuler(dt=icfg["dt"])
        if scheme == "backward_euler_opt":
            return BackwardEulerOpt(
                dt=icfg["dt"], inner_iters=icfg["inner_iters"],
                inner_lr=icfg["inner_lr"], optimizer=icfg["optimizer"],
                grad_mode=icfg["grad_mode"], loss=icfg["loss"])
    except (KeyError, ValueError) as err:
        raise ConfigError(f"bad integrator config: {err}") from err
    raise ConfigError(f"unknown integrator scheme {scheme!r}")


def _build_policy(scfg: dict, d: int) -> MeasurePolicy:
    kind = scfg["kind"]
    measure = None
    if kind == "static":
        lo = np.broadcast_to(np.atleast_1d(scfg["box_lo"]), (d,)).astype(float)
        hi = np.broadcast_to(np.atleast_1d(scfg["box_hi"]), (d,)).astype(float)
        measure = UniformBox(lo, hi)
    try:
        return MeasurePolicy(kind=kind, n=int(scfg["n"]), measure=measure,
                             kappa=float(scfg["kappa"]),
                             freeze_per_step=bool(scfg["freeze_per_step"]))
    except ValueError as err:
        raise ConfigError(str(err)) from err


def _build_fit_config(fcfg: dict) -> FitConfig:
    return FitConfig(batch=int(fcfg["batch"]),
                     iterations=int(fcfg["iterations"]),
                     learning_rate=float(fcfg["learning_rate"]),
                     replicates=int(fcfg["replicates"]),
                     optimizer=fcfg["optimizer"])


def build_experiment(cfg: dict) -> Experiment:
    name = cfg["experiment"]["name"]
    base = cfg["experiment"].get("base", name)
    builder = {
        "kdv": _build_kdv,
        "allen_cahn": _build_allen_cahn,
        "advection_time": _build_advection_time,
        "advection_spacetime": _build_advection_spacetime,
        "fp_harmonic": _build_fp,
        "fp_aharmonic": _build_fp,
    }.get(base)
    if builder is None:
        raise ConfigError(f"unknown experiment {base!r}")
    try:
        return builder(cfg)
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError) as err:
        raise ConfigError(f"invalid configuration: {err}") from err


def _build_kdv(cfg: dict) -> Experiment:
    ecfg = cfg["experiment"]
    acfg = cfg["architecture"]
    k1, k2 = float(ecfg["k1"]), float(ecfg["k2"])
    x1, x2 = float(ecfg["x1"]), float(ecfg["x2"])
    lo, hi = float(cfg["sampling"]["box_lo"]), float(cfg["sampling"]["box_hi"])
    problem = Kdv(domain=PeriodicBox((lo,), (hi,)))
    spec = NetSpec(architecture=acfg["architecture"], m=int(acfg["m"]), d=1,
                   L=float(acfg["L"]))

    def u0(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return kdv_exact(k1, k2, x1, x2, 0.0, X[:, 0])

    fit_measure = UniformBox(np.array([lo]), np.array([hi]))
    controller = _build_controller(cfg["integrator"])
    policy = _build_policy(cfg["sampling"], 1)

    def evaluate(exp, records, outdir, rng_m, seeds):
        rec = records["main"]
        w = int(ecfg["grid"])
        h = (hi - lo) / w
        grid = lo + h * np.arange(w)
        eval_times = np.linspace(0.0, exp.t_end, int(ecfg["eval_times"]))

        def ref(t):
            return kdv_exact(k1, k2, x1, x2, t, grid)

        def error_series(spec_r, rec_r):
            refs, apps, rows = [], [], []
            for t in eval_times:
                theta = _theta_interp(rec_r, t)
                u = eval_batch(spec_r, theta, grid[:, None]).u
                ur = ref(t)
                refs.append(ur)
                apps.append(u)
                rows.append((float(t),
                             rel_l2_error(ur[None, :], u[None, :])))
            total = rel_l2_error(np.array(refs), np.array(apps))
            return rows, total

        rows, total = error_series(exp.spec, rec)
        _write_csv(outdir / "error_ng.csv", ["t", "rel_l2"], rows)
        summary = {"rel_l2": total}

        if ecfg["baselines"]:
            mb = int(ecfg["baseline_m"])
            spec_b = NetSpec(architecture=spec.architecture, m=mb, d=1,
                             L=spec.L, frozen_features=True)
            rng_b = np.random.default_rng(int(seeds["fit"]) + 101)
            theta_eq = equidistant_features(
                spec_b, lo, hi, float(ecfg["baseline_bandwidth"]))
            theta_eq = fit_linear_coeffs(spec_b, theta_eq, u0, fit_measure,
                                         exp.fit_config, rng_b)
            spec_fit = NetSpec(architecture=spec.architecture, m=mb, d=1,
                               L=spec.L)
            theta_f, _ = fit_initial(spec_fit, u0, fit_measure,
                                     exp.fit_config, rng_b)
            theta_f = ParamVector(spec_b, theta_f.values)
            for tag, th in (("equidistant", theta_eq), ("fitted", theta_f)):
                rng_i = np.random.default_rng(int(seeds["integrate"]) + 101)
                rec_b = integrate(spec_b, th, (0.0, exp.t_end),
                                  exp.controller, problem, exp.policy,
                                  rng_i,
                                  checkpoint_stride=exp.checkpoint_stride)
                rows_b, total_b = error_series(spec_b, rec_b)
                _write_csv(outdir / f"error_linear_{tag}.csv",
                           ["t", "rel_l2"], rows_b)
                summary[f"rel_l2_baseline_{tag}"] = total_b
        return summary

    return Experiment(name="kdv", spec=spec, problem=problem, u0=u0,
                      fit_measure=fit_measure,
                      fit_config=_build_fit_config(cfg["fitting"]),
                      policy=policy, controller=controller,
                      t_end=float(ecfg["t_end"]),
                      checkpoint_stride=int(ecfg["checkpoint_stride"]),
                      evaluate=evaluate)


def _ac_reaction(t, x):
    return 1.05 + t * np.sin(x)


def _build_allen_cahn(cfg: dict) -> Experiment:
    ecfg = cfg["experiment"]
    acfg = cfg["architecture"]
    lo, hi = float(cfg["sampling"]["box_lo"]), float(cfg["sampling"]["box_hi"])
    L = hi - lo
    eps = float(ecfg["eps"])
    problem = AllenCahn(eps=eps, reaction_coeff=_ac_reaction,
                        domain=PeriodicBox((lo,), (hi,)))
    spec = NetSpec(architecture=acfg["architecture"], m=int(acfg["m"]), d=1,
                   L=float(acfg["L"]), layers=int(acfg["layers"]))
    w0, b1, b2 = float(ecfg["u0_w"]), float(ecfg["u0_b1"]), float(ecfg["u0_b2"])

    def bump(x, b):
        return np.exp(-w0 ** 2 * np.sin(np.pi * (x - b) / L) ** 2)

    def u0(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return bump(X[:, 0], b1) - bump(X[:, 0], b2)

    fit_measure = UniformBox(np.array([lo]), np.array([hi]))
    controller = _build_controller(cfg["integrator"])
    policy = _build_policy(cfg["sampling"], 1)

    def evaluate(exp, records, outdir, rng_m, seeds):
        rec = records["main"]
        ref = oracles.ac_reference(
            n_grid=int(ecfg["ref_grid"]), dt=float(ecfg["ref_dt"]), eps=eps,
            reaction_coeff=_ac_reaction, u0=lambda x: u0(x[:, None]),
            t_end=exp.t_end, domain=(lo, hi),
            n_snapshots=int(ecfg["eval_times"]))

        def error_series(spec_r, rec_r):
            refs, apps, rows = [], [], []
            for t, ur in zip(ref.times, ref.u):
                theta = _theta_interp(rec_r, float(t))
                u = eval_batch(spec_r, theta, ref.x[:, None]).u
                refs.append(ur)
                apps.append(u)
                rows.append((float(t),
                             rel_l2_error(ur[None, :], u[None, :])))
            return rows, rel_l2_error(np.array(refs), np.array(apps))

        rows, total = error_series(exp.spec, rec)
        _write_csv(outdir / "error_ng.csv", ["t", "rel_l2"], rows)
        summary = {"rel_l2": total}

        if ecfg["baselines"]:
            mb = int(ecfg["baseline_m"])
            spec_b = NetSpec(architecture="shallow_periodic_gaussian", m=mb,
                             d=1, L=L, frozen_features=True)
            rng_b = np.random.default_rng(int(seeds["fit"]) + 101)
            theta_b = equidistant_features(
                spec_b, lo, hi, float(ecfg["baseline_bandwidth"]))
            theta_b = fit_linear_coeffs(spec_b, theta_b, u0, fit_measure,
                                        exp.fit_config, rng_b)
            rng_i = np.random.default_rng(int(seeds["integrate"]) + 101)
            ctrl_b = RK45DormandPrince(rtol=1e-5, atol=1e-7, dt_init=1e-4)
            rec_b = integrate(spec_b, theta_b, (0.0, exp.t_end), ctrl_b,
                              problem, exp.policy, rng_i,
                              checkpoint_stride=exp.checkpoint_stride)
            rows_b, total_b = error_series(spec_b, rec_b)
            _write_csv(outdir / "error_linear_equidistant.csv",
                       ["t", "rel_l2"], rows_b)
            summary["rel_l2_baseline"] = total_b
        return summary

    return Experiment(name="allen_cahn", spec=spec, problem=problem, u0=u0,
                      fit_measure=fit_measure,
                      fit_config=_build_fit_config(cfg["fitting"]),
                      policy=policy, controller=controller,
                      t_end=float(ecfg["t_end"]),
                      checkpoint_stride=int(ecfg["checkpoint_stride"]),
                      evaluate=evaluate)


def advection_packets(d: int, time_only: bool):
    """Initial-condition Gaussian packets (means, variances, weights)."""
    k = np.arange(1, d + 1, dtype=float)
    alt = (-1.0) ** k * k
    if time_only:
        mu1 = 1.1 * np.ones(d)
        mu2 = 0.75 * (1.5 - alt / (d + 1))
        v1 = 2.0 * k / 200.0
        v2 = np.arange(d, 0, -1, dtype=float) / 200.0
        weights = (0.5, 0.5)
    else:
        mu1 = 2.0 - alt / 12.0
        mu2 = 1.8 + alt / 12.0
        v1 = np.full(d, 3.0 / 50.0)
        v2 = np.full(d, 3.0 / 100.0)
        weights = (0.1, 0.1)
    return (mu1, mu2), (v1, v2), weights


def _advection_u0(d: int, time_only: bool):
    (mu1, mu2), (v1, v2), (c1, c2) = advection_packets(d, time_only)

    def u0(X):
        return c1 * _gauss(X, mu1, v1) + c2 * _gauss(X, mu2, v2)

    return u0


def _advection_fit_measure(d: int, time_only: bool) -> GaussianMixture:
    (mu1, mu2), (v1, v2), _ = advection_packets(d, time_only)
    stds = np.array([2.0 * np.sqrt(np.mean(v1)), 2.0 * np.sqrt(np.mean(v2))])
    return GaussianMixture(means=np.stack([mu1, mu2]), stds=stds)


def _build_advection_time(cfg: dict) -> Experiment:
    ecfg = cfg["experiment"]
    d = int(ecfg["d"])
    problem = Advection(velocity=velocity_time_only(d), d=d, time_only=True)
    spec = NetSpec(architecture=cfg["architecture"]["architecture"],
                   m=int(cfg["architecture"]["m"]), d=d)
    u0 = _advection_u0(d, time_only=True)
    fit_measure = _advection_fit_measure(d, time_only=True)
    controller = _build_controller(cfg["integrator"])
    policy = _build_policy(cfg["sampling"], d)

    def eval_measure(t: float) -> GaussianMixture:
        (mu1, mu2), (v1, v2), _ = advection_packets(d, time_only=True)
        s = advection_displacement(d, t)
        stds = np.array([2.0 * np.sqrt(np.mean(v1)),
                         2.0 * np.sqrt(np.mean(v2))])
        return GaussianMixture(means=np.stack([mu1 + s, mu2 + s]), stds=stds)

    def error_series(exp, rec, rng_m):
        rows = []
        eval_times = np.linspace(0.0, exp.t_end, int(ecfg["eval_times"]))
        for t in eval_times:
            X = eval_measure(float(t)).sample(int(ecfg["eval_n"]), rng_m)
            s = advection_displacement(d, float(t))
            ur = u0(X - s)
            theta = _theta_interp(rec, float(t))
            u = eval_batch(exp.spec, theta, X).u
            rows.append((float(t), rel_l2_error(ur[None, :], u[None, :],
                                                rooted=True)))
        return rows

    def evaluate(exp, records, outdir, rng_m, seeds):
        rows = error_series(exp, records["main"], rng_m)
        _write_csv(outdir / "error_ng.csv", ["t", "rel_l2_rooted"], rows)
        summary = {"max_rel_l2": max(r[1] for r in rows)}
        if ecfg["compare_static"]:
            static = MeasurePolicy(
                kind="static", n=exp.policy.n,
                measure=UniformBox(np.full(d, float(ecfg["static_box_lo"])),
                                   np.full(d, float(ecfg["static_box_hi"]))),
                freeze_per_step=exp.policy.freeze_per_step)
            rng_i = np.random.default_rng(int(seeds["integrate"]) + 101)
            theta0 = records["main"].theta_at(0)
            try:
                rec_s = integrate(exp.spec, theta0, (0.0, exp.t_end),
                                  exp.controller, problem, static, rng_i,
                                  checkpoint_stride=exp.checkpoint_stride)
                rows_s = error_series(exp, rec_s, rng_m)
                summary["max_rel_l2_static"] = max(r[1] for r in rows_s)
            except NUMERICAL_ERRORS:
                rows_s = [(0.0, math.inf)]
                summary["max_rel_l2_static"] = math.inf
            _write_csv(outdir / "error_static.csv", ["t", "rel_l2_rooted"],
                       rows_s)
        return summary

    return Experiment(name="advection_time", spec=spec, problem=problem,
                      u0=u0, fit_measure=fit_measure,
                      fit_config=_build_fit_config(cfg["fitting"]),
                      policy=policy, controller=controller,
                      t_end=float(ecfg["t_end"]),
                      checkpoint_stride=int(ecfg["checkpoint_stride"]),
                      evaluate=evaluate)


def _build_advection_spacetime(cfg: dict) -> Experiment:
    ecfg = cfg["experiment"]
    d = int(ecfg["d"])
    problem = Advection(velocity=velocity_spacetime(d), d=d, time_only=False)
    spec = NetSpec(architecture=cfg["architecture"]["architecture"],
                   m=int(cfg["architecture"]["m"]), d=d)
    u0 = _advection_u0(d, time_only=False)
    fit_measure = _advection_fit_measure(d, time_only=False)
    controller = _build_controller(cfg["integrator"])
    policy = _build_policy(cfg["sampling"], d)
    t_end = float(ecfg["t_end"])

    def roundtrip(policy_r, theta0, rng):
        fwd = integrate(spec, theta0, (0.0, t_end), controller, problem,
                        policy_r, rng,
                        checkpoint_stride=int(ecfg["checkpoint_stride"]))
        back = TimeReversed(inner=problem, horizon=t_end)
        bwd = integrate(spec, fwd.final_theta, (0.0, t_end), controller,
                        back, policy_r, rng,
                        checkpoint_stride=int(ecfg["checkpoint_stride"]))
        return fwd, bwd

    def simulate(exp, theta0, rng):
        fwd, bwd = roundtrip(exp.policy, theta0, rng)
        records = {"main": fwd, "backward": bwd}
        if ecfg["compare_static"]:
            static = MeasurePolicy(
                kind="static", n=exp.policy.n,
                measure=UniformBox(np.full(d, float(ecfg["static_box_lo"])),
                                   np.full(d, float(ecfg["static_box_hi"]))),
                freeze_per_step=exp.policy.freeze_per_step)
            rng_s = np.random.default_rng(rng.integers(2 ** 63))
            try:
                sfwd, sbwd = roundtrip(static, theta0, rng_s)
                records["static_forward"] = sfwd
                records["static_backward"] = sbwd
            except NUMERICAL_ERRORS:
                records["static_forward"] = None
        return records

    def evaluate(exp, records, outdir, rng_m, seeds):
        X = fit_measure.sample(int(ecfg["eval_n"]), rng_m)
        u_ref = u0(X)
        u_back = eval_batch(spec, records["backward"].final_theta, X).u
        summary = {"rel_l2_return": rel_l2_error(u_ref[None, :],
                                                 u_back[None, :])}
        res_rows = []
        for tag in ("main", "backward", "static_forward", "static_backward"):
            rec = records.get(tag)
            if rec is None:
                continue
            ts, res = _residual_series(rec)
            offset = t_end if tag in ("backward", "static_backward") else 0.0
            res_rows += [(offset + t, r, tag) for t, r in zip(ts, res)]
        _write_csv(outdir / "residuals.csv", ["t", "residual", "run"],
                   res_rows)
        adaptive_steps = records["main"].steps + records["backward"].steps
        whole = TrajectoryRecord(spec=spec, steps=adaptive_steps)
        summary["residual_growth_adaptive"] = _residual_growth(whole)
        if ecfg["compare_static"]:
            sfwd = records.get("static_forward")
            if sfwd is None:
                summary["residual_growth_static"] = math.inf
            else:
                steps = sfwd.steps + records["static_backward"].steps
                summary["residual_growth_static"] = _residual_growth(
                    TrajectoryRecord(spec=spec, steps=steps))
        return summary

    return Experiment(name="advection_spacetime", spec=spec, problem=problem,
                      u0=u0, fit_measure=fit_measure,
                      fit_config=_build_fit_config(cfg["fitting"]),
                      policy=policy, controller=controller, t_end=t_end,
                      checkpoint_stride=int(ecfg["checkpoint_stride"]),
                      evaluate=evaluate, simulate=simulate)


def _fp_trap_center(t: float) -> float:
    return 1.25 * (np.sin(np.pi * t) + 1.5)


def fp_initial_moments(d: int, sigma2: float):
    """Mean vector and isotropic covariance of the particle initial law."""
    mean0 = 0.9 + 2.1 * np.arange(d) / max(1, d - 1)
    return mean0, sigma2 * np.eye(d)


def _fp_init_params(spec: NetSpec, mean0: np.ndarray, sigma2: float,
                    rng: np.random.Generator) -> ParamVector:
    """Density-aware initialization: nodes clustered on the initial Gaussian
    with bandwidths matching its width and unit total mass."""
    m, d = spec.m, spec.d
    values = np.zeros(spec.param_count)
    layout = spec.layout()
    centers = mean0 + 0.5 * np.sqrt(sigma2) * rng.standard_normal((m, d))
    w = (1.0 / np.sqrt(2.0 * sigma2)) * rng.uniform(0.8, 1.25, m)
    mass = (np.pi / w ** 2) ** (d / 2.0)
    values[layout["coeff"]] = np.sqrt(1.0 / (m * mass))
    values[layout["bandwidth"]] = w
    values[layout["center"]] = centers.ravel()
    return ParamVector(spec, values)


def _build_fp(cfg: dict) -> Experiment:
    ecfg = cfg["experiment"]
    name = cfg["experiment"]["name"]
    base = cfg["experiment"].get("base", name)
    d = int(ecfg["d"])
    trap = "aharmonic" if base == "fp_aharmonic" else "harmonic"
    force = ForceSpec(trap=trap, a=_fp_trap_center,
                      alpha=float(ecfg["alpha"]), D=float(ecfg["diffusion"]))
    problem = FokkerPlanck(force=force, d=d)
    spec = NetSpec(architecture=cfg["architecture"]["architecture"],
                   m=int(cfg["architecture"]["m"]), d=d)
    sigma2 = float(ecfg["sigma2"])
    mean0, cov0 = fp_initial_moments(d, sigma2)

    def u0(X):
        return _gauss(X, mean0, np.full(d, sigma2))

    fit_measure = GaussianMixture(means=mean0[None, :],
                                  stds=np.array([2.0 * np.sqrt(sigma2)]))
    controller = _build_controller(cfg["integrator"])
    policy = _build_policy(cfg["sampling"], d)
    init = _fp_init_params(spec, mean0, sigma2,
                           np.random.default_rng(int(cfg["seeds"]["fit"])))

    def moment_rows(exp, rec, ref_fn, eval_times):
        rows = []
        for t in eval_times:
            mean_ng, cov_ng = mixture_moments(spec, _theta_interp(rec, t))
            mean_r, cov_r = ref_fn(float(t))
            mean_err = (np.linalg.norm(mean_ng - mean_r)
                        / np.linalg.norm(mean_r))
            dng, dr = np.diag(cov_ng), np.diag(cov_r)
            cov_err = np.linalg.norm(dng - dr) / np.linalg.norm(dr)
            rows.append((float(t), float(mean_err), float(cov_err)))
        return rows

    def evaluate_harmonic(exp, records, outdir, rng_m, seeds):
        rec = records["main"]
        ts, means, covs = oracles.fp_moment_odes(
            d, force.alpha, force.a, force.D, mean0, cov0, exp.t_end)

        def ref_fn(t):
            mean_r = np.array([np.interp(t, ts, means[:, i])
                               for i in range(d)])
            cov_r = np.array([[np.interp(t, ts, covs[:, i, j])
                               for j in range(d)] for i in range(d)])
            return mean_r, cov_r

        eval_times = np.linspace(0.0, exp.t_end, int(ecfg["eval_times"]))
        rows = moment_rows(exp, rec, ref_fn, eval_times)
        _write_csv(outdir / "moments_error.csv",
                   ["t", "mean_rel_err", "covdiag_rel_err"], rows)
        summary = {
            "mean_rel_err": max(r[1] for r in rows),
            "covdiag_rel_err": max(r[2] for r in rows),
        }
        stats = density_stats(spec, rec.final_theta,
                              int(ecfg["entropy_samples"]), rng_m)
        _, cov_T = ref_fn(exp.t_end)
        summary["entropy"] = stats.entropy
        summary["entropy_se"] = stats.entropy_se
        summary["entropy_ref"] = gaussian_entropy(cov_T)
        return summary

    def evaluate_aharmonic(exp, records, outdir, rng_m, seeds):
        rec = records["main"]
        rng_em = np.random.default_rng(int(seeds["metrics"]) + 101)

        def x0_sampler(paths, rng):
            return mean0 + np.sqrt(sigma2) * rng.standard_normal((paths, d))

        ens = oracles.euler_maruyama(force, d, int(ecfg["em_paths"]),
                                     float(ecfg["em_dt"]), exp.t_end, rng_em,
                                     x0_sampler=x0_sampler,
                                     record_every=int(ecfg["em_record"]))

        def ref_fn(t):
            j = int(np.argmin(np.abs(ens.times - t)))
            return ens.means[j], ens.covs[j]

        eval_times = ens.times
        rows = moment_rows(exp, rec, ref_fn, eval_times)
        _write_csv(outdir / "moments_error.csv",
                   ["t", "mean_rel_err", "covdiag_rel_err"], rows)
        summary = {
            "mean_rel_err": max(r[1] for r in rows),
            "covdiag_rel_err": max(r[2] for r in rows),
        }
        # cross-entropy of the simulated ensemble under the fitted density
        # bounds the ensemble entropy from above
        be = eval_batch(spec, rec.final_theta, ens.endpoint)
        from .metrics import component_masses

        total = component_masses(spec, rec.final_theta).sum()
        logs = np.log(np.maximum(be.u / total, 1e-300))
        stats = density_stats(spec, rec.final_theta,
                              int(ecfg["entropy_samples"]), rng_m)
        summary["entropy"] = stats.entropy
        summary["entropy_se"] = stats.entropy_se
        summary["cross_entropy"] = -float(np.mean(logs))
        summary["cross_entropy_se"] = float(np.std(logs, ddof=1)
                                            / np.sqrt(logs.size))
        return summary

    evaluate = (evaluate_aharmonic if trap == "aharmonic"
                else evaluate_harmonic)
    return Experiment(name=name, spec=spec, problem=problem, u0=u0,
                      fit_measure=fit_measure,
                      fit_config=_build_fit_config(cfg["fitting"]),
                      policy=policy, controller=controller,
                      t_end=float(ecfg["t_end"]),
                      checkpoint_stride=int(ecfg["checkpoint_stride"]),
                      evaluate=evaluate, init=init)


# Runner ---------------------------------------------------------------------

def run_experiment(cfg: dict, out_override: str | None = None,
                   workers: int | None = None) -> int:
    outdir = Path(out_override or cfg["output"]["dir"]
                  or f"runs/{cfg['experiment']['name']}")
    outdir.mkdir(parents=True, exist_ok=True)
    resolved = config_text(cfg)
    (outdir / "resolved.cfg").write_text(resolved)
    digest = hashlib.sha256(resolved.encode()).hexdigest()

    exp = build_experiment(cfg)
    seeds = cfg["seeds"]
    started = time.perf_counter()
    try:
        rng_fit = np.random.default_rng(int(seeds["fit"]))
        theta0, report = fit_initial(exp.spec, exp.u0, exp.fit_measure,
                                     exp.fit_config, rng_fit, init=exp.init)
        (outdir / "fit_report.txt").write_text(report.summary() + "\n")
        save_checkpoint(outdir / "theta_initial.txt", exp.spec, theta0)

        rng_int = np.random.default_rng(int(seeds["integrate"]))
        if exp.simulate is not None:
            records = exp.simulate(exp, theta0, rng_int)
        else:
            records = {"main": integrate(
                exp.spec, theta0, (0.0, exp.t_end), exp.controller,
                exp.problem, exp.policy, rng_int,
                checkpoint_stride=exp.checkpoint_stride)}
        for tag, rec in records.items():
            if rec is not None:
                rec.save(outdir / f"trajectory_{tag}.txt")
        save_checkpoint(outdir / "theta_final.txt", exp.spec,
                        records["main"].final_theta)

        rng_m = np.random.default_rng(int(seeds["metrics"]))
        summary = exp.evaluate(exp, records, outdir, rng_m, seeds)
    except NUMERICAL_ERRORS as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    wall = time.perf_counter() - started

    _write_csv(outdir / "summary.csv", ["metric", "value"],
               sorted((k, float(v)) for k, v in summary.items()))
    with open(outdir / "manifest.txt", "w") as fh:
        fh.write(f"package_version {__version__}\n")
        fh.write(f"experiment {cfg['experiment']['name']}\n")
        fh.write(f"config_sha256 {digest}\n")
        for key in sorted(seeds):
            fh.write(f"seed_{key} {seeds[key]}\n")
        fh.write(f"workers {workers if workers else os.cpu_count()}\n")
        fh.write(f"wall_time_s {wall:.3f}\n")
        for key in sorted(summary):
            fh.write(f"metric_{key} {summary[key]:.17g}\n")

    status = EXIT_OK
    for key, bound in cfg["thresholds"].items():
        value = summary.get(key)
        if value is None or not value <= float(bound):
            print(f"threshold failed: {key} = {value} > {bound}",
                  file=sys.stderr)
            status = EXIT_THRESHOLD
    print(f"artifacts written to {outdir}")
    for key in sorted(summary):
        print(f"  {key} = {summary[key]:.6g}")
    return status


# Property suite ---------------------------------------------------------------

def _fd_theta_grad(spec, theta, x, h=1e-6):
    grad = np.empty(spec.param_count)
    for j in range(spec.param_count):
        up = theta.values.copy()
        up[j] += h
        dn = theta.values.copy()
        dn[j] -= h
        fu = eval_batch(spec, ParamVector(spec, up), x).u[0]
        fd = eval_batch(spec, ParamVector(spec, dn), x).u[0]
        grad[j] = (fu - fd) / (2 * h)
    return grad


def _prop_gradients():
    from .fitting import init_params

    rng = np.random.default_rng(7)
    for arch, kwargs in (("shallow_gaussian", {}),
                         ("shallow_squared_gaussian", {}),
                         ("shallow_periodic_gaussian", {"L": 4.0}),
                         ("deep_tanh_periodic", {"L": 4.0, "layers": 2})):
        spec = NetSpec(architecture=arch, m=3, d=2, **kwargs)
        measure = UniformBox(np.zeros(2), 4.0 * np.ones(2))
        theta = init_params(spec, measure, rng)
        theta.values[:] += 0.3 * rng.standard_normal(spec.param_count)
        x = rng.uniform(0.5, 3.5, (1, 2))
        from .nets import DerivMask

        g = eval_batch(spec, theta, x, DerivMask(grad_theta=True)).grad_theta[0]
        g_fd = _fd_theta_grad(spec, theta, x)
        scale = np.maximum(np.abs(g_fd), 1.0)
        assert np.max(np.abs(g - g_fd) / scale) < 1e-4, arch


def _prop_assembly_permutation():
    from .assembly import assemble
    from .sampling import SampleSet

    rng = np.random.default_rng(3)
    spec = NetSpec(architecture="shallow_gaussian", m=3, d=2)
    theta = ParamVector(spec, rng.standard_normal(spec.param_count))
    problem = Advection(velocity=lambda t, X: np.ones_like(X), d=2)
    X = rng.standard_normal((40, 2))
    logd = np.zeros(40)
    s1 = SampleSet(points=X, log_density=logd)
    perm = rng.permutation(40)
    s2 = SampleSet(points=X[perm], log_density=logd[perm])
    a1 = assemble(spec, theta, problem, 0.0, s1)
    a2 = assemble(spec, theta, problem, 0.0, s2)
    assert np.array_equal(a1.M, a2.M) and np.array_equal(a1.F, a2.F)


def _prop_ode_exactness():
    ts, ys = integrate_ode(lambda t, y: np.array([5.0 * t ** 4]), 0.0,
                           np.array([0.0]), 1.0, rtol=1e-10, atol=1e-12)
    assert abs(ys[-1, 0] - 1.0) < 1e-12


def _prop_rel_l2_hand_case():
    u = np.array([[1.0, 0.0], [0.0, 1.0]])
    ut = np.array([[0.0, 0.0], [0.0, 1.0]])
    assert abs(rel_l2_error(u, ut) - 0.5) < 1e-15


def _prop_mixture_normalization():
    mix = GaussianMixture(means=np.array([[0.0], [1.5]]),
                          stds=np.array([0.4, 0.9]))
    from .sampling import density

    x = np.linspace(-8, 10, 20001)[:, None]
    mass = np.trapz(density(mix, x), x[:, 0])
    assert abs(mass - 1.0) < 1e-6


def _prop_moment_ode_closed_form():
    d = 3
    mean0 = np.array([1.0, -0.5, 2.0])
    cov0 = 0.3 * np.eye(d)
    ts, means, covs = oracles.fp_moment_odes(
        d, 0.0, lambda t: 2.0, 0.05, mean0, cov0, 1.0)
    m_exact = 2.0 + (mean0 - 2.0) * np.exp(-1.0)
    c_exact = 0.05 + (0.3 - 0.05) * np.exp(-2.0)
    assert np.max(np.abs(means[-1] - m_exact)) < 1e-8
    assert np.max(np.abs(np.diag(covs[-1]) - c_exact)) < 1e-8


def _prop_checkpoint_roundtrip(tmpdir=None):
    import tempfile

    rng = np.random.default_rng(11)
    spec = NetSpec(architecture="deep_tanh_periodic", m=3, d=2, L=5.0,
                   layers=2)
    theta = ParamVector(spec, rng.standard_normal(spec.param_count))
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "ckpt.txt"
        save_checkpoint(path, spec, theta)
        spec2, theta2 = load_checkpoint(path)
    assert spec2 == spec and np.array_equal(theta2.values, theta.values)


PROPERTY_CHECKS = [
    ("gradient_finite_difference", _prop_gradients),
    ("assembly_permutation_invariance", _prop_assembly_permutation),
    ("integrator_polynomial_exactness", _prop_ode_exactness),
    ("rel_l2_hand_case", _prop_rel_l2_hand_case),
    ("mixture_density_normalization", _prop_mixture_normalization),
    ("moment_ode_closed_form", _prop_moment_ode_closed_form),
    ("checkpoint_roundtrip", _prop_checkpoint_roundtrip),
]


def run_property_suite() -> int:
    failures = 0
    for name, check in PROPERTY_CHECKS:
        try:
            check()
        except AssertionError as err:
            print(f"FAIL {name}: {err}")
            failures += 1
        else:
            print(f"PASS {name}")
    return EXIT_OK if failures == 0 else EXIT_THRESHOLD


# Inspect / diff -------------------------------------------------------------

def inspect_checkpoint(path) -> int:
    spec, theta = load_checkpoint(path)
    report = fit_check_dimensions(spec, theta)
    print(f"architecture {spec.architecture}  m={spec.m} d={spec.d} "
          f"L={spec.L} layers={spec.layers} frozen={spec.frozen_features}")
    print(f"parameters {spec.param_count} (active {spec.active_count}), "
          f"layout {report['status']}")
    for name, sl in spec.layout().items():
        block = theta.values[sl]
        print(f"  {name:<10} [{sl.start}:{sl.stop}) "
              f"l2={np.linalg.norm(block):.6g} "
              f"max|.|={np.max(np.abs(block)):.6g}")
    return EXIT_OK


def diff_runs(dir_a, dir_b) -> int:
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    names = sorted(set(p.name for p in dir_a.glob("*.csv"))
                   & set(p.name for p in dir_b.glob("*.csv")))
    if not names:
        print("no common metric CSVs")
        return EXIT_CONFIG
    identical = True
    for name in names:
        a = (dir_a / name).read_text()
        b = (dir_b / name).read_text()
        if a == b:
            print(f"{name}: identical")
            continue
        identical = False
        try:
            va = np.genfromtxt(dir_a / name, delimiter=",", skip_header=1)
            vb = np.genfromtxt(dir_b / name, delimiter=",", skip_header=1)
            if va.shape == vb.shape:
                num = va if va.ndim else va[None]
                delta = np.max(np.abs(num - (vb if vb.ndim else vb[None])))
                print(f"{name}: max abs delta {delta:.6g}")
            else:
                print(f"{name}: shapes differ {va.shape} vs {vb.shape}")
        except ValueError:
            print(f"{name}: differs (non-numeric)")
    return EXIT_OK if identical else EXIT_THRESHOLD


# Entry point -----------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ngal", description="Galerkin-in-time PDE experiment runner")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_run = sub.add_parser("run", help="run an experiment or property suite")
    p_run.add_argument("config", nargs="?", help="config file path")
    p_run.add_argument("--suite", choices=["properties"],
                       help="run a built-in check suite instead")
    p_run.add_argument("--output", help="override the output directory")
    p_run.add_argument("--workers", type=int, default=None,
                       help="worker count for sample evaluation (results "
                            "are identical for any value)")

    p_ins = sub.add_parser("inspect", help="print checkpoint layout/norms")
    p_ins.add_argument("checkpoint")

    p_diff = sub.add_parser("diff", help="compare two artifact directories")
    p_diff.add_argument("run_a")
    p_diff.add_argument("run_b")

    args = parser.parse_args(argv)
    if args.verb == "run":
        if args.suite:
            return run_property_suite()
        if not args.config:
            parser.error("run needs a config file or --suite")
        try:
            cfg = load_config(args.config)
            if args.output:
                cfg["output"]["dir"] = args.output
            return run_experiment(cfg, workers=args.workers)
        except ConfigError as err:
            print(f"config error: {err}", file=sys.stderr)
            return EXIT_CONFIG
    if args.verb == "inspect":
        try:
            return inspect_checkpoint(args.checkpoint)
        except (OSError, KeyError, ValueError) as err:
            print(f"cannot inspect {args.checkpoint}: {err}", file=sys.stderr)
            return EXIT_CONFIG
    if args.verb == "diff":
        return diff_runs(args.run_a, args.run_b)
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
