"""Empirical checks of the probe-error bound: curvature, constants, checkpoint sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.optimize import nnls
from scipy.stats import spearmanr

from .dynamics import TWO_BODY, DatasetSplit, target_function
from .probes import DegenerateDesignError, fit_linear_probe
from .worldmodel import ModelParams, decoder_jacobian, evaluate_ssl, extract_activations, latents_for, make_windows

FD_STEP = 1e-4


@dataclass
class CurvatureEstimate:
    target_name: str
    K_phi: float
    mean_gradient: np.ndarray
    method: str = "central-difference Hessian"
    step: float = FD_STEP
    n_points: int = 0
    skipped: int = 0

    @property
    def linear(self) -> bool:
        return self.K_phi == 0.0

    def to_json(self):
        return {"target": self.target_name, "K_phi": self.K_phi, "mean_gradient": self.mean_gradient.tolist(),
                "method": self.method, "step": self.step, "n_points": self.n_points,
                "skipped": self.skipped, "linear_functional": self.linear}


def _as_columns(values: np.ndarray, n: int) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape(n, -1)


def curvature_of(fn: Callable[[np.ndarray], np.ndarray], states: np.ndarray, step: float = FD_STEP,
                 valid: Callable[[np.ndarray], np.ndarray] | None = None):
    """Finite-difference Hessian spectral norms and gradients of ``fn`` at each state.

    Returns (K per state, gradients (N, d, k), keep mask).  ``valid`` marks
    perturbed states that stay inside the domain; points whose stencil leaves
    it are dropped.
    """
    X = np.asarray(states, dtype=np.float64)
    n, d = X.shape
    eye = np.eye(d) * step
    f0 = _as_columns(fn(X), n)
    k = f0.shape[1]
    keep = np.ones(n, dtype=bool)

    def ev(P):
        if valid is not None:
            keep[:] &= valid(P)
        return _as_columns(fn(P), n)

    grads = np.empty((n, d, k))
    hess = np.empty((n, k, d, d))
    scale = np.abs(f0)
    for i in range(d):
        fp, fm = ev(X + eye[i]), ev(X - eye[i])
        grads[:, i] = (fp - fm) / (2 * step)
        scale = np.maximum(scale, np.maximum(np.abs(fp), np.abs(fm)))
        for j in range(i, d):
            fpp = ev(X + eye[i] + eye[j])
            fpm = ev(X + eye[i] - eye[j])
            fmp = ev(X - eye[i] + eye[j])
            fmm = ev(X - eye[i] - eye[j])
            scale = np.maximum.reduce([scale, np.abs(fpp), np.abs(fpm), np.abs(fmp), np.abs(fmm)])
            h = (fpp - fpm - fmp + fmm) / (4 * step * step)
            hess[:, :, i, j] = h
            hess[:, :, j, i] = h
    # entries at the rounding floor of the stencil are treated as exact zeros
    tol = 64 * np.finfo(float).eps * scale / (step * step)
    hess = np.where(np.abs(hess) <= tol[:, :, None, None], 0.0, hess)
    K = np.linalg.norm(hess, ord=2, axis=(2, 3)).max(axis=1) if d else np.zeros(n)
    return K, grads, keep


def estimate_curvature(target: str, data: DatasetSplit | np.ndarray, step: float = FD_STEP,
                       fn: Callable | None = None, guard: float | None = None) -> CurvatureEstimate:
    """K_phi as the largest Hessian spectral norm of the target over the sampled states.

    ``data`` is a split (states and per-trajectory specs are read from it) or
    a raw state matrix together with ``fn``.
    """
    groups = []
    if isinstance(data, DatasetSplit):
        for traj in data.trajectories:
            f = fn or target_function(target, traj.spec)
            g = guard if guard is not None else (traj.spec.r_min_guard if data.system_kind == TWO_BODY else None)
            groups.append((f, traj.full_states, g, traj.spec.obs_dim))
    else:
        if fn is None:
            raise ValueError("raw states need an explicit target function")
        states = np.asarray(data, dtype=np.float64)
        groups.append((fn, states, guard, states.shape[1] // 2))
    Ks, grads, skipped, total = [], [], 0, 0
    for f, states, g, obs_dim in groups:
        valid = None
        if g is not None:
            valid = lambda P, g=g, o=obs_dim: np.linalg.norm(P[:, :o], axis=1) >= g
        K, G, keep = curvature_of(f, states, step, valid)
        total += len(states)
        skipped += int((~keep).sum())
        Ks.append(K[keep])
        grads.append(G[keep])
    Ks = np.concatenate(Ks) if Ks else np.empty(0)
    if len(Ks) == 0:
        raise ValueError("no admissible states for curvature estimation")
    G = np.concatenate(grads)
    mu = G.mean(axis=0)
    if mu.shape[-1] == 1:
        mu = mu[..., 0]
    return CurvatureEstimate(target, float(Ks.max()), mu, step=step, n_points=total - skipped, skipped=skipped)


def state_variance(data: DatasetSplit) -> float:
    """Total variance (trace of the covariance) of the full states in ``data``."""
    X = np.concatenate([t.full_states for t in data.trajectories])
    return float(np.var(X, axis=0).sum())


# --------------------------------------------------------------------------
# constant fitting


@dataclass
class BoundFit:
    C1: float
    C2: float
    intercepts: dict[float, float]
    slack: list[float]
    unconstrained: list[float] = field(default_factory=list)

    def predict(self, eps, K, var_x, dt) -> float:
        return self.C1 * eps + self.C2 * K * K * var_x + self.intercepts[float(dt)]

    def to_json(self):
        return {"C1": self.C1, "C2": self.C2,
                "intercepts": [{"dt": k, "value": v} for k, v in sorted(self.intercepts.items())],
                "slack": self.slack, "unconstrained": self.unconstrained}


def _rows(sweep) -> np.ndarray:
    out = []
    for row in sweep:
        if isinstance(row, Mapping):
            out.append([row["eps"], row["K_phi"], row["var_x"], row["dt"], row["probe_error"]])
        else:
            out.append(list(row))
    arr = np.asarray(out, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 5:
        raise ValueError("sweep rows must be (eps, K_phi, var_x, dt, probe_error)")
    return arr


def fit_bound_constants(sweep) -> BoundFit:
    """Nonnegative fit of error ~ C1*eps + C2*K^2*Var + c(dt).

    After the fit each per-dt intercept is raised by the largest violation in
    its group so the fitted envelope covers every point.
    """
    arr = _rows(sweep)
    if len(arr) < 3:
        raise ValueError("need at least 3 sweep points")
    eps, K, var_x, dt, err = arr.T
    if len(np.unique(eps)) < 2:
        raise DegenerateDesignError("all sweep points share one eps: C1 is not identifiable")
    dts = sorted(set(dt.tolist()))
    A = np.zeros((len(arr), 2 + len(dts)))
    A[:, 0] = eps
    A[:, 1] = K * K * var_x
    for j, v in enumerate(dts):
        A[dt == v, 2 + j] = 1.0
    # column scaling keeps the active-set solver well conditioned
    norms = np.linalg.norm(A, axis=0)
    norms[norms == 0] = 1.0
    coef, _ = nnls(A / norms, err)
    coef = coef / norms
    unconstrained = np.linalg.lstsq(A, err, rcond=None)[0]
    intercepts = {v: float(coef[2 + j]) for j, v in enumerate(dts)}
    fitted = A @ coef
    for j, v in enumerate(dts):
        rows = dt == v
        gap = float(np.max(err[rows] - fitted[rows]))
        if gap > 0:
            intercepts[v] += gap
    fit = BoundFit(float(coef[0]), float(coef[1]), intercepts, [])
    fit.slack = [float(fit.predict(*r[:4]) - r[4]) for r in arr]
    fit.unconstrained = [float(c) for c in unconstrained]
    return fit


# --------------------------------------------------------------------------
# checkpoint sweep


@dataclass
class BoundPoint:
    target: str
    dt: float
    checkpoint: int
    eps: float
    K_phi: float
    var_x: float
    probe_error: float
    modeling: float = 0.0
    curvature: float = 0.0
    discretization: float = 0.0
    satisfied: bool = True


@dataclass
class BoundReport:
    points: list[BoundPoint]
    fit: BoundFit
    spearman: dict[str, dict[float, float]]
    curvature: dict[str, CurvatureEstimate]
    block: str
    intercept_slope: float | None = None
    variance_source: str = "probe_train"
    residual_link: dict[float, dict[str, float]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def all_satisfied(self) -> bool:
        return all(p.satisfied for p in self.points)

    def errors(self, target: str, dt: float | None = None) -> list[float]:
        return [p.probe_error for p in self.points if p.target == target and (dt is None or p.dt == dt)]

    def to_json(self):
        return {
            "block": self.block,
            "C1": self.fit.C1,
            "C2": self.fit.C2,
            "fit": self.fit.to_json(),
            "points": [p.__dict__ for p in self.points],
            "spearman": {t: [{"dt": k, "rho": v} for k, v in sorted(d.items())] for t, d in self.spearman.items()},
            "curvature": {t: c.to_json() for t, c in self.curvature.items()},
            "all_satisfied": self.all_satisfied,
            "intercept_loglog_slope": self.intercept_slope,
            "variance_source": self.variance_source,
            "residual_link": [{"dt": k, **v} for k, v in sorted(self.residual_link.items())],
            "notes": self.notes,
        }

    def csv_rows(self) -> list[dict]:
        return [dict(p.__dict__) for p in self.points]


def probe_error(params: ModelParams, fit_data: DatasetSplit, eval_data: DatasetSplit, target: str,
                block: str = "final", alpha: float = 1.0, mode: str = "delta") -> float:
    """Held-out squared error (summed over components) of a ridge probe on the target increment."""
    probe = fit_linear_probe(extract_activations(params, fit_data, block, target, mode), alpha)
    rec = extract_activations(params, eval_data, block, target, mode)
    diff = probe.predict(rec.H) - rec.S
    return float(np.mean(np.sum(diff * diff, axis=1)))


def residual_link(params: ModelParams, data: DatasetSplit) -> dict[str, float]:
    """Mean ||J h_t - dx_t||^2 for the final latent, next to the SSL error."""
    J = decoder_jacobian(params)
    w = make_windows(data, params.config.window)
    H = latents_for(params, w.X, "final")
    dx = w.Y - w.X[:, -params.config.obs_dim:]
    gap = H @ J.T - dx
    return {"mean_sq": float(np.mean(np.sum(gap * gap, axis=1))), "eps": evaluate_ssl(params, data)}


def _spearman(x, y) -> float:
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(spearmanr(x, y)[0])


def validate_bound(checkpoints: Sequence[ModelParams] | Mapping[float, Sequence[ModelParams]],
                   targets: Sequence[str], dt_values: Sequence[float],
                   data_factory: Callable[[float], tuple[DatasetSplit, DatasetSplit]],
                   block: str = "final", alpha: float = 1.0) -> BoundReport:
    """Sweep (checkpoint, target, dt), fit the constants and check the envelope.

    ``data_factory(dt)`` returns (probe-fit split, held-out split) at that
    observation interval, both with ``targets`` computed.  ``checkpoints`` is
    either one list used at every dt or a map from dt to the models trained
    at that interval.
    """
    points: list[BoundPoint] = []
    curvature: dict[str, CurvatureEstimate] = {}
    links: dict[float, dict[str, float]] = {}
    for dt in sorted(float(v) for v in dt_values):
        models = checkpoints[dt] if isinstance(checkpoints, Mapping) else checkpoints
        if not models:
            raise ValueError(f"no checkpoints for dt={dt}")
        fit_data, eval_data = data_factory(dt)
        var_x = state_variance(fit_data)
        for target in targets:
            est = estimate_curvature(target, fit_data)
            curvature.setdefault(target, est)
            if est.K_phi > curvature[target].K_phi:
                curvature[target] = est
            for i, params in enumerate(models):
                eps = evaluate_ssl(params, eval_data)
                err = probe_error(params, fit_data, eval_data, target, block, alpha)
                points.append(BoundPoint(target, dt, i, eps, est.K_phi, var_x, err))
        links[dt] = residual_link(models[-1], eval_data)
    fit = fit_bound_constants([(p.eps, p.K_phi, p.var_x, p.dt, p.probe_error) for p in points])
    for p, s in zip(points, fit.slack):
        p.modeling = fit.C1 * p.eps
        p.curvature = fit.C2 * p.K_phi**2 * p.var_x
        p.discretization = fit.intercepts[p.dt]
        p.satisfied = bool(s >= -1e-9)
    spear: dict[str, dict[float, float]] = {}
    for target in targets:
        spear[target] = {}
        for dt in sorted(set(p.dt for p in points)):
            sel = [p for p in points if p.target == target and p.dt == dt]
            spear[target][dt] = _spearman([p.eps for p in sel], [p.probe_error for p in sel])
    slope = None
    pos = [(d, c) for d, c in sorted(fit.intercepts.items()) if c > 0]
    if len(pos) >= 2:
        slope = float(np.polyfit(np.log([d for d, _ in pos]), np.log([c for _, c in pos]), 1)[0])
    notes = ["C_step and C_grad are not separately identifiable; only C1 and C2 are fitted",
             "Var(x) is the total state variance of the probe-fit split"]
    return BoundReport(points, fit, spear, curvature, block, slope, "probe_train", links, notes)
