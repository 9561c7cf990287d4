"""Conventional baseline: 2D pseudo-Voigt fitting via Levenberg-Marquardt.

Fits the seven-parameter model from :mod:`peakloc.synth` (bg, amp, eta,
mu_y, mu_z, sigma_y, sigma_z) to a patch by damped Gauss-Newton with an
analytic Jacobian and moment-based initialization. This is the reference
method every other localizer is measured against, and the slow side of the
throughput benchmark, so it stays a deliberately straightforward per-patch
implementation.

Non-convergence is reported through ``FitResult.converged``, never raised:
batch pipelines must keep flowing and filter downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .segment import Patch
from .synth import PeakParams

_PARAM_NAMES = ("bg", "amp", "eta", "mu_y", "mu_z", "sigma_y", "sigma_z")

# projection bounds applied after every accepted step
_SIGMA_FLOOR = 1e-6
_AMP_FLOOR = 1e-12


@dataclass
class LMOptions:
    max_iterations: int = 200
    cost_tol: float = 1e-10        # relative decrease per accepted step
    step_tol: float = 1e-8         # step norm relative to parameter norm
    damping_init: float = 1e-3
    damping_up: float = 10.0
    damping_down: float = 0.1

    def __post_init__(self):
        for name in ("max_iterations", "cost_tol", "step_tol", "damping_init",
                     "damping_up", "damping_down"):
            if getattr(self, name) <= 0:
                raise ValueError(f"LMOptions.{name} must be positive")


@dataclass
class FitResult:
    params: PeakParams
    converged: bool
    n_iterations: int
    final_cost: float
    center_in_patch: tuple[float, float]
    cost_history: list[float] = field(default_factory=list)  # accepted-step costs


def _pixel_grids(size: int) -> tuple[np.ndarray, np.ndarray]:
    yy, zz = np.meshgrid(np.arange(size, dtype=float), np.arange(size, dtype=float))
    return yy.ravel(), zz.ravel()


def _model_and_jacobian(vec: np.ndarray, yy: np.ndarray, zz: np.ndarray):
    """Model values and d(model)/d(params) on flattened pixel grids."""
    bg, amp, eta, mu_y, mu_z, sigma_y, sigma_z = vec
    u = (yy - mu_y) / sigma_y
    v = (zz - mu_z) / sigma_z
    r2 = u * u + v * v
    lor = 1.0 / (1.0 + r2)
    gau = np.exp(-0.5 * r2)
    shape = eta * lor + (1.0 - eta) * gau
    model = bg + amp * shape

    # dI/dr2, then chain through r2's partials
    dI_dr2 = amp * (-eta * lor * lor - 0.5 * (1.0 - eta) * gau)
    jac = np.empty((yy.size, 7))
    jac[:, 0] = 1.0                              # bg
    jac[:, 1] = shape                            # amp
    jac[:, 2] = amp * (lor - gau)                # eta
    jac[:, 3] = dI_dr2 * (-2.0 * u / sigma_y)    # mu_y
    jac[:, 4] = dI_dr2 * (-2.0 * v / sigma_z)    # mu_z
    jac[:, 5] = dI_dr2 * (-2.0 * u * u / sigma_y)  # sigma_y
    jac[:, 6] = dI_dr2 * (-2.0 * v * v / sigma_z)  # sigma_z
    return model, jac


def pv_residual_jacobian(p: PeakParams, patch: Patch) -> tuple[np.ndarray, np.ndarray]:
    """Residuals (model - data) and analytic Jacobian over all patch pixels.

    Rows follow raster order; columns follow the parameter order
    (bg, amp, eta, mu_y, mu_z, sigma_y, sigma_z).
    """
    vec = np.array([p.bg, p.amp, p.eta, p.mu_y, p.mu_z, p.sigma_y, p.sigma_z])
    yy, zz = _pixel_grids(patch.size)
    model, jac = _model_and_jacobian(vec, yy, zz)
    return model - patch.values.ravel(), jac


def init_from_moments(patch: Patch) -> PeakParams:
    """Moment-based starting point: min/max for bg/amp, weighted centroid,
    second central moments for the widths (clamped to [0.3, size]), eta 0.5."""
    vals = np.asarray(patch.values, dtype=float)
    lo = float(vals.min())
    hi = float(vals.max())
    if hi <= lo:
        raise ValueError("flat patch: no dynamic range to initialize a fit")
    weights = vals - lo
    total = weights.sum()
    yy, zz = _pixel_grids(patch.size)
    w = weights.ravel()
    mu_y = float((w * yy).sum() / total)
    mu_z = float((w * zz).sum() / total)
    var_y = float((w * (yy - mu_y) ** 2).sum() / total)
    var_z = float((w * (zz - mu_z) ** 2).sum() / total)
    size = float(patch.size)
    return PeakParams(
        bg=max(lo, 0.0),  # counts are nonnegative; guards background-subtracted input
        amp=hi - lo,
        eta=0.5,
        mu_y=mu_y,
        mu_z=mu_z,
        sigma_y=float(np.clip(np.sqrt(var_y), 0.3, size)),
        sigma_z=float(np.clip(np.sqrt(var_z), 0.3, size)),
    )


def _project(vec: np.ndarray) -> np.ndarray:
    vec = vec.copy()
    vec[0] = max(vec[0], 0.0)
    vec[1] = max(vec[1], _AMP_FLOOR)
    vec[2] = min(max(vec[2], 0.0), 1.0)
    vec[5] = max(vec[5], _SIGMA_FLOOR)
    vec[6] = max(vec[6], _SIGMA_FLOOR)
    return vec


def fit_patch(patch: Patch, opts: LMOptions | None = None) -> FitResult:
    """Levenberg-Marquardt fit of the pseudo-Voigt model to one patch.

    Damping scales the diagonal of the normal equations (Marquardt
    variant); accepted steps shrink it, rejected steps and singular systems
    grow it. Parameters are projected onto the valid set after every
    accepted step.
    """
    if opts is None:
        opts = LMOptions()
    data = np.asarray(patch.values, dtype=float).ravel()
    yy, zz = _pixel_grids(patch.size)

    p0 = init_from_moments(patch)
    vec = _project(
        np.array([p0.bg, p0.amp, p0.eta, p0.mu_y, p0.mu_z, p0.sigma_y, p0.sigma_z])
    )
    model, jac = _model_and_jacobian(vec, yy, zz)
    resid = model - data
    cost = float(resid @ resid)
    history = [cost]

    lam = opts.damping_init
    converged = False
    n_iter = 0
    for n_iter in range(1, opts.max_iterations + 1):
        jtj = jac.T @ jac
        jtr = jac.T @ resid
        diag = np.diag(jtj).copy()
        diag[diag <= 0] = 1.0  # guard exactly-zero curvature directions
        try:
            step = np.linalg.solve(jtj + lam * np.diag(diag), -jtr)
        except np.linalg.LinAlgError:
            lam *= opts.damping_up
            continue
        trial = _project(vec + step)
        trial_model, trial_jac = _model_and_jacobian(trial, yy, zz)
        trial_resid = trial_model - data
        trial_cost = float(trial_resid @ trial_resid)

        if not np.isfinite(trial_cost) or trial_cost > cost:
            lam *= opts.damping_up
            continue

        step_small = np.linalg.norm(trial - vec) <= opts.step_tol * (
            np.linalg.norm(vec) + opts.step_tol
        )
        cost_small = (cost - trial_cost) <= opts.cost_tol * max(cost, 1e-300)
        vec, model, jac, resid, cost = trial, trial_model, trial_jac, trial_resid, trial_cost
        history.append(cost)
        lam = max(lam * opts.damping_down, 1e-12)
        if step_small or cost_small:
            converged = True
            break

    params = PeakParams(
        bg=float(vec[0]), amp=float(vec[1]), eta=float(vec[2]),
        mu_y=float(vec[3]), mu_z=float(vec[4]),
        sigma_y=float(vec[5]), sigma_z=float(vec[6]),
    )
    return FitResult(
        params=params,
        converged=converged,
        n_iterations=n_iter,
        final_cost=cost,
        center_in_patch=(params.mu_y, params.mu_z),
        cost_history=history,
    )
