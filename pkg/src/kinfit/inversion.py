"""Pixel-wise regularized Gauss-Newton estimation of rate constants.

Each iteration linearizes the model at the current iterate, picks a
Tikhonov parameter r by generalized cross validation on the SVD of the
Jacobian, solves (r I + F^T F) delta = F^T Y, zeroes step components that
would drive a rate constant non-positive, and updates.  Iteration stops when
the relative data residual falls below the configured tolerance.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import FitError, InvalidArgument, SingularSystemError
from .kinetics import InputFunction, MeasurementModel, ModelSpec, RateConstants, TimeGrid
from .preprocess import DynamicImage

__all__ = [
    "FitStatus",
    "FitConfig",
    "FitResult",
    "ParametricImages",
    "assemble_linearization",
    "gcv_grid",
    "gcv_curve",
    "gcv_select",
    "regularized_step",
    "project_step",
    "fit_pixel",
    "fit_image",
    "model_map_from_roi",
]


class FitStatus(enum.IntEnum):
    CONVERGED = 0
    MAX_ITERATIONS = 1
    BELOW_ACTIVITY_THRESHOLD = 2


@dataclass(frozen=True)
class FitConfig:
    """Settings for the Gauss-Newton loop.

    ``initial_guess`` fixes the starting vector; when None each fit draws
    uniformly from (0, 1)^p.  ``fixed`` holds named parameters at given
    values (they are excluded from the update).  With ``feasible_gcv`` the
    GCV minimum is taken only over grid values of r whose step keeps every
    rate constant positive, so the projection cannot freeze a component
    that a larger r would have moved.  ``max_step`` caps the infinity norm
    of a step by raising r in decades.  With ``monotone`` a step whose
    actual residual reduction is below ``min_gain`` times the linearized
    prediction is retried with r multiplied by 10, at most
    ``max_backtracks`` times; when the GCV step predicts less than
    ``stall_fraction`` of the current residual the loop restarts from the
    smallest feasible r instead.
    """

    activity_threshold: float = 1e2
    stop_tolerance: float = 0.1
    max_iterations: int = 50
    seed: int = 0
    initial_guess: tuple[float, ...] | None = None
    gcv_points: int = 60
    gcv_span: tuple[float, float] = (1e-8, 1e8)
    divergence_patience: int = 5
    fixed: Mapping[str, float] | None = None
    feasible_gcv: bool = True
    monotone: bool = True
    max_backtracks: int = 16
    min_gain: float = 0.25
    max_step: float | None = 1.0
    stall_fraction: float = 1e-3

    def __post_init__(self):
        if self.activity_threshold < 0:
            raise InvalidArgument("activity threshold must be >= 0")
        if not self.stop_tolerance > 0:
            raise InvalidArgument("stop tolerance must be > 0")
        if self.max_iterations < 1:
            raise InvalidArgument("max_iterations must be >= 1")
        lo, hi = self.gcv_span
        if self.gcv_points < 1 or not (0 < lo <= hi):
            raise InvalidArgument("GCV grid must be non-empty and positive")
        if self.max_backtracks < 0:
            raise InvalidArgument("max_backtracks must be >= 0")
        if not 0 <= self.min_gain < 1:
            raise InvalidArgument("min_gain must lie in [0, 1)")
        if self.max_step is not None and not self.max_step > 0:
            raise InvalidArgument("max_step must be > 0 or None")
        if self.stall_fraction < 0:
            raise InvalidArgument("stall_fraction must be >= 0")
        if self.divergence_patience < 1:
            raise InvalidArgument("divergence_patience must be >= 1")
        if self.initial_guess is not None:
            object.__setattr__(self, "initial_guess", tuple(float(x) for x in self.initial_guess))

    @classmethod
    def noiseless(cls, **kwargs) -> "FitConfig":
        kwargs.setdefault("stop_tolerance", 1e-4)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "activity_threshold": self.activity_threshold,
            "stop_tolerance": self.stop_tolerance,
            "max_iterations": self.max_iterations,
            "seed": self.seed,
            "initial_guess": None if self.initial_guess is None else list(self.initial_guess),
            "gcv_points": self.gcv_points,
            "feasible_gcv": self.feasible_gcv,
            "monotone": self.monotone,
            "max_backtracks": self.max_backtracks,
            "min_gain": self.min_gain,
            "max_step": self.max_step,
            "stall_fraction": self.stall_fraction,
            "gcv_span": list(self.gcv_span),
            "divergence_patience": self.divergence_patience,
            "fixed": None if self.fixed is None else dict(self.fixed),
        }


@dataclass(eq=False)
class FitResult:
    k_hat: RateConstants
    status: FitStatus
    iterations: int
    relative_residual_history: list[float] = field(default_factory=list)
    selected_r_history: list[float] = field(default_factory=list)
    initial_guess: np.ndarray | None = None
    # relative residual of k_hat (nan when no iteration ran)
    relative_residual: float = float("nan")

    @property
    def converged(self) -> bool:
        return self.status is FitStatus.CONVERGED


@dataclass(eq=False)
class ParametricImages:
    """One map per parameter name plus per-pixel fit diagnostics.

    Parameter names shared by both models (k_mf, k_fm) share one map.
    """

    model_map: np.ndarray  # (I, J) object array of ModelSpec
    maps: dict[str, np.ndarray]
    status: np.ndarray  # (I, J) FitStatus codes
    residual: np.ndarray  # (I, J) relative residual, nan where not fitted
    iterations: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.status.shape

    def models(self) -> list[ModelSpec]:
        return sorted({m for m in self.model_map.ravel() if m is not None}, key=lambda m: m.n_params)


def assemble_linearization(model, k, input_function, grid, V_b, tac, measurement: MeasurementModel | None = None):
    """Jacobian rows F (T, p) and right-hand side Y = C~ - V_b IF - alpha^T C(k)."""
    mm = measurement or MeasurementModel(model, input_function, grid, V_b)
    tac = np.asarray(tac, dtype=float)
    if tac.shape != (len(grid),):
        raise InvalidArgument(f"TAC has shape {tac.shape}, expected ({len(grid)},)")
    predicted, F = mm.predict_and_jacobian(k)
    return F, tac - predicted


def gcv_grid(F: np.ndarray, points: int = 60, span: tuple[float, float] = (1e-8, 1e8)) -> np.ndarray:
    """Log-spaced candidate r values scaled by the largest eigenvalue of F^T F."""
    s_max = np.linalg.norm(F, 2) if F.size else 0.0
    scale = s_max**2 if s_max > 0 else 1.0
    return scale * np.logspace(np.log10(span[0]), np.log10(span[1]), points)


def _svd(F):
    U, s, Vt = np.linalg.svd(np.asarray(F, dtype=float), full_matrices=False)
    return U, s, Vt


def _gcv_from_svd(U, s, Y, rs):
    T = Y.shape[0]
    beta = U.T @ Y
    perp = max(float(Y @ Y - beta @ beta), 0.0)
    s2 = s**2
    filt = s2[None, :] / (s2[None, :] + rs[:, None])
    num = (((1.0 - filt) * beta[None, :]) ** 2).sum(axis=1) + perp
    den = (T - filt.sum(axis=1)) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        g = num / den
    return np.where(den > 0, g, np.inf)


def gcv_curve(F, Y, rs) -> np.ndarray:
    """GCV(r) = ||(I - A(r)) Y||^2 / trace(I - A(r))^2 for each r."""
    U, s, _ = _svd(F)
    return _gcv_from_svd(U, s, np.asarray(Y, dtype=float), np.asarray(rs, dtype=float))


def _select(rs, g):
    g_min = np.min(g)
    if not np.isfinite(g_min):
        return float(rs[-1])
    ties = np.flatnonzero(g <= g_min * (1 + 1e-12))
    return float(rs[ties].max())


def gcv_select(F, Y, grid=None) -> float:
    """Candidate r minimizing GCV; ties go to the larger r."""
    F = np.asarray(F, dtype=float)
    rs = gcv_grid(F) if grid is None else np.asarray(grid, dtype=float)
    if rs.size == 0 or np.any(rs <= 0):
        raise InvalidArgument("GCV grid must be non-empty and positive")
    if not np.any(F):
        return float(rs.max())
    return _select(rs, gcv_curve(F, Y, rs))


def _step_from_svd(U, s, Vt, Y, r):
    beta = U.T @ Y
    if r == 0:
        tol = s.max(initial=0.0) * max(U.shape[0], Vt.shape[0]) * np.finfo(float).eps
        if s.size < Vt.shape[0] or np.any(s <= tol):
            raise SingularSystemError("F^T F is singular and r = 0")
    return Vt.T @ (s / (s**2 + r) * beta)


def regularized_step(F, Y, r: float) -> np.ndarray:
    """Solve (r I + F^T F) delta = F^T Y."""
    if r < 0:
        raise InvalidArgument("regularization parameter must be >= 0")
    U, s, Vt = _svd(F)
    return _step_from_svd(U, s, Vt, np.asarray(Y, dtype=float), float(r))


def _feasible(U, s, Vt, Y, rs, k):
    # steps for all candidate r at once: (n_r, p)
    beta = U.T @ Y
    steps = (s[None, :] / (s[None, :] ** 2 + rs[:, None]) * beta[None, :]) @ Vt
    bad = k[None, :] + steps <= 0
    # components blocked at every r are projected regardless; they do not veto r
    bad &= ~bad.all(axis=0)
    return ~bad.any(axis=1)


def project_step(k, delta) -> np.ndarray:
    """Zero the step components with k_q + delta_q <= 0."""
    k = np.asarray(k, dtype=float)
    delta = np.asarray(delta, dtype=float)
    return np.where(k + delta > 0, delta, 0.0)


def _initial_guess(model, config, rng):
    if config.initial_guess is not None:
        k0 = np.asarray(config.initial_guess, dtype=float)
        if k0.size != model.n_params or np.any(k0 < 0):
            raise InvalidArgument("initial guess must have one non-negative entry per parameter")
        return k0.copy()
    return rng.uniform(np.finfo(float).tiny, 1.0, model.n_params)


def fit_pixel(
    tac,
    input_function: InputFunction,
    grid: TimeGrid,
    V_b: float,
    model: ModelSpec,
    config: FitConfig = FitConfig(),
    rng: np.random.Generator | None = None,
    measurement: MeasurementModel | None = None,
) -> FitResult:
    """Estimate the rate constants of one pixel TAC.

    Args:
        tac: measured concentrations at the frame midpoints (kBq/ml).
        rng: source for the random initial guess; defaults to a generator
            seeded with ``config.seed``.
        measurement: precomputed forward model for the same
            (model, input function, grid, V_b); built when omitted.

    Returns:
        FitResult whose estimate is the final iterate on convergence and
        the lowest-residual iterate otherwise.
    """
    tac = np.asarray(tac, dtype=float)
    if tac.shape != (len(grid),):
        raise InvalidArgument(f"TAC has shape {tac.shape}, expected ({len(grid)},)")
    p = model.n_params
    norm = float(np.linalg.norm(tac))
    if norm <= config.activity_threshold:
        return FitResult(RateConstants(model, np.zeros(p)), FitStatus.BELOW_ACTIVITY_THRESHOLD, 0)

    mm = measurement or MeasurementModel(model, input_function, grid, V_b)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    k = _initial_guess(model, config, rng)
    free = np.ones(p, dtype=bool)
    if config.fixed:
        for name, value in config.fixed.items():
            if name not in model.param_names:
                raise InvalidArgument(f"{model} has no parameter {name!r}")
            idx = model.param_names.index(name)
            free[idx] = False
            k[idx] = float(value)
    k0 = k.copy()
    target = tac - mm.blood

    history: list[float] = []
    r_history: list[float] = []
    best_k, best_res = k.copy(), np.inf
    rises = 0
    status = FitStatus.MAX_ITERATIONS
    for it in range(1, config.max_iterations + 1):
        try:
            predicted, F = mm.predict_and_jacobian(k)
        except Exception as exc:  # forward failure at this iterate
            raise FitError(f"forward model failed: {exc}", iteration=it, k=k) from exc
        Y = target - (predicted - mm.blood)
        res = float(np.linalg.norm(Y)) / norm
        if not np.isfinite(res):
            raise FitError("non-finite residual", iteration=it, k=k)
        history.append(res)
        if res < best_res:
            best_k, best_res = k.copy(), res
        if res <= config.stop_tolerance:
            status = FitStatus.CONVERGED
            best_k, best_res = k.copy(), res
            break
        rises = rises + 1 if len(history) > 1 and res > history[-2] else 0
        if rises >= config.divergence_patience or it == config.max_iterations:
            break

        Ff = F[:, free]
        U, s, Vt = _svd(Ff)
        rs = gcv_grid(Ff, config.gcv_points, config.gcv_span)
        feasible = _feasible(U, s, Vt, Y, rs, k[free]) if config.feasible_gcv else np.ones(rs.size, bool)
        if not np.any(s):
            r = float(rs.max())
        else:
            g = _gcv_from_svd(U, s, Y, rs)
            r = _select(rs, np.where(feasible, g, np.inf))

        current = float(Y @ Y)

        def damped(r):
            # raise r until the step respects max_step, then project
            delta = np.zeros(p)
            for _ in range(config.max_backtracks + 1):
                delta[free] = _step_from_svd(U, s, Vt, Y, r)
                if config.max_step is None or np.max(np.abs(delta)) <= config.max_step:
                    break
                r *= 10.0
            step = project_step(k, delta)
            if np.any(k + step < 0):
                raise FitError("iterate left the non-negative orthant", iteration=it, k=k + step)
            lin = Y - F @ step
            return r, step, current - float(lin @ lin)

        r, step, predicted = damped(r)
        if config.monotone and np.any(s) and predicted < config.stall_fraction * current:
            # GCV asked for (almost) no step; restart from the least damped feasible r
            r, step, predicted = damped(float(rs[feasible].min()) if feasible.any() else float(rs.min()))
        if config.monotone:
            for _ in range(config.max_backtracks):
                trial = target - (mm.predict(k + step) - mm.blood)
                actual = current - float(trial @ trial)
                if predicted > 0 and actual >= config.min_gain * predicted:
                    break
                r, step, predicted = damped(r * 10.0)
        r_history.append(r)
        k = k + step

    return FitResult(
        RateConstants(model, best_k),
        status,
        len(history),
        history,
        r_history,
        initial_guess=k0,
        relative_residual=best_res,
    )


def model_map_from_roi(roi: np.ndarray, inside: ModelSpec = ModelSpec.THREE_RENAL,
                       outside: ModelSpec = ModelSpec.TWO_CATENARY) -> np.ndarray:
    """Per-pixel model assignment: ``inside`` on the ROI, ``outside`` elsewhere."""
    roi = np.asarray(roi, dtype=bool)
    out = np.empty(roi.shape, dtype=object)
    out[roi] = inside
    out[~roi] = outside
    return out


def fit_image(
    dyn: DynamicImage,
    input_function: InputFunction,
    grid: TimeGrid | None,
    V_b: float | np.ndarray,
    models: ModelSpec | np.ndarray,
    config: FitConfig = FitConfig(),
    fit_mask: np.ndarray | None = None,
) -> ParametricImages:
    """Fit every pixel independently with its assigned model.

    ``models`` is a single ModelSpec or an (I, J) object array of them;
    ``V_b`` is a scalar or an (I, J) map.
    Pixel (i, j) draws its initial guess from a generator seeded with
    (config.seed, i, j), so results do not depend on visiting order.
    """
    grid = grid or dyn.grid
    if grid is None:
        raise InvalidArgument("no time grid given")
    I, J, T = dyn.shape
    if T != len(grid):
        raise InvalidArgument(f"image has {T} frames but the grid has {len(grid)}")
    if isinstance(models, ModelSpec):
        model_map = np.empty((I, J), dtype=object)
        model_map[...] = models
    else:
        model_map = np.asarray(models, dtype=object)
        if model_map.shape != (I, J):
            raise InvalidArgument(f"model map shape {model_map.shape} != image shape {(I, J)}")
    if fit_mask is None:
        fit_mask = np.ones((I, J), dtype=bool)
    elif np.asarray(fit_mask).shape != (I, J):
        raise InvalidArgument("fit mask shape does not match the image")
    fit_mask = np.asarray(fit_mask, dtype=bool)
    vb_map = np.broadcast_to(np.asarray(V_b, dtype=float), (I, J))
    if np.any((vb_map < 0) | (vb_map > 1)):
        raise InvalidArgument("V_b must lie in [0, 1]")

    used = sorted({m for m in model_map[fit_mask]}, key=lambda m: m.n_params)
    names: list[str] = []
    for m in used:
        names += [n for n in m.param_names if n not in names]
    maps = {name: np.zeros((I, J)) for name in names}
    status = np.full((I, J), FitStatus.BELOW_ACTIVITY_THRESHOLD, dtype=np.int8)
    residual = np.full((I, J), np.nan)
    iterations = np.zeros((I, J), dtype=np.int32)
    measurements: dict = {}

    voxels = dyn.voxels
    for i in range(I):
        for j in range(J):
            if not fit_mask[i, j]:
                continue
            m = model_map[i, j]
            vb = float(vb_map[i, j])
            if (m, vb) not in measurements:
                measurements[m, vb] = MeasurementModel(m, input_function, grid, vb)
            rng = np.random.default_rng([config.seed, i, j])
            res = fit_pixel(voxels[i, j], input_function, grid, vb, m, config, rng=rng,
                            measurement=measurements[m, vb])
            for name, value in zip(m.param_names, res.k_hat.k):
                maps[name][i, j] = value
            status[i, j] = res.status
            iterations[i, j] = res.iterations
            residual[i, j] = res.relative_residual
    return ParametricImages(model_map, maps, status, residual, iterations)
