"""Compartmental forward models for FDG kinetics.

Two topologies are supported: the standard two-compartment catenary model
(free and metabolized FDG fed from blood) and the three-compartment
non-catenary renal model (free, metabolized and tubule compartments with a
dual arterial input).  Both are linear ODE systems

    dC/dt = M C + w * IF(t),   C(0) = 0,

where M and the input weights w depend linearly on the rate constants.

Time is in minutes throughout; rate constants are in 1/min.  Frame
schedules are given in seconds and converted on construction.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import DomainError, InvalidArgument

__all__ = [
    "ModelSpec",
    "RateConstants",
    "TimeGrid",
    "GammaVariateParams",
    "InputFunction",
    "CompartmentCurves",
    "MeasurementModel",
    "build_system",
    "solve_forward",
    "tissue_measurement",
    "sensitivities",
]


class ModelSpec(enum.Enum):
    """Compartmental topology with its fixed parameter ordering."""

    TWO_CATENARY = ("two_catenary", 2, ("k_fb", "k_bf", "k_mf", "k_fm"))
    THREE_RENAL = (
        "three_renal",
        3,
        ("k_fa", "k_ma", "k_af", "k_mf", "k_fm", "k_tm", "k_ut"),
    )

    def __init__(self, key, n_compartments, param_names):
        self.key = key
        self.n_compartments = n_compartments
        self.param_names = param_names

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    @classmethod
    def from_name(cls, name: str) -> "ModelSpec":
        aliases = {"2c": cls.TWO_CATENARY, "renal": cls.THREE_RENAL, "3c": cls.THREE_RENAL}
        key = name.strip().lower()
        if key in aliases:
            return aliases[key]
        for member in cls:
            if key in (member.key, member.name.lower()):
                return member
        raise InvalidArgument(f"unknown model {name!r}")

    def __str__(self):
        return self.key


def _structure(model: ModelSpec) -> tuple[np.ndarray, np.ndarray]:
    """Constant derivative tensors dM/dk (p, n, n) and dw/dk (p, n)."""
    n, p = model.n_compartments, model.n_params
    dM = np.zeros((p, n, n))
    dw = np.zeros((p, n))
    if model is ModelSpec.TWO_CATENARY:
        # k_fb, k_bf, k_mf, k_fm
        dw[0, 0] = 1.0
        dM[1, 0, 0] = -1.0
        dM[2, 0, 0] = -1.0
        dM[2, 1, 0] = 1.0
        dM[3, 0, 1] = 1.0
        dM[3, 1, 1] = -1.0
    else:
        # k_fa, k_ma, k_af, k_mf, k_fm, k_tm, k_ut
        dw[0, 0] = 1.0
        dw[1, 1] = 1.0
        dM[2, 0, 0] = -1.0
        dM[3, 0, 0] = -1.0
        dM[3, 1, 0] = 1.0
        dM[4, 0, 1] = 1.0
        dM[4, 1, 1] = -1.0
        dM[5, 1, 1] = -1.0
        dM[5, 2, 1] = 1.0
        dM[6, 2, 2] = -1.0
    dM.setflags(write=False)
    dw.setflags(write=False)
    return dM, dw


_STRUCTURE = {m: _structure(m) for m in ModelSpec}


def _as_rates(model: ModelSpec, k) -> np.ndarray:
    if isinstance(k, RateConstants):
        if k.model is not model:
            raise InvalidArgument(f"rate constants are for {k.model}, not {model}")
        return k.k
    arr = np.asarray(k, dtype=float).reshape(-1)
    if arr.size != model.n_params:
        raise InvalidArgument(
            f"{model} expects {model.n_params} rate constants, got {arr.size}"
        )
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise InvalidArgument(f"rate constants must be finite and non-negative: {arr}")
    return arr


@dataclass(frozen=True, eq=False)
class RateConstants:
    """A kinetic parameter vector bound to its model (1/min, all >= 0)."""

    model: ModelSpec
    k: np.ndarray

    def __post_init__(self):
        arr = _as_rates(self.model, self.k).copy()
        arr.setflags(write=False)
        object.__setattr__(self, "k", arr)

    @classmethod
    def from_mapping(cls, model: ModelSpec, values: dict) -> "RateConstants":
        missing = [name for name in model.param_names if name not in values]
        if missing:
            raise InvalidArgument(f"missing rate constants: {', '.join(missing)}")
        return cls(model, [float(values[name]) for name in model.param_names])

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.model.param_names, map(float, self.k)))

    def __iter__(self):
        return iter(self.k)

    def __len__(self):
        return len(self.k)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Contiguous acquisition frames; starts and durations in seconds."""

    frame_start: np.ndarray
    frame_duration: np.ndarray

    def __post_init__(self):
        start = np.asarray(self.frame_start, dtype=float).reshape(-1)
        dur = np.asarray(self.frame_duration, dtype=float).reshape(-1)
        if start.size == 0 or start.size != dur.size:
            raise InvalidArgument("frame starts and durations must be non-empty and equal length")
        if not (np.all(np.isfinite(start)) and np.all(np.isfinite(dur))):
            raise InvalidArgument("frame schedule must be finite")
        if np.any(dur <= 0):
            raise InvalidArgument("frame durations must be positive")
        if start[0] < 0:
            raise InvalidArgument("first frame cannot start before t = 0")
        ends = start[:-1] + dur[:-1]
        if not np.allclose(start[1:], ends, rtol=0, atol=1e-9 * max(1.0, float(ends.max(initial=1.0)))):
            raise InvalidArgument("frames must be contiguous")
        for arr in (start, dur):
            arr.setflags(write=False)
        object.__setattr__(self, "frame_start", start)
        object.__setattr__(self, "frame_duration", dur)

    @classmethod
    def from_durations(cls, durations: Sequence[float], start: float = 0.0) -> "TimeGrid":
        dur = np.asarray(durations, dtype=float)
        starts = start + np.concatenate([[0.0], np.cumsum(dur)[:-1]])
        return cls(starts, dur)

    @cached_property
    def midpoints(self) -> np.ndarray:
        """Frame midpoints in minutes."""
        mid = (self.frame_start + 0.5 * self.frame_duration) / 60.0
        mid.setflags(write=False)
        return mid

    @property
    def total_duration(self) -> float:
        """Seconds from the first frame start to the last frame end."""
        return float(self.frame_start[-1] + self.frame_duration[-1] - self.frame_start[0])

    def __len__(self):
        return self.frame_start.size

    def to_dict(self) -> dict:
        return {
            "frame_start_s": self.frame_start.tolist(),
            "frame_duration_s": self.frame_duration.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TimeGrid":
        return cls(d["frame_start_s"], d["frame_duration_s"])


@dataclass(frozen=True)
class GammaVariateParams:
    """A * ((t - t0)/beta)^alpha * exp(-(t - t0)/beta) for t > t0, else 0."""

    A: float
    t0: float
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("A", "alpha", "beta"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise InvalidArgument(f"gamma-variate {name} must be positive, got {value}")
        if not math.isfinite(self.t0):
            raise InvalidArgument("gamma-variate t0 must be finite")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        u = np.maximum(t - self.t0, 0.0) / self.beta
        with np.errstate(divide="ignore", invalid="ignore"):
            val = self.A * np.exp(self.alpha * np.log(u) - u)
        return np.where(t > self.t0, val, 0.0)

    @property
    def peak_time(self) -> float:
        return self.t0 + self.alpha * self.beta

    @property
    def peak_value(self) -> float:
        return self.A * self.alpha**self.alpha * math.exp(-self.alpha)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.A, self.t0, self.alpha, self.beta)


class InputFunction:
    """Blood tracer concentration driving the compartments (kBq/ml vs minutes).

    Either sampled (piecewise-linear between samples, 0 before the first
    sample, last value held afterwards) or an analytic gamma variate.
    """

    def __init__(self, *, times=None, values=None, gamma: GammaVariateParams | None = None):
        if (gamma is None) == (times is None):
            raise InvalidArgument("give either samples or gamma-variate parameters")
        self.gamma = gamma
        if gamma is None:
            t = np.asarray(times, dtype=float).reshape(-1)
            c = np.asarray(values, dtype=float).reshape(-1)
            if t.size == 0 or t.size != c.size:
                raise InvalidArgument("input function needs equal-length, non-empty samples")
            if not (np.all(np.isfinite(t)) and np.all(np.isfinite(c))):
                raise InvalidArgument("input function samples must be finite")
            if np.any(np.diff(t) <= 0):
                raise InvalidArgument("input function sample times must be strictly increasing")
            if np.any(c < 0):
                raise InvalidArgument("input function concentrations must be non-negative")
            t.setflags(write=False)
            c.setflags(write=False)
            self.times, self.values = t, c
        else:
            self.times = self.values = None

    @classmethod
    def from_samples(cls, times, values) -> "InputFunction":
        return cls(times=times, values=values)

    @classmethod
    def from_gamma(cls, A, t0=None, alpha=None, beta=None) -> "InputFunction":
        params = A if isinstance(A, GammaVariateParams) else GammaVariateParams(A, t0, alpha, beta)
        return cls(gamma=params)

    @property
    def mode(self) -> str:
        return "samples" if self.gamma is None else "gamma_variate"

    def __call__(self, t):
        if self.gamma is not None:
            return self.gamma(t)
        t = np.asarray(t, dtype=float)
        return np.interp(t, self.times, self.values, left=0.0, right=self.values[-1])

    def breakpoints(self) -> np.ndarray:
        """Times where the function is not smooth (quadrature panel edges)."""
        if self.gamma is None:
            return self.times
        return np.array([self.gamma.t0])

    def to_dict(self) -> dict:
        if self.gamma is not None:
            g = self.gamma
            return {"kind": "gamma_variate", "A": g.A, "t0": g.t0, "alpha": g.alpha, "beta": g.beta}
        return {"kind": "samples", "times_min": self.times.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "InputFunction":
        kind = d.get("kind")
        if kind == "gamma_variate":
            return cls.from_gamma(float(d["A"]), float(d["t0"]), float(d["alpha"]), float(d["beta"]))
        if kind == "samples":
            return cls.from_samples(d["times_min"], d["values"])
        raise InvalidArgument(f"unknown input function kind {kind!r}")

    def __repr__(self):
        if self.gamma is not None:
            return f"InputFunction(gamma={self.gamma})"
        return f"InputFunction(samples={self.times.size})"


@dataclass(frozen=True, eq=False)
class CompartmentCurves:
    model: ModelSpec
    times: np.ndarray
    C: np.ndarray  # (n_compartments, T)

    @property
    def total(self) -> np.ndarray:
        return self.C.sum(axis=0)


def build_system(model: ModelSpec, k) -> tuple[np.ndarray, np.ndarray]:
    """Return the compartment matrix M (1/min) and input weights w (1/min)."""
    rates = _as_rates(model, k)
    dM, dw = _STRUCTURE[model]
    return np.tensordot(rates, dM, axes=1), rates @ dw


# Quadrature settings for the exponential convolutions.
_PANEL_MIN = 0.25
_GL_ORDER = 8
_GL_X, _GL_W = np.polynomial.legendre.leggauss(_GL_ORDER)
# Fallback integrator step (0.25 s).
_RK4_STEP_MIN = 0.25 / 60.0
_EIG_COND_MAX = 1e8


class _ConvolutionPlan:
    """Composite Gauss-Legendre rule for E(lam, t_i) = int_0^t_i exp(lam (t_i - s)) IF(s) ds.

    Panels break at every evaluation time and every kink of the input
    function, so each panel integrand is smooth.  Contributions are summed
    per evaluation interval and then propagated with exp(lam * (t_i - t_j)).
    """

    def __init__(self, input_function: InputFunction, times: np.ndarray):
        times = np.asarray(times, dtype=float)
        if times.ndim != 1 or times.size == 0:
            raise DomainError("need at least one evaluation time")
        if times[0] <= 0 or np.any(np.diff(times) <= 0):
            raise DomainError("evaluation times must be positive and strictly increasing")
        t_end = times[-1]
        cuts = [np.array([0.0]), times]
        bp = np.asarray(input_function.breakpoints(), dtype=float)
        bp = bp[(bp > 0) & (bp < t_end)]
        cuts.append(bp)
        if input_function.gamma is not None and bp.size:
            # geometric grading after the gamma-variate onset (non-smooth for small alpha)
            grade = bp[0] + _PANEL_MIN * 0.5 ** np.arange(1, 9)
            cuts.append(grade[grade < t_end])
        edges = np.unique(np.concatenate(cuts))
        nodes, weights = [], []
        for a, b in zip(edges[:-1], edges[1:]):
            n_pan = max(1, int(math.ceil((b - a) / _PANEL_MIN - 1e-9)))
            sub = np.linspace(a, b, n_pan + 1)
            half = 0.5 * np.diff(sub)
            centre = 0.5 * (sub[:-1] + sub[1:])
            nodes.append((centre[:, None] + half[:, None] * _GL_X[None, :]).ravel())
            weights.append((half[:, None] * _GL_W[None, :]).ravel())
        nodes = np.concatenate(nodes)
        weights = np.concatenate(weights)
        g = np.asarray(input_function(nodes), dtype=float)
        if not np.all(np.isfinite(g)):
            raise DomainError("input function is undefined on part of [0, last time]")
        interval = np.searchsorted(times, nodes)
        self.times = times
        self.offsets = times[interval] - nodes
        self.wg = weights * g
        self.starts = np.flatnonzero(np.diff(np.concatenate([[-1], interval])))
        delta = times[:, None] - times[None, :]
        self.lower = (delta >= 0).astype(float)
        self.delta = np.where(delta >= 0, delta, 0.0)
        self.if_at_times = np.asarray(input_function(times), dtype=float)
        self._input_function = input_function

    def convolve(self, lam: np.ndarray, with_derivative: bool = True):
        lam = np.asarray(lam, dtype=float)
        local = np.exp(np.outer(lam, self.offsets)) * self.wg
        L = np.add.reduceat(local, self.starts, axis=1)
        prop = np.exp(lam[:, None, None] * self.delta) * self.lower
        E = np.einsum("nij,nj->ni", prop, L)
        if not with_derivative:
            return E, None
        Ld = np.add.reduceat(local * self.offsets, self.starts, axis=1)
        dE = np.einsum("nij,nj->ni", prop * self.delta, L) + np.einsum("nij,nj->ni", prop, Ld)
        return E, dE


class MeasurementModel:
    """Model-predicted tissue TAC and its parameter Jacobian on a fixed grid.

    Precomputes the quadrature for one (input function, time grid) pair so
    that repeated evaluations inside an iterative fit are cheap.
    """

    def __init__(self, model: ModelSpec, input_function: InputFunction, grid: TimeGrid, V_b: float = 0.0):
        if not (0.0 <= V_b <= 1.0):
            raise InvalidArgument(f"V_b must lie in [0, 1], got {V_b}")
        self.model = model
        self.input_function = input_function
        self.grid = grid
        self.V_b = float(V_b)
        self.times = grid.midpoints
        self._plan = _ConvolutionPlan(input_function, self.times)
        self.blood = self.V_b * self._plan.if_at_times

    @property
    def if_at_times(self) -> np.ndarray:
        return self._plan.if_at_times

    def compartments(self, k) -> np.ndarray:
        """Compartment concentrations, shape (n_compartments, T)."""
        C, _ = self._solve(_as_rates(self.model, k), with_sens=False)
        return C

    def predict(self, k) -> np.ndarray:
        return (1.0 - self.V_b) * self.compartments(k).sum(axis=0) + self.blood

    def jacobian(self, k) -> np.ndarray:
        return self.predict_and_jacobian(k)[1]

    def predict_and_jacobian(self, k) -> tuple[np.ndarray, np.ndarray]:
        """Predicted TAC (T,) and d(alpha^T C)/dk (T, p)."""
        C, S = self._solve(_as_rates(self.model, k), with_sens=True)
        scale = 1.0 - self.V_b
        return scale * C.sum(axis=0) + self.blood, scale * S

    def _solve(self, k: np.ndarray, with_sens: bool):
        out = self._modal(k, with_sens)
        if out is None:
            out = self._rk4(k, with_sens)
        return out

    def _modal(self, k, with_sens):
        M, w = build_system(self.model, k)
        lam, V = np.linalg.eig(M)
        scale = max(1.0, float(np.abs(lam).max()))
        if np.iscomplexobj(lam):
            if np.abs(lam.imag).max() > 1e-12 * scale:
                return None
            lam, V = lam.real, V.real
        if np.linalg.cond(V) > _EIG_COND_MAX:
            return None
        Vinv = np.linalg.inv(V)
        z = Vinv @ w
        E, dE = self._plan.convolve(lam, with_derivative=with_sens)
        C = V @ (z[:, None] * E)
        if not with_sens:
            return C, None

        dM, dw = _STRUCTURE[self.model]
        gap = lam[:, None] - lam[None, :]
        close = np.abs(gap) <= 1e-7 * scale
        safe_gap = np.where(close, 1.0, gap)
        # H[i, j, t] = int_0^t exp(lam_i (t - s)) E_j(s) ds
        H = np.where(
            close[:, :, None],
            0.5 * (dE[:, None, :] + dE[None, :, :]),
            (E[:, None, :] - E[None, :, :]) / safe_gap[:, :, None],
        )
        u = V.sum(axis=0)
        B = Vinv @ dM @ V
        coupling = u[None, :, None] * B * z[None, None, :]
        direct = (dw @ Vinv.T) * u[None, :]
        S = np.einsum("qij,ijt->tq", coupling, H) + np.einsum("qi,it->tq", direct, E)
        return C, S

    def _rk4(self, k, with_sens):
        """Fixed-step RK4 on the state (and sensitivity) ODEs; used when M is defective."""
        M, w = build_system(self.model, k)
        dM, dw = _STRUCTURE[self.model]
        n, p = self.model.n_compartments, self.model.n_params
        f_in = self.input_function

        def rhs(X, g):
            dX = M @ X
            dX[:, 0] += w * g
            if with_sens:
                dX[:, 1:] += np.einsum("qij,j->iq", dM, X[:, 0]) + dw.T * g
            return dX

        X = np.zeros((n, 1 + p if with_sens else 1))
        out_C = np.empty((n, self.times.size))
        out_S = np.empty((self.times.size, p)) if with_sens else None
        t_prev = 0.0
        for idx, t_next in enumerate(self.times):
            n_steps = max(1, int(math.ceil((t_next - t_prev) / _RK4_STEP_MIN - 1e-9)))
            h = (t_next - t_prev) / n_steps
            stage_t = t_prev + h * np.arange(2 * n_steps + 1) / 2.0
            g = f_in(stage_t)
            for s in range(n_steps):
                g0, g1, g2 = g[2 * s], g[2 * s + 1], g[2 * s + 2]
                k1 = rhs(X, g0)
                k2 = rhs(X + 0.5 * h * k1, g1)
                k3 = rhs(X + 0.5 * h * k2, g1)
                k4 = rhs(X + h * k3, g2)
                X = X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
            out_C[:, idx] = X[:, 0]
            if with_sens:
                out_S[idx] = X[:, 1:].sum(axis=0)
            t_prev = t_next
        return out_C, out_S


def solve_forward(model: ModelSpec, k, input_function: InputFunction, grid: TimeGrid) -> CompartmentCurves:
    """Compartment concentrations C(t_j) at the frame midpoints."""
    mm = MeasurementModel(model, input_function, grid, 0.0)
    return CompartmentCurves(model, mm.times, mm.compartments(k))


def tissue_measurement(curves: CompartmentCurves, input_function: InputFunction, V_b: float) -> np.ndarray:
    """C~(t) = (1 - V_b) sum_i C_i(t) + V_b IF(t) at the curve times."""
    if not (0.0 <= V_b <= 1.0):
        raise InvalidArgument(f"V_b must lie in [0, 1], got {V_b}")
    return (1.0 - V_b) * curves.C.sum(axis=0) + V_b * input_function(curves.times)


def sensitivities(model: ModelSpec, k, input_function: InputFunction, grid: TimeGrid, V_b: float) -> np.ndarray:
    """Jacobian (T, p) of alpha^T C(t_j) with respect to the rate constants."""
    return MeasurementModel(model, input_function, grid, V_b).jacobian(k)
