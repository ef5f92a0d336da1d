"""Numerical identifiability checks for the compartment models."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import DomainError, InvalidArgument
from .inversion import FitConfig, FitStatus, ParametricImages, fit_pixel
from .kinetics import InputFunction, MeasurementModel, ModelSpec, RateConstants, TimeGrid, _as_rates

__all__ = [
    "CoprimalityReport",
    "LocalIdentifiability",
    "MultistartReport",
    "TubuleDiagnostic",
    "renal_polynomials",
    "sylvester_matrix",
    "resultant",
    "check_coprimality",
    "local_identifiability",
    "multistart_uniqueness",
    "tubule_ratio",
]

COPRIME_TOL = 1e-10


def _trim(c) -> np.ndarray:
    c = np.atleast_1d(np.asarray(c, dtype=float))
    nz = np.flatnonzero(c)
    return c[nz[0]:] if nz.size else np.zeros(0)


def sylvester_matrix(p, q) -> np.ndarray:
    """Sylvester matrix of two polynomials given highest degree first."""
    p, q = _trim(p), _trim(q)
    if p.size == 0 or q.size == 0:
        raise InvalidArgument("Sylvester matrix of the zero polynomial is undefined")
    m, n = p.size - 1, q.size - 1
    S = np.zeros((m + n, m + n))
    for i in range(n):
        S[i, i:i + m + 1] = p
    for i in range(m):
        S[n + i, i:i + n + 1] = q
    return S


def resultant(p, q) -> float:
    """Res(p, q); zero when either polynomial vanishes identically."""
    p, q = _trim(p), _trim(q)
    if p.size == 0 or q.size == 0:
        return 0.0
    m, n = p.size - 1, q.size - 1
    if m + n == 0:
        return 1.0
    if m == 0:
        return float(p[0] ** n)
    if n == 0:
        return float(q[0] ** m)
    return float(np.linalg.det(sylvester_matrix(p, q)))


def renal_polynomials(k) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Coefficients (highest degree first) of P, Q and D for the renal model."""
    k_fa, k_ma, k_af, k_mf, k_fm, k_tm, _ = _as_rates(ModelSpec.THREE_RENAL, k)
    a = k_af + k_mf
    b = k_fm + k_tm
    P = np.array([k_ma, k_ma * a + k_fa * k_mf])
    Q = np.array([k_fa, k_fa * b + k_ma * k_fm])
    D = np.array([1.0, a + b, a * b - k_mf * k_fm])
    return P, Q, D


def _margin(p, d, res) -> float:
    p, d = _trim(p), _trim(d)
    if p.size == 0:
        return 0.0
    scale = np.linalg.norm(p) ** (d.size - 1) * np.linalg.norm(d) ** (p.size - 1)
    return abs(res) / scale


@dataclass(frozen=True)
class CoprimalityReport:
    resultant_PD: float
    resultant_QD: float
    margin_PD: float
    margin_QD: float
    tolerance: float = COPRIME_TOL

    @property
    def coprime(self) -> tuple[bool, bool]:
        return (bool(self.margin_PD > self.tolerance), bool(self.margin_QD > self.tolerance))

    @property
    def margin(self) -> float:
        return min(self.margin_PD, self.margin_QD)

    @property
    def ok(self) -> bool:
        return all(self.coprime)

    def to_dict(self) -> dict:
        return {
            "resultant_PD": self.resultant_PD,
            "resultant_QD": self.resultant_QD,
            "margin_PD": self.margin_PD,
            "margin_QD": self.margin_QD,
            "margin": self.margin,
            "coprime": list(self.coprime),
            "tolerance": self.tolerance,
        }


def check_coprimality(k, tolerance: float = COPRIME_TOL) -> CoprimalityReport:
    """Resultants of P and Q against D for a renal parameter vector.

    The decision uses |Res| / (|P|^deg D |D|^deg P), which is invariant to
    rescaling either polynomial.
    """
    if isinstance(k, RateConstants):
        if k.model is not ModelSpec.THREE_RENAL:
            raise InvalidArgument("coprimality conditions are defined for the renal model")
        k = k.k
    P, Q, D = renal_polynomials(k)
    r_pd, r_qd = resultant(P, D), resultant(Q, D)
    return CoprimalityReport(r_pd, r_qd, _margin(P, D, r_pd), _margin(Q, D, r_qd), tolerance)


@dataclass(frozen=True)
class LocalIdentifiability:
    rank: int
    condition_number: float
    smallest_singular_value: float
    singular_values: tuple[float, ...]
    n_params: int

    @property
    def identifiable(self) -> bool:
        return self.rank == self.n_params

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "n_params": self.n_params,
            "identifiable": self.identifiable,
            "condition_number": self.condition_number,
            "smallest_singular_value": self.smallest_singular_value,
            "singular_values": list(self.singular_values),
        }


def local_identifiability(model: ModelSpec, k, input_function: InputFunction, grid: TimeGrid,
                          V_b: float, rtol: float = 1e-8) -> LocalIdentifiability:
    """Numerical rank of the T x p sensitivity matrix at ``k``.

    Singular values below ``rtol`` times the largest one count as zero.
    """
    k = k.k if isinstance(k, RateConstants) else k
    S = MeasurementModel(model, input_function, grid, V_b).jacobian(k)
    sv = np.linalg.svd(S, compute_uv=False)
    full = np.zeros(model.n_params)
    full[:sv.size] = sv
    top = full[0]
    rank = int(np.count_nonzero(full > rtol * top)) if top > 0 else 0
    smallest = float(full[-1])
    cond = float(top / smallest) if smallest > 0 else float("inf")
    return LocalIdentifiability(rank, cond, smallest, tuple(float(x) for x in full), model.n_params)


def _rel_dist(a: np.ndarray, ref: np.ndarray) -> float:
    scale = np.where(ref != 0, np.abs(ref), 1.0)
    return float(np.max(np.abs(a - ref) / scale))


@dataclass
class MultistartReport:
    k_true: np.ndarray
    tol: float
    estimates: list[np.ndarray]
    statuses: list[FitStatus]
    residuals: list[float]
    clusters: list[tuple[np.ndarray, int]] = field(default_factory=list)
    coprimality: CoprimalityReport | None = None

    @property
    def n_starts(self) -> int:
        return len(self.estimates)

    @property
    def converged(self) -> list[int]:
        return [i for i, s in enumerate(self.statuses) if s == FitStatus.CONVERGED]

    @property
    def at_truth(self) -> list[int]:
        return [i for i in self.converged if _rel_dist(self.estimates[i], self.k_true) <= self.tol]

    @property
    def fraction_at_truth(self) -> float:
        return len(self.at_truth) / self.n_starts if self.n_starts else 0.0

    @property
    def fraction_of_converged_at_truth(self) -> float:
        c = self.converged
        return len(self.at_truth) / len(c) if c else 0.0

    @property
    def single_cluster_at_truth(self) -> bool:
        return len(self.clusters) == 1 and _rel_dist(self.clusters[0][0], self.k_true) <= self.tol

    def to_dict(self) -> dict:
        return {
            "k_true": self.k_true.tolist(),
            "tol": self.tol,
            "n_starts": self.n_starts,
            "n_converged": len(self.converged),
            "fraction_at_truth": self.fraction_at_truth,
            "fraction_of_converged_at_truth": self.fraction_of_converged_at_truth,
            "single_cluster_at_truth": self.single_cluster_at_truth,
            "clusters": [{"center": c.tolist(), "count": n} for c, n in self.clusters],
            "estimates": [e.tolist() for e in self.estimates],
            "statuses": [s.name for s in self.statuses],
            "residuals": self.residuals,
            "coprimality": None if self.coprimality is None else self.coprimality.to_dict(),
        }


def _cluster(points: list[np.ndarray], tol: float) -> list[tuple[np.ndarray, int]]:
    # greedy: join the first cluster whose founding point is within tol
    clusters: list[list] = []
    for x in points:
        for c in clusters:
            if _rel_dist(x, c[0]) <= tol:
                c[1].append(x)
                break
        else:
            clusters.append([x, [x]])
    return [(np.mean(members, axis=0), len(members)) for _, members in clusters]


def multistart_uniqueness(
    model: ModelSpec,
    k_true,
    input_function: InputFunction,
    grid: TimeGrid,
    V_b: float,
    n_starts: int = 20,
    tol: float = 1e-2,
    config: FitConfig | None = None,
    seed: int = 0,
    fixed: Mapping[str, float] | None = None,
) -> MultistartReport:
    """Fit a noiseless TAC from random starts and cluster the converged limits.

    For the renal model the coprimality conditions are checked first.
    ``fixed`` names parameters held at their true values during the fits.

    Raises:
        InvalidArgument: the renal ground truth fails the coprimality test.
    """
    k_true = _as_rates(model, k_true.k if isinstance(k_true, RateConstants) else k_true)
    if n_starts < 1:
        raise InvalidArgument("n_starts must be >= 1")
    if not tol >= 0:
        raise InvalidArgument("tol must be >= 0")
    copr = None
    if model is ModelSpec.THREE_RENAL:
        copr = check_coprimality(k_true)
        if not copr.ok:
            raise InvalidArgument(f"ground truth is not coprime (margin {copr.margin:.3e})")
    config = config or FitConfig.noiseless()
    if fixed is not None:
        names = model.param_names
        config = replace(config, fixed={n: float(k_true[names.index(n)]) for n in fixed})
    mm = MeasurementModel(model, input_function, grid, V_b)
    tac = mm.predict(k_true)
    estimates, statuses, residuals = [], [], []
    for i in range(n_starts):
        res = fit_pixel(tac, input_function, grid, V_b, model, config,
                        rng=np.random.default_rng([seed, i]), measurement=mm)
        estimates.append(res.k_hat.k.copy())
        statuses.append(res.status)
        residuals.append(res.relative_residual)
    report = MultistartReport(k_true, float(tol), estimates, statuses, residuals, coprimality=copr)
    report.clusters = _cluster([estimates[i] for i in report.converged], float(tol))
    return report


@dataclass(frozen=True)
class TubuleDiagnostic:
    gamma_expected: float
    ratio: np.ndarray
    valid: np.ndarray
    median: float
    q25: float
    q75: float

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @property
    def median_relative_deviation(self) -> float:
        return abs(self.median - self.gamma_expected) / self.gamma_expected

    def to_dict(self) -> dict:
        return {
            "gamma_expected": self.gamma_expected,
            "n_valid": self.n_valid,
            "median": self.median,
            "q25": self.q25,
            "q75": self.q75,
            "median_relative_deviation": self.median_relative_deviation,
        }


def tubule_ratio(maps, floor: float = 1e-6, gamma_expected: float = 1e2,
                 mask: np.ndarray | None = None) -> TubuleDiagnostic:
    """Pixelwise k_tm / k_ut where k_ut exceeds ``floor``.

    ``maps`` is a ParametricImages or a mapping with "k_tm" and "k_ut"
    arrays.  For ParametricImages only renal-model pixels are used.

    Raises:
        DomainError: no pixel passes the floor.
    """
    if isinstance(maps, ParametricImages):
        if "k_tm" not in maps.maps:
            raise InvalidArgument("parametric images carry no renal parameters")
        k_tm, k_ut = maps.maps["k_tm"], maps.maps["k_ut"]
        renal = np.vectorize(lambda m: m is ModelSpec.THREE_RENAL, otypes=[bool])(maps.model_map)
    else:
        k_tm, k_ut = np.asarray(maps["k_tm"], dtype=float), np.asarray(maps["k_ut"], dtype=float)
        renal = np.ones(k_tm.shape, dtype=bool)
    if k_tm.shape != k_ut.shape:
        raise InvalidArgument("k_tm and k_ut maps differ in shape")
    valid = renal & (k_ut > floor)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise DomainError("no valid pixels")
    ratio = np.full(k_tm.shape, np.nan)
    ratio[valid] = k_tm[valid] / k_ut[valid]
    q25, med, q75 = np.percentile(ratio[valid], [25, 50, 75])
    return TubuleDiagnostic(float(gamma_expected), ratio, valid, float(med), float(q25), float(q75))
