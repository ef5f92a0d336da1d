"""Synthetic dynamic PET acquisitions: phantom, forward stacks, Radon, noise, FBP."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import least_squares
from skimage.transform import iradon, radon

from .errors import FitError, FormatError, InvalidArgument
from .kinetics import (
    GammaVariateParams,
    InputFunction,
    MeasurementModel,
    ModelSpec,
    RateConstants,
    TimeGrid,
)
from .preprocess import DynamicImage

__all__ = [
    "DEFAULT_SCHEDULE_S",
    "GROUND_TRUTH",
    "DEFAULT_GAMMA",
    "Region",
    "Phantom",
    "NoiseConfig",
    "SinogramGeometry",
    "default_frame_schedule",
    "default_phantom",
    "default_input_function",
    "gamma_variate",
    "fit_gamma_variate",
    "synthesize_dynamic",
    "radon_project",
    "apply_noise",
    "fbp_reconstruct",
    "resolve_count_scale",
    "simulate_acquisition",
]

# (count, seconds) blocks of the acquisition protocol, 27 frames in total
DEFAULT_SCHEDULE_S = ((10, 15.0), (1, 22.0), (4, 30.0), (5, 60.0), (2, 150.0), (5, 300.0))

# ground truth per region: (k_fb, k_bf, k_mf, k_fm), V_b
GROUND_TRUTH = {
    1: ((0.8, 0.6, 0.07, 0.07), 0.1),
    2: ((1.0, 1.0, 0.2, 0.2), 0.2),
    3: ((1.1, 0.9, 0.5, 0.4), 0.05),
    4: ((0.5, 0.5, 0.1, 0.01), 0.3),
}

DEFAULT_GAMMA = GammaVariateParams(A=100.0, t0=0.2, alpha=3.0, beta=0.5)


def default_frame_schedule() -> TimeGrid:
    durations = [d for n, d in DEFAULT_SCHEDULE_S for _ in range(n)]
    return TimeGrid.from_durations(durations)


def default_input_function() -> InputFunction:
    return InputFunction.from_gamma(DEFAULT_GAMMA)


def gamma_variate(t, params: GammaVariateParams) -> np.ndarray:
    return params(t)


def fit_gamma_variate(times, values, max_nfev: int = 2000) -> GammaVariateParams:
    """Least-squares gamma variate through blood samples.

    Several shape starts are tried; the best converged one wins.

    Raises:
        FitError: no start converged. ``k`` carries the best (A, t0, alpha, beta).
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if t.ndim != 1 or t.shape != y.shape:
        raise InvalidArgument("times and values must be 1-D of equal length")
    if t.size < 5:
        raise InvalidArgument("at least 5 samples are needed to fit a gamma variate")
    if np.any(y < 0) or not np.all(np.isfinite(y)) or not np.all(np.isfinite(t)):
        raise InvalidArgument("samples must be finite and non-negative")
    if np.any(np.diff(t) <= 0):
        raise InvalidArgument("sample times must be strictly increasing")
    if not np.any(y > 0):
        raise InvalidArgument("all samples are zero")

    i_peak = int(np.argmax(y))
    t_peak, y_peak = t[i_peak], y[i_peak]
    nz = np.flatnonzero(y > 0)
    t0_guess = t[nz[0] - 1] if nz[0] > 0 else t[0] - 0.1 * max(t_peak - t[0], 1e-3)
    span = t[-1] - t[0]

    def resid(p):
        A, t0, a, b = p
        u = np.maximum(t - t0, 0.0) / b
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            g = np.where(t > t0, A * np.exp(a * np.log(u) - u), 0.0)
        return g - y

    best = None
    for a0 in (1.0, 2.0, 3.0, 5.0, 8.0):
        b0 = max(t_peak - t0_guess, 1e-3) / a0
        A0 = y_peak / (a0**a0 * math.exp(-a0))
        p0 = np.array([A0, t0_guess, a0, b0])
        lo = [1e-12, t[0] - span, 1e-3, 1e-6]
        hi = [np.inf, t_peak, 1e3, 10 * span + 1.0]
        try:
            sol = least_squares(resid, p0, bounds=(lo, hi), x_scale="jac", xtol=1e-15, ftol=1e-15,
                                gtol=1e-15, max_nfev=max_nfev)
        except ValueError:
            continue
        if best is None or sol.cost < best.cost:
            best = sol
    if best is None or best.status <= 0:
        raise FitError("gamma-variate fit did not converge", k=None if best is None else best.x)
    return GammaVariateParams(*map(float, best.x))


# --- phantom -------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    k: RateConstants
    V_b: float

    def __post_init__(self):
        if not 0.0 <= self.V_b <= 1.0:
            raise InvalidArgument(f"V_b must lie in [0, 1], got {self.V_b}")


@dataclass(eq=False)
class Phantom:
    """Label raster (0 = background) with kinetics per nonzero label."""

    labels: np.ndarray
    regions: dict[int, Region]
    model: ModelSpec = ModelSpec.TWO_CATENARY

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or min(lab.shape) == 0:
            raise InvalidArgument("phantom labels must be a non-empty 2-D array")
        if not np.issubdtype(lab.dtype, np.integer):
            if not np.all(lab == np.round(lab)):
                raise InvalidArgument("phantom labels must be integers")
            lab = lab.astype(np.int64)
        self.labels = lab
        for label in np.unique(lab):
            if label != 0 and int(label) not in self.regions:
                raise InvalidArgument(f"label {int(label)} has no region parameters")
        for label, region in self.regions.items():
            if region.k.model is not self.model:
                raise InvalidArgument(f"region {label} uses {region.k.model}, phantom is {self.model}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def region_labels(self) -> list[int]:
        return sorted(int(x) for x in np.unique(self.labels) if x != 0)

    def to_dict(self) -> dict:
        return {
            "model": self.model.key,
            "shape": list(self.shape),
            "labels": self.labels.tolist(),
            "regions": {
                str(label): {"k": r.k.as_dict(), "V_b": r.V_b} for label, r in sorted(self.regions.items())
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Phantom":
        try:
            model = ModelSpec.from_name(d.get("model", "two_catenary"))
            if "labels" in d:
                labels = np.asarray(d["labels"])
            else:
                labels = _rasterize(tuple(d["shape"]), d.get("shapes", []))
            raw = d.get("regions", {})
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed phantom definition: {exc}") from exc
        regions = {}
        for key, spec in raw.items():
            label = int(key)
            try:
                k = spec["k"]
                rates = RateConstants.from_mapping(model, k) if isinstance(k, dict) else RateConstants(model, k)
                regions[label] = Region(rates, float(spec.get("V_b", 0.0)))
            except (KeyError, TypeError, InvalidArgument) as exc:
                raise FormatError(f"region {label}: {exc}") from exc
        try:
            return cls(labels, regions, model)
        except InvalidArgument as exc:
            raise FormatError(str(exc)) from exc

    @classmethod
    def from_json(cls, text: str) -> "Phantom":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"phantom JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
        if not isinstance(d, dict):
            raise FormatError("phantom JSON must be an object")
        return cls.from_dict(d)


def _rasterize(shape: tuple[int, int], shapes: list[dict]) -> np.ndarray:
    I, J = shape
    labels = np.zeros((I, J), dtype=np.int64)
    ii, jj = np.mgrid[:I, :J]
    for s in shapes:
        kind = s.get("type", "ellipse")
        if kind == "ellipse":
            (ci, cj), (ri, rj) = s["center"], s["radii"]
            inside = ((ii - ci) / ri) ** 2 + ((jj - cj) / rj) ** 2 <= 1.0
        elif kind == "rect":
            (i0, j0), (h, w) = s["top_left"], s["size"]
            inside = (ii >= i0) & (ii < i0 + h) & (jj >= j0) & (jj < j0 + w)
        else:
            raise FormatError(f"unknown shape type {kind!r}")
        labels[inside] = int(s["label"])
    return labels


def default_phantom(size: int = 64) -> Phantom:
    """Four disjoint ellipses, one per ground-truth region, on a square raster."""
    c = size / 64.0
    shapes = [
        {"label": 1, "center": [20 * c, 20 * c], "radii": [11 * c, 9 * c]},
        {"label": 2, "center": [20 * c, 44 * c], "radii": [9 * c, 11 * c]},
        {"label": 3, "center": [44 * c, 20 * c], "radii": [9 * c, 11 * c]},
        {"label": 4, "center": [44 * c, 44 * c], "radii": [11 * c, 9 * c]},
    ]
    labels = _rasterize((size, size), shapes)
    model = ModelSpec.TWO_CATENARY
    regions = {lab: Region(RateConstants(model, k), vb) for lab, (k, vb) in GROUND_TRUTH.items()}
    return Phantom(labels, regions, model)


def synthesize_dynamic(phantom: Phantom, input_function: InputFunction, grid: TimeGrid) -> DynamicImage:
    """Noise-free I x J x T stack: one TAC per region, broadcast to its pixels."""
    I, J = phantom.shape
    out = np.zeros((I, J, len(grid)))
    for label in phantom.region_labels():
        region = phantom.regions[label]
        tac = MeasurementModel(phantom.model, input_function, grid, region.V_b).predict(region.k.k)
        out[phantom.labels == label] = tac
    return DynamicImage(out, grid)


# --- tomography ----------------------------------------------------------

@dataclass(frozen=True)
class SinogramGeometry:
    """Parallel-beam geometry with unit detector spacing.

    ``n_detectors`` of None means the padded image diagonal.
    """

    n_angles: int = 180
    n_detectors: int | None = None
    detector_spacing: float = 1.0

    def __post_init__(self):
        if self.n_angles < 1:
            raise InvalidArgument("n_angles must be >= 1")
        if self.detector_spacing != 1.0:
            raise InvalidArgument("only unit detector spacing is supported")

    @property
    def angles_deg(self) -> np.ndarray:
        return np.arange(self.n_angles) * (180.0 / self.n_angles)

    def detectors_for(self, size: int) -> int:
        diag = int(math.ceil(math.sqrt(2.0) * size))
        if self.n_detectors is None:
            return diag
        if self.n_detectors < diag:
            raise InvalidArgument(f"{self.n_detectors} detectors cannot cover the image diagonal ({diag})")
        return int(self.n_detectors)

    def to_dict(self) -> dict:
        return {"n_angles": self.n_angles, "n_detectors": self.n_detectors,
                "detector_spacing": self.detector_spacing}


def _square(image: np.ndarray) -> np.ndarray:
    I, J = image.shape
    if I == J:
        return image
    n = max(I, J)
    out = np.zeros((n, n), dtype=image.dtype)
    i0, j0 = (n - I) // 2, (n - J) // 2
    out[i0:i0 + I, j0:j0 + J] = image
    return out


def radon_project(image, geom: SinogramGeometry = SinogramGeometry()) -> np.ndarray:
    """Line integrals of ``image``, shape (n_angles, n_detectors).

    The image rotation is bilinear; a centred impulse lands in bin
    ``n_detectors // 2`` at every angle.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise InvalidArgument("radon_project expects a 2-D image")
    sq = _square(image)
    sino = radon(sq, theta=geom.angles_deg, circle=False).T
    n_det = geom.detectors_for(sq.shape[0])
    extra = n_det - sino.shape[1]
    if extra:
        # keep the centre bin at n // 2
        left = n_det // 2 - sino.shape[1] // 2
        sino = np.pad(sino, ((0, 0), (left, extra - left)))
    return sino


def fbp_reconstruct(sinogram, size: int, geom: SinogramGeometry = SinogramGeometry()) -> np.ndarray:
    """Ramp x Hann filtered back projection onto a size x size grid, negatives clipped."""
    sino = np.asarray(sinogram, dtype=float)
    if sino.ndim != 2 or sino.shape[0] != geom.n_angles:
        raise InvalidArgument(f"sinogram must have {geom.n_angles} rows, got shape {sino.shape}")
    n_det = geom.detectors_for(size)
    if sino.shape[1] != n_det:
        raise InvalidArgument(f"sinogram has {sino.shape[1]} detectors, geometry expects {n_det}")
    native = int(math.ceil(math.sqrt(2.0) * size))
    if n_det != native:
        left = n_det // 2 - native // 2
        sino = sino[:, left:left + native]
    rec = iradon(sino.T, theta=geom.angles_deg, output_size=size, filter_name="hann", circle=False)
    return np.clip(rec, 0.0, None)


# --- noise ---------------------------------------------------------------

@dataclass(frozen=True)
class NoiseConfig:
    """Mixed Poisson-Gaussian sinogram noise.

    ``count_scale`` converts sinogram units to expected counts; None picks
    it so the brightest bin of the acquisition holds ``peak_counts``.
    """

    count_scale: float | None = None
    gaussian_snr_db: float = 20.0
    seed: int = 0
    peak_counts: float = 1e4
    enabled: bool = True

    def __post_init__(self):
        if self.count_scale is not None and not self.count_scale > 0:
            raise InvalidArgument("count_scale must be > 0")
        if not self.peak_counts > 0:
            raise InvalidArgument("peak_counts must be > 0")

    def to_dict(self) -> dict:
        return {"count_scale": self.count_scale, "gaussian_snr_db": self.gaussian_snr_db, "seed": self.seed,
                "peak_counts": self.peak_counts, "enabled": self.enabled}


def resolve_count_scale(cfg: NoiseConfig, peak: float) -> float:
    if cfg.count_scale is not None:
        return float(cfg.count_scale)
    return cfg.peak_counts / peak if peak > 0 else 1.0


def apply_noise(sinogram, cfg: NoiseConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Poisson counting noise, then Gaussian noise at ``gaussian_snr_db``.

    The Gaussian power is referenced to the mean squared noise-free value
    over the nonzero bins, so an all-zero sinogram stays zero.
    """
    s = np.asarray(sinogram, dtype=float)
    if np.any(s < 0):
        raise InvalidArgument("sinogram has negative entries")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    scale = resolve_count_scale(cfg, float(s.max(initial=0.0)))
    noisy = rng.poisson(scale * s) / scale
    support = s > 0
    power = float(np.mean(s[support] ** 2)) if support.any() else 0.0
    sigma = math.sqrt(power / 10.0 ** (cfg.gaussian_snr_db / 10.0))
    return noisy + rng.normal(0.0, sigma, size=s.shape)


def simulate_acquisition(
    phantom: Phantom,
    input_function: InputFunction,
    grid: TimeGrid,
    geom: SinogramGeometry = SinogramGeometry(),
    cfg: NoiseConfig | None = NoiseConfig(),
    n_realizations: int = 1,
    clean: DynamicImage | None = None,
) -> tuple[list[DynamicImage], dict]:
    """Frame-wise radon -> noise -> FBP for each realization.

    Realization r, frame t draws from ``default_rng([seed, r, t])``.  With
    ``cfg`` None (or disabled) a single noise-free round trip is returned.

    Returns:
        (stacks, metadata) where metadata records the resolved count scale.
    """
    if n_realizations < 0:
        raise InvalidArgument("n_realizations must be >= 0")
    clean = clean if clean is not None else synthesize_dynamic(phantom, input_function, grid)
    I, J, T = clean.shape
    size = max(I, J)
    sinos = [radon_project(clean.frame(t), geom) for t in range(T)]
    i0, j0 = (size - I) // 2, (size - J) // 2

    def recon(sino):
        return fbp_reconstruct(sino, size, geom)[i0:i0 + I, j0:j0 + J]

    noisy = cfg is not None and cfg.enabled
    meta = {"geometry": geom.to_dict(), "noise": None if cfg is None else cfg.to_dict()}
    if not noisy:
        vox = np.stack([recon(s) for s in sinos], axis=2)
        return [DynamicImage(vox, grid)], meta

    scale = resolve_count_scale(cfg, max(float(s.max(initial=0.0)) for s in sinos))
    meta["count_scale"] = scale
    fixed = NoiseConfig(scale, cfg.gaussian_snr_db, cfg.seed, cfg.peak_counts)
    stacks = []
    for r in range(n_realizations):
        vox = np.empty((I, J, T))
        for t, s in enumerate(sinos):
            rng = np.random.default_rng([cfg.seed, r, t])
            vox[:, :, t] = recon(apply_noise(s, fixed, rng))
        stacks.append(DynamicImage(vox, grid))
    return stacks, meta
