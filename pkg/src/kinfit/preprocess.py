"""Frame smoothing and automatic ROI segmentation of dynamic PET slices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument, SegmentationError
from .kinetics import TimeGrid

__all__ = [
    "DynamicImage",
    "RoiMask",
    "gaussian_kernel",
    "smooth_frames",
    "time_average",
    "segment_roi",
    "fit_row_gaussian",
]


@dataclass(eq=False)
class DynamicImage:
    """I x J x T stack of concentrations (kBq/ml) with its frame schedule."""

    voxels: np.ndarray
    grid: TimeGrid | None = None

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) == 0:
            raise InvalidArgument(f"dynamic image must be I x J x T with positive dims, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("dynamic image contains non-finite values")
        if self.grid is not None and len(self.grid) != v.shape[2]:
            raise InvalidArgument(f"{v.shape[2]} frames but the grid has {len(self.grid)}")
        self.voxels = v

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def frame(self, t: int) -> np.ndarray:
        return self.voxels[:, :, t]


@dataclass(eq=False)
class RoiMask:
    mask: np.ndarray
    threshold: float
    seed: tuple[int, int]
    sigma: float
    separation_column: int
    tied_maximum: bool = False


def gaussian_kernel(sigma: float = 1.0, L: int = 3) -> np.ndarray:
    """Truncated L x L Gaussian window, normalized to unit sum."""
    if int(L) != L or L < 1 or L % 2 == 0:
        raise InvalidArgument(f"window size must be a positive odd integer, got {L}")
    if not sigma > 0:
        raise InvalidArgument("sigma must be positive")
    half = (L - 1) // 2
    x = np.arange(-half, half + 1, dtype=float)
    g = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2.0 * sigma**2)) / (2.0 * math.pi * sigma**2)
    return g / g.sum()


def smooth_frames(dyn: DynamicImage, kernel: np.ndarray | None = None) -> DynamicImage:
    """Convolve every frame with ``kernel`` (default sigma = 1, 3 x 3).

    Outside the image counts as zero; at the border the result is divided
    by the kernel mass that falls inside the image, so constant frames are
    preserved everywhere.
    """
    kernel = gaussian_kernel() if kernel is None else np.asarray(kernel, dtype=float)
    if kernel.ndim != 2 or kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
        raise InvalidArgument("kernel must be 2-D with odd dimensions")
    I, J, _ = dyn.shape
    # kernels here are symmetric, but flip so this is a true convolution for any kernel
    k = kernel[::-1, ::-1]
    mass = ndimage.correlate(np.ones((I, J)), k, mode="constant", cval=0.0)
    out = np.empty(dyn.shape, dtype=float)
    for t in range(dyn.shape[2]):
        out[:, :, t] = ndimage.correlate(dyn.voxels[:, :, t].astype(float), k, mode="constant", cval=0.0)
    out /= mass[:, :, None]
    return DynamicImage(out, dyn.grid)


def time_average(dyn: DynamicImage) -> np.ndarray:
    return dyn.voxels.mean(axis=2)


def _golden_section(f, lo, hi, tol=1e-6, max_iter=200):
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol * max(1.0, abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    candidates = [(f(lo), lo), (fc, c), (fd, d), (f(hi), hi)]
    return min(candidates)[1]


def fit_row_gaussian(row: np.ndarray, centre: int, sigma_bounds: tuple[float, float] | None = None) -> float:
    """Least-squares width of a Gaussian pinned to ``row[centre]`` at ``centre``."""
    row = np.asarray(row, dtype=float)
    j = np.arange(row.size, dtype=float)
    peak = row[centre]
    lo, hi = sigma_bounds or (0.5, float(max(row.size, 1)))

    def cost(sigma):
        g = peak * np.exp(-((j - centre) ** 2) / (2.0 * sigma**2))
        return float(np.sum((row - g) ** 2))

    # coarse scan picks the basin, golden section refines inside it
    scan = np.linspace(lo, hi, 100)
    costs = [cost(s) for s in scan]
    b = int(np.argmin(costs))
    a_lo, a_hi = scan[max(b - 1, 0)], scan[min(b + 1, scan.size - 1)]
    refined = _golden_section(cost, a_lo, a_hi)
    return refined if cost(refined) <= costs[b] else float(scan[b])


def segment_roi(avg: np.ndarray, gamma_window: int = 10) -> RoiMask:
    """Superlevel-set ROI around the brightest pixel of a time-averaged image.

    A Gaussian centred on the brightest pixel is fitted along its row; the
    threshold is the row value where row and fit differ most within
    ``gamma_window`` pixels of the centre.
    """
    avg = np.asarray(avg, dtype=float)
    if avg.ndim != 2:
        raise InvalidArgument("segmentation expects a 2-D image")
    if gamma_window < 1:
        raise InvalidArgument("gamma_window must be >= 1")
    top = avg.max()
    if not np.isfinite(top) or top == avg.min():
        raise SegmentationError("degenerate segmentation input")
    flat = int(np.argmax(avg))  # first hit in row-major order = lexicographic minimum
    i_bar, j_bar = divmod(flat, avg.shape[1])
    tied = int(np.count_nonzero(avg == top)) > 1

    row = avg[i_bar]
    sigma = fit_row_gaussian(row, j_bar)
    cols = np.arange(row.size)
    fit = row[j_bar] * np.exp(-((cols - j_bar) ** 2) / (2.0 * sigma**2))
    window = (cols > j_bar - gamma_window) & (cols < j_bar + gamma_window)
    dev = np.where(window, np.abs(row - fit), -np.inf)
    j_star = int(np.argmax(dev))
    c_bar = float(row[j_star])
    return RoiMask(avg >= c_bar, c_bar, (i_bar, j_bar), float(sigma), j_star, tied)
