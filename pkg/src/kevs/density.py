"""Gaussian kernel density estimation over SAT intensity samples and
probability-density scoring of candidate voxel intensities.

The model is the classic univariate Gaussian KDE: for each of ``grid_size``
evenly spaced abscissae spanning the sample range, the density is the mean of
standard-normal kernels centred on the samples, scaled by the bandwidth.
Queries are answered by linear interpolation of that table, which keeps
scoring O(1) per voxel; intensities outside the sample range score 0, which
ranks them first for removal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

_SQRT_2PI = math.sqrt(2.0 * math.pi)

DEFAULT_GRID_SIZE = 1000


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Finite set of HU intensity samples (at least two values)."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64).ravel()
        if arr.size < 2:
            raise ValidationError(f"a sample set needs at least 2 values, got {arr.size}")
        if not np.isfinite(arr).all():
            raise ValidationError("sample set contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def n(self) -> int:
        return int(self.values.size)


def scott_bandwidth(n: int) -> float:
    """Scott's factor ``n ** (-1/5)`` for an ``n``-sample KDE.

    Perfect fifth powers take an exact reciprocal path so that e.g. 32 -> 0.5
    and 100000 -> 0.1 hold exactly in floating point.
    """
    if n < 2:
        raise ValidationError(f"bandwidth needs at least 2 samples, got {n}")
    root = round(n ** 0.2)
    if root >= 1 and root ** 5 == n:
        return 1.0 / root
    return float(n) ** -0.2


@dataclass(frozen=True, eq=False)
class DensityModel:
    """Fitted KDE: sample count, bandwidth, and the tabulated density curve."""

    n: int
    h: float
    grid: np.ndarray
    density: np.ndarray
    i_min: float
    i_max: float

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=np.float64)
        dens = np.asarray(self.density, dtype=np.float64)
        if self.h <= 0:
            raise ValidationError(f"bandwidth must be > 0, got {self.h}")
        if grid.ndim != 1 or grid.size < 2 or dens.shape != grid.shape:
            raise ValidationError("grid and density must be 1D arrays of equal length >= 2")
        if not np.all(np.diff(grid) > 0):
            raise ValidationError("density grid must be strictly increasing")
        if np.any(dens < 0):
            raise ValidationError("density values must be non-negative")
        grid.setflags(write=False)
        dens.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "density", dens)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "h": self.h,
            "i_min": self.i_min,
            "i_max": self.i_max,
            "grid": self.grid.tolist(),
            "density": self.density.tolist(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DensityModel":
        return cls(
            n=int(raw["n"]),
            h=float(raw["h"]),
            grid=np.asarray(raw["grid"], dtype=np.float64),
            density=np.asarray(raw["density"], dtype=np.float64),
            i_min=float(raw["i_min"]),
            i_max=float(raw["i_max"]),
        )


def fit_gkde(
    samples: SampleSet,
    grid_size: int = DEFAULT_GRID_SIZE,
    bandwidth: float | None = None,
    bandwidth_mode: str = "scott",
) -> DensityModel:
    """Fit a Gaussian KDE and tabulate it on ``grid_size`` points spanning the
    sample range.

    ``bandwidth`` overrides the rule-based bandwidth (test hook and sensitivity
    analyses). ``bandwidth_mode`` selects ``"scott"`` (``n**-0.2`` on raw HU)
    or ``"scott-sigma"`` (``std * n**-0.2``).
    """
    if grid_size < 2:
        raise ValidationError(f"grid size must be >= 2, got {grid_size}")
    x = samples.values
    i_min, i_max = float(x.min()), float(x.max())
    if i_max <= i_min:
        raise ValidationError("degenerate sample set: all intensity values identical")

    if bandwidth is not None:
        h = float(bandwidth)
        if h <= 0:
            raise ValidationError(f"bandwidth must be > 0, got {bandwidth}")
    elif bandwidth_mode == "scott":
        h = scott_bandwidth(samples.n)
    elif bandwidth_mode == "scott-sigma":
        h = float(np.std(x, ddof=1)) * scott_bandwidth(samples.n)
        if h <= 0:
            raise ValidationError("degenerate sample set: zero variance")
    else:
        raise ValidationError(f"unknown bandwidth mode {bandwidth_mode!r}")

    grid = np.linspace(i_min, i_max, grid_size)
    density = np.empty(grid_size, dtype=np.float64)
    norm = 1.0 / (samples.n * h * _SQRT_2PI)
    # chunk the grid so the (chunk x n) kernel matrix stays small
    chunk = max(1, (1 << 22) // max(1, samples.n))
    for start in range(0, grid_size, chunk):
        block = grid[start:start + chunk]
        t = (block[:, None] - x[None, :]) / h
        density[start:start + chunk] = np.exp(-0.5 * t * t).sum(axis=1) * norm

    return DensityModel(n=samples.n, h=h, grid=grid, density=density,
                        i_min=i_min, i_max=i_max)


def eval_pd(model: DensityModel, x):
    """Probability density at ``x`` by linear interpolation of the table.

    ``x`` may be a scalar or an array; values outside [i_min, i_max] score 0.
    """
    result = np.interp(x, model.grid, model.density, left=0.0, right=0.0)
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(result)
    return result


def pd_rank_and_cut(
    voxel_indices: np.ndarray,
    densities: np.ndarray,
    intensities: np.ndarray,
    reject_fraction: float,
    sample_mean: float | None = None,
) -> np.ndarray:
    """Remove the ``floor(reject_fraction * m)`` worst-scoring voxels.

    Removal order is ascending density, ties broken by descending distance of
    the intensity from the sample mean, then ascending voxel index; the order
    is a pure function of (density, intensity, index), so the kept set is
    invariant to input permutation. ``sample_mean`` is normally the mean of
    the KDE's training samples; if omitted, the mean of the candidate
    intensities stands in. Returns the kept voxel indices in ascending order.
    """
    if not 0.0 <= reject_fraction < 1.0:
        raise ValidationError(f"reject fraction must be in [0, 1), got {reject_fraction}")
    idx = np.asarray(voxel_indices, dtype=np.int64)
    pds = np.asarray(densities, dtype=np.float64)
    hus = np.asarray(intensities, dtype=np.float64)
    if idx.size == 0:
        raise ValidationError("pd_rank_and_cut on an empty candidate list")
    if not (idx.shape == pds.shape == hus.shape):
        raise ValidationError("voxel indices, densities, and intensities must align")
    if np.unique(idx).size != idx.size:
        raise ValidationError("voxel indices must be unique")

    m = idx.size
    k = math.floor(reject_fraction * m)
    if k == 0:
        return np.sort(idx)

    # canonicalise by voxel index first so the fallback mean (and thus the
    # tie-break key) does not depend on the caller's ordering
    canon = np.argsort(idx)
    idx, pds, hus = idx[canon], pds[canon], hus[canon]
    center = hus.mean() if sample_mean is None else float(sample_mean)
    dev = np.abs(hus - center)
    order = np.lexsort((idx, -dev, pds))
    return np.sort(idx[order[k:]])
