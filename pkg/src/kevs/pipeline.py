"""The VAT segmentation procedure end-to-end, plus HU-thresholding baselines.

The method: take the upstream multi-label body segmentation, erode the SAT
slice at the median-z level of the L3 vertebra down to a fifth of its area,
fit a Gaussian KDE to the surviving HU values, score every voxel of the
organ-free abdominal cavity by its probability density under that KDE, and
drop the worst-scoring 15%. What remains is the VAT prediction. Because the
candidates exclude organ voxels by construction, the prediction can never
land inside an organ.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .density import (
    DEFAULT_GRID_SIZE,
    DensityModel,
    SampleSet,
    eval_pd,
    fit_gkde,
    pd_rank_and_cut,
)
from .errors import ValidationError
from .grids import (
    CANONICAL_SPACING,
    MANDATORY_PIPELINE_ROLES,
    BinaryMask,
    LabelMap,
    ScalarVolume,
    linear_indices,
    mask_from_linear,
    values_at,
)
from .maskops import (
    ErosionResult,
    crop_to_z,
    erode_to_fraction,
    extract_role,
    mask_subtract,
    mask_union,
    median_z,
    take_slice,
    z_extent,
)
from .resample import resample_nearest, resample_trilinear

DEFAULT_THRESHOLD_RANGES = (
    (-190.0, -30.0),
    (-195.0, -45.0),
    (-200.0, -10.0),
    (-200.0, -20.0),
    (-250.0, -50.0),
)

BOUNDS_FULL = "full_cavity"
BOUNDS_VERTEBRAL = "vertebral_bounds"


@dataclass(frozen=True)
class PipelineConfig:
    reject_fraction: float = 0.15
    erosion_fraction: float = 0.20
    kde_grid_size: int = DEFAULT_GRID_SIZE
    canonical_spacing: tuple[float, float, float] = CANONICAL_SPACING
    organ_roles: tuple[str, ...] | None = None  # None = every organ:* role in the schema
    threshold_ranges: tuple[tuple[float, float], ...] = DEFAULT_THRESHOLD_RANGES
    bounds_mode: str = BOUNDS_FULL
    erosion_connectivity: int = 1
    bandwidth_mode: str = "scott"
    threads: int = 1

    def __post_init__(self):
        if not 0.0 <= self.reject_fraction < 1.0:
            raise ValidationError(
                f"reject fraction must be in [0, 1), got {self.reject_fraction}"
            )
        if not 0.0 < self.erosion_fraction <= 1.0:
            raise ValidationError(
                f"erosion fraction must be in (0, 1], got {self.erosion_fraction}"
            )
        if self.kde_grid_size < 2:
            raise ValidationError(f"KDE grid size must be >= 2, got {self.kde_grid_size}")
        spacing = tuple(float(s) for s in self.canonical_spacing)
        if any(not math.isfinite(s) or s <= 0 for s in spacing):
            raise ValidationError(f"canonical spacing must be positive, got {spacing}")
        object.__setattr__(self, "canonical_spacing", spacing)
        ranges = tuple((float(lo), float(hi)) for lo, hi in self.threshold_ranges)
        if any(lo >= hi for lo, hi in ranges):
            raise ValidationError(f"threshold ranges need lo < hi, got {ranges}")
        object.__setattr__(self, "threshold_ranges", ranges)
        if self.bounds_mode not in (BOUNDS_FULL, BOUNDS_VERTEBRAL):
            raise ValidationError(f"unknown bounds mode {self.bounds_mode!r}")
        if self.threads < 1:
            raise ValidationError(f"thread count must be >= 1, got {self.threads}")
        if self.organ_roles is not None:
            object.__setattr__(self, "organ_roles", tuple(self.organ_roles))


@dataclass(frozen=True)
class VatResult:
    vat_mask: BinaryMask
    kde: DensityModel
    degenerate_erosion: bool
    candidate_count: int  # m, organ-free cavity voxels scored
    removed_count: int  # k = floor(reject_fraction * m)
    timings_s: dict = field(default_factory=dict)
    warnings: tuple[str, ...] = ()


def resample_to_canonical(
    v: ScalarVolume, l: LabelMap, cfg: PipelineConfig
) -> tuple[ScalarVolume, LabelMap]:
    """Bring volume (trilinear) and labels (nearest) onto the canonical grid."""
    target = cfg.canonical_spacing
    v_out = v if v.geometry.spacing == target else resample_trilinear(v, target)
    l_out = l if l.geometry.spacing == target else resample_nearest(l, target)
    return v_out, l_out


def _resolve_organ_roles(l: LabelMap, cfg: PipelineConfig) -> tuple[str, ...]:
    if cfg.organ_roles is None:
        return l.schema.organ_roles
    for role in cfg.organ_roles:
        if role not in l.schema:
            raise ValidationError(f"configured organ role {role!r} not in schema")
    return cfg.organ_roles


def organ_free_cavity(l: LabelMap, cfg: PipelineConfig = PipelineConfig()) -> BinaryMask:
    """Abdominal cavity mask with all configured organ masks removed."""
    cavity = extract_role(l, "abdominal_cavity")
    roles = _resolve_organ_roles(l, cfg)
    if not roles:
        return cavity
    organs = mask_union([extract_role(l, role) for role in roles])
    return mask_subtract(cavity, organs)


def sat_l3_samples(
    v: ScalarVolume, l: LabelMap, cfg: PipelineConfig = PipelineConfig()
) -> tuple[SampleSet, ErosionResult]:
    """HU samples of the eroded SAT slice at the median-z L3 level."""
    if v.geometry != l.geometry:
        raise ValidationError("volume and label map geometries differ")
    l3 = extract_role(l, "vertebra_L3")
    if l3.empty:
        raise ValidationError("vertebra_L3 mask is empty; cannot locate the L3 level")
    z_star = median_z(l3)
    sat = extract_role(l, "sat")
    sat_slice = take_slice(sat, z_star)
    if sat_slice.empty:
        raise ValidationError(f"empty SAT slice at L3 level z={z_star}")
    eroded = erode_to_fraction(sat_slice, cfg.erosion_fraction, cfg.erosion_connectivity)
    values = v.data[:, :, z_star][eroded.mask.bits].astype(np.float64)
    return SampleSet(values), eroded


def _eval_pd_threaded(model: DensityModel, values: np.ndarray, threads: int) -> np.ndarray:
    if threads <= 1 or values.size < 4 * threads:
        return eval_pd(model, values)
    chunks = np.array_split(values, threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda c: eval_pd(model, c), chunks))
    return np.concatenate(parts)


def kevs_segment(
    v: ScalarVolume, l: LabelMap, cfg: PipelineConfig = PipelineConfig()
) -> VatResult:
    """Run the full KDE-based VAT segmentation on a co-registered volume/labels pair."""
    if v.geometry != l.geometry:
        raise ValidationError(
            "volume and label map geometries differ (resample both to the "
            "canonical spacing first)"
        )
    missing = [r for r in MANDATORY_PIPELINE_ROLES if r not in l.schema]
    if missing:
        raise ValidationError(f"schema lacks mandatory pipeline roles: {missing}")
    timings: dict[str, float] = {}
    warnings: list[str] = []

    t0 = time.perf_counter()
    samples, erosion = sat_l3_samples(v, l, cfg)
    if erosion.degenerate:
        warnings.append(
            "SAT rim too thin to erode to the target fraction; using the last "
            f"nonempty iterate ({erosion.mask.area} px)"
        )
    timings["sat_samples"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    kde = fit_gkde(samples, cfg.kde_grid_size, bandwidth_mode=cfg.bandwidth_mode)
    timings["kde_fit"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cavity = organ_free_cavity(l, cfg)
    if cavity.empty:
        raise ValidationError("organ-free abdominal cavity is empty")
    lin_idx = linear_indices(cavity.bits)
    intensities = values_at(v.data, lin_idx).astype(np.float64)
    timings["candidates"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    pds = _eval_pd_threaded(kde, intensities, cfg.threads)
    timings["pd_scoring"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    kept = pd_rank_and_cut(lin_idx, pds, intensities, cfg.reject_fraction,
                           sample_mean=float(samples.values.mean()))
    vat = mask_from_linear(v.geometry, kept)
    timings["rank_and_cut"] = time.perf_counter() - t0

    m = int(lin_idx.size)
    k = m - int(kept.size)

    if cfg.bounds_mode == BOUNDS_VERTEBRAL:
        t0 = time.perf_counter()
        lumbar = [extract_role(l, role) for role in l.schema.lumbar_roles]
        if not lumbar:
            raise ValidationError("vertebral bounds requested but no lumbar roles in schema")
        z_lo, z_hi = z_extent(lumbar)
        vat = crop_to_z(vat, z_lo, z_hi)
        timings["vertebral_crop"] = time.perf_counter() - t0

    return VatResult(
        vat_mask=vat,
        kde=kde,
        degenerate_erosion=erosion.degenerate,
        candidate_count=m,
        removed_count=k,
        timings_s=timings,
        warnings=tuple(warnings),
    )


def threshold_segment(
    v: ScalarVolume, region: BinaryMask, hu_range: tuple[float, float]
) -> BinaryMask:
    """Voxels of ``region`` whose HU lies within the inclusive range."""
    if v.geometry != region.geometry:
        raise ValidationError("volume and region geometries differ")
    lo, hi = float(hu_range[0]), float(hu_range[1])
    if lo >= hi:
        raise ValidationError(f"threshold range needs lo < hi, got ({lo}, {hi})")
    bits = region.bits & (v.data >= lo) & (v.data <= hi)
    return BinaryMask(v.geometry, bits)


def threshold_on_organ_free_cavity(
    v: ScalarVolume,
    l: LabelMap,
    hu_range: tuple[float, float],
    cfg: PipelineConfig = PipelineConfig(),
) -> BinaryMask:
    """Thresholding baseline restricted to the organ-free cavity."""
    if v.geometry != l.geometry:
        raise ValidationError("volume and label map geometries differ")
    return threshold_segment(v, organ_free_cavity(l, cfg), hu_range)


def lumbar_bounds(l: LabelMap) -> tuple[int, int]:
    """z-extent of the union of the lumbar vertebra masks present in the schema."""
    roles = l.schema.lumbar_roles
    if not roles:
        raise ValidationError("no lumbar vertebra roles in schema")
    return z_extent([extract_role(l, role) for role in roles])
