"""kevs: kernel-density-estimation VAT segmentation for CT volumes.

Given a CT scan and an upstream multi-label body segmentation, the pipeline
models the patient-specific fat intensity distribution from the subcutaneous
fat at the L3 level and uses it to carve visceral fat out of the organ-free
abdominal cavity. The package also ships HU-thresholding baselines, surface
and overlap metrics, a paired one-sided rank test, and deterministic
synthetic phantoms for end-to-end verification.
"""

__version__ = "0.1.0"

from .density import DensityModel, SampleSet, eval_pd, fit_gkde, pd_rank_and_cut, scott_bandwidth
from .errors import KevsError, NiftiFormatError, ValidationError
from .grids import (
    CANONICAL_SPACING,
    BinaryMask,
    DistanceField,
    GridGeometry,
    LabelMap,
    LabelSchema,
    ScalarVolume,
    SliceMask,
    with_z_axis,
)
from .metrics import (
    MetricConfig,
    MetricsReport,
    compute_report,
    dice,
    nsd,
    organ_overlap_fraction,
    organ_ring_dice,
    per_slice_metrics,
    precision_recall,
)
from .nifti import read_nifti, write_nifti
from .phantom import PhantomSpec, generate_phantom, phantom_layout, phantom_schema, phantom_suite
from .pipeline import (
    PipelineConfig,
    VatResult,
    kevs_segment,
    organ_free_cavity,
    resample_to_canonical,
    sat_l3_samples,
    threshold_on_organ_free_cavity,
    threshold_segment,
)
from .resample import resample_nearest, resample_trilinear
from .stats import WilcoxonResult, wilcoxon_one_sided

__all__ = [
    "__version__",
    "BinaryMask", "CANONICAL_SPACING", "DensityModel", "DistanceField",
    "GridGeometry", "KevsError", "LabelMap", "LabelSchema", "MetricConfig",
    "MetricsReport", "NiftiFormatError", "PhantomSpec", "PipelineConfig",
    "SampleSet", "ScalarVolume", "SliceMask", "ValidationError", "VatResult",
    "WilcoxonResult", "compute_report", "dice", "eval_pd", "fit_gkde",
    "generate_phantom", "kevs_segment", "nsd", "organ_free_cavity",
    "phantom_schema",
    "organ_overlap_fraction", "organ_ring_dice", "pd_rank_and_cut",
    "per_slice_metrics", "phantom_layout", "phantom_suite", "precision_recall",
    "read_nifti", "resample_nearest", "resample_to_canonical",
    "resample_trilinear", "sat_l3_samples", "scott_bandwidth",
    "threshold_on_organ_free_cavity", "threshold_segment", "wilcoxon_one_sided",
    "with_z_axis", "write_nifti",
]
