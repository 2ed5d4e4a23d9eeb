"""Deterministic synthetic CT phantoms with hidden ground-truth VAT.

Each phantom is an elliptical body cylinder: an outer subcutaneous fat ring,
an inner abdominal cavity, a posterior vertebral column split into five
lumbar bands, non-overlapping spherical organs, and overlapping spherical
fat blobs whose union (clipped to the organ-free cavity) is the hidden VAT
truth. The truth mask is returned separately and never written into the
label map.

Subcutaneous and visceral fat voxels draw from the same HU distribution;
that shared distribution is exactly what density-based segmentation exploits.
All randomness comes from a counter-based hash keyed by (seed, stream, voxel
or draw index), so output is bit-reproducible and independent of evaluation
order or thread count.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .errors import ValidationError
from .grids import BinaryMask, GridGeometry, LabelMap, LabelSchema, ScalarVolume
from .nifti import write_nifti

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

_STREAM_INTENSITY = 1
_STREAM_PLACEMENT = 2

# fraction of the z extent occupied by the lumbar column (centred band)
_VERTEBRA_Z_BAND = (0.20, 0.80)

PHANTOM_SCHEMA = LabelSchema({
    "sat": 1,
    "abdominal_cavity": 2,
    "vertebra_L1": 3,
    "vertebra_L2": 4,
    "vertebra_L3": 5,
    "vertebra_L4": 6,
    "vertebra_L5": 7,
    "organ:o1": 10,
    "organ:o2": 11,
    "organ:o3": 12,
    "organ:o4": 13,
    "organ:o5": 14,
    "organ:o6": 15,
})


def _mix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # wrapping modular arithmetic is intended
        z = (x + _GOLDEN).astype(np.uint64)
        z ^= z >> np.uint64(30)
        z *= _MIX1
        z ^= z >> np.uint64(27)
        z *= _MIX2
        z ^= z >> np.uint64(31)
    return z


def counter_hash(seed: int, stream: int, counters: np.ndarray) -> np.ndarray:
    """64-bit hash of (seed, stream, counter), vectorised over counters."""
    # 0-d arrays keep the wrapping arithmetic warning-free
    seed_arr = np.array(seed & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64)
    stream_arr = np.array(stream & 0xFFFFFFFFFFFFFFFF, dtype=np.uint64)
    base = _mix64(seed_arr ^ _mix64(stream_arr))
    return _mix64(base + counters.astype(np.uint64))


def counter_uniform(seed: int, stream: int, counters: np.ndarray) -> np.ndarray:
    """Uniforms in the open interval (0, 1), one per counter."""
    bits = counter_hash(seed, stream, counters) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * 2.0 ** -53


def counter_normal(seed: int, stream: int, counters: np.ndarray) -> np.ndarray:
    """Standard normal draws via the inverse CDF, one per counter."""
    return ndtri(counter_uniform(seed, stream, counters))


class _DrawStream:
    """Sequential scalar draws from the counter hash (placement sampling)."""

    def __init__(self, seed: int, stream: int):
        self._seed = seed
        self._stream = stream
        self._counter = 0

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = float(counter_uniform(self._seed, self._stream,
                                  np.array([self._counter], dtype=np.uint64))[0])
        self._counter += 1
        return lo + (hi - lo) * u


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, tissue models, and seed for one synthetic phantom."""

    seed: int = 42
    dims: tuple[int, int, int] = (64, 64, 48)
    spacing: tuple[float, float, float] = (1.5, 1.5, 1.5)
    body_semiaxes_mm: tuple[float, float] = (42.0, 36.0)
    sat_thickness_mm: float = 10.5
    vertebra_radius_mm: float = 7.0
    organ_count: int = 3
    organ_radius_mm: tuple[float, float] = (6.0, 10.0)
    vat_count: int = 250
    vat_radius_mm: tuple[float, float] = (5.0, 9.0)
    hu_background: float = -1000.0
    hu_at: tuple[float, float] = (-110.0, 20.0)  # shared by SAT and VAT
    hu_organ: tuple[float, float] = (40.0, 12.0)
    hu_vertebra: tuple[float, float] = (300.0, 50.0)
    hu_filler: tuple[float, float] = (10.0, 15.0)
    noise_scale: float = 1.0

    def __post_init__(self):
        geometry = GridGeometry(self.dims, self.spacing)  # validates dims/spacing
        object.__setattr__(self, "dims", geometry.dims)
        object.__setattr__(self, "spacing", geometry.spacing)
        for name in ("hu_at", "hu_organ", "hu_vertebra", "hu_filler"):
            _, sigma = getattr(self, name)
            if sigma <= 0:
                raise ValidationError(f"{name} sigma must be > 0")
        if self.noise_scale <= 0:
            raise ValidationError("noise_scale must be > 0")
        if self.organ_count < 0 or self.vat_count < 0:
            raise ValidationError("object counts must be >= 0")
        if self.organ_count > len(PHANTOM_SCHEMA.organ_roles):
            raise ValidationError(
                f"at most {len(PHANTOM_SCHEMA.organ_roles)} organs supported"
            )
        for name in ("organ_radius_mm", "vat_radius_mm"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValidationError(f"{name} must satisfy 0 < lo <= hi")
        a, b = self.body_semiaxes_mm
        if min(a, b) <= self.sat_thickness_mm:
            raise ValidationError("body semi-axes must exceed the SAT thickness")
        nx, ny, nz = self.dims
        sx, sy, sz = self.spacing
        if 2 * a >= (nx - 1) * sx or 2 * b >= (ny - 1) * sy:
            raise ValidationError("body ellipse does not fit within the grid")
        z_lo, z_hi = self.vertebra_z_range
        if z_hi - z_lo + 1 < 5:
            raise ValidationError("z extent too small for five lumbar bands")

    @property
    def center_mm(self) -> tuple[float, float]:
        nx, ny, _ = self.dims
        sx, sy, _ = self.spacing
        return ((nx - 1) * sx / 2.0, (ny - 1) * sy / 2.0)

    @property
    def inner_semiaxes_mm(self) -> tuple[float, float]:
        a, b = self.body_semiaxes_mm
        return (a - self.sat_thickness_mm, b - self.sat_thickness_mm)

    @property
    def vertebra_center_mm(self) -> tuple[float, float]:
        cx, cy = self.center_mm
        _, ib = self.inner_semiaxes_mm
        return (cx, cy + 0.5 * ib)

    @property
    def vertebra_z_range(self) -> tuple[int, int]:
        nz = self.dims[2]
        lo = int(np.floor(_VERTEBRA_Z_BAND[0] * nz))
        hi = int(np.ceil(_VERTEBRA_Z_BAND[1] * nz)) - 1
        return lo, min(hi, nz - 1)


@dataclass(frozen=True)
class PhantomLayout:
    """Resolved deterministic geometry of one phantom (for oracle checks)."""

    spec: PhantomSpec
    organs: tuple[tuple[float, float, float, float], ...]  # (cx, cy, cz, r) mm
    blobs: tuple[tuple[float, float, float, float], ...]


def _inside_inner(spec: PhantomSpec, x: float, y: float, shrink: float = 0.0) -> bool:
    cx, cy = spec.center_mm
    ia, ib = spec.inner_semiaxes_mm
    ia, ib = ia - shrink, ib - shrink
    if ia <= 0 or ib <= 0:
        return False
    return ((x - cx) / ia) ** 2 + ((y - cy) / ib) ** 2 <= 1.0


def _xy_dist2(x: float, y: float, p: tuple[float, float]) -> float:
    return (x - p[0]) ** 2 + (y - p[1]) ** 2


def phantom_layout(spec: PhantomSpec) -> PhantomLayout:
    """Place organs and VAT blobs deterministically from the seed."""
    draws = _DrawStream(spec.seed, _STREAM_PLACEMENT)
    cx, cy = spec.center_mm
    ia, ib = spec.inner_semiaxes_mm
    vx, vy = spec.vertebra_center_mm
    rv = spec.vertebra_radius_mm
    z_ext = (spec.dims[2] - 1) * spec.spacing[2]

    organs: list[tuple[float, float, float, float]] = []
    for _ in range(spec.organ_count):
        for _ in range(500):
            r = draws.uniform(*spec.organ_radius_mm)
            x = draws.uniform(cx - ia, cx + ia)
            y = draws.uniform(cy - ib, cy + ib)
            z = draws.uniform(0.0, z_ext)
            if not _inside_inner(spec, x, y, shrink=r):
                continue
            if not r <= z <= z_ext - r:
                continue
            if _xy_dist2(x, y, (vx, vy)) < (rv + r) ** 2:
                continue
            if any((x - ox) ** 2 + (y - oy) ** 2 + (z - oz) ** 2 < (r + orr + 1.0) ** 2
                   for ox, oy, oz, orr in organs):
                continue
            organs.append((x, y, z, r))
            break
        else:
            raise ValidationError(
                "phantom spec infeasible: could not place a non-overlapping organ"
            )

    blobs: list[tuple[float, float, float, float]] = []
    for _ in range(spec.vat_count):
        for _ in range(500):
            r = draws.uniform(*spec.vat_radius_mm)
            x = draws.uniform(cx - ia, cx + ia)
            y = draws.uniform(cy - ib, cy + ib)
            z = draws.uniform(0.0, z_ext)
            if not _inside_inner(spec, x, y):
                continue
            if _xy_dist2(x, y, (vx, vy)) < rv ** 2:
                continue
            blobs.append((x, y, z, r))
            break
        else:
            raise ValidationError("phantom spec infeasible: could not place a VAT blob")

    return PhantomLayout(spec=spec, organs=tuple(organs), blobs=tuple(blobs))


def _sphere_bits(dims, spacing, center, radius) -> np.ndarray:
    """Rasterise a sphere onto voxel centres (bounding-box local work only)."""
    bits = np.zeros(dims, dtype=bool)
    ranges = []
    for axis in range(3):
        lo = max(0, int(np.ceil((center[axis] - radius) / spacing[axis])))
        hi = min(dims[axis] - 1, int(np.floor((center[axis] + radius) / spacing[axis])))
        if lo > hi:
            return bits
        ranges.append((lo, hi))
    (x0, x1), (y0, y1), (z0, z1) = ranges
    xs = np.arange(x0, x1 + 1) * spacing[0] - center[0]
    ys = np.arange(y0, y1 + 1) * spacing[1] - center[1]
    zs = np.arange(z0, z1 + 1) * spacing[2] - center[2]
    d2 = (xs[:, None, None] ** 2 + ys[None, :, None] ** 2 + zs[None, None, :] ** 2)
    bits[x0:x1 + 1, y0:y1 + 1, z0:z1 + 1] = d2 <= radius * radius
    return bits


def generate_phantom(spec: PhantomSpec) -> tuple[ScalarVolume, LabelMap, BinaryMask]:
    """Build the CT volume, label map, and hidden ground-truth VAT mask."""
    layout = phantom_layout(spec)
    nx, ny, nz = spec.dims
    sx, sy, sz = spec.spacing
    cx, cy = spec.center_mm
    a, b = spec.body_semiaxes_mm
    ia, ib = spec.inner_semiaxes_mm

    xs = np.arange(nx) * sx
    ys = np.arange(ny) * sy
    ex = ((xs - cx) / a) ** 2
    ey = ((ys - cy) / b) ** 2
    body2d = ex[:, None] + ey[None, :] <= 1.0
    inner2d = (((xs - cx) / ia) ** 2)[:, None] + (((ys - cy) / ib) ** 2)[None, :] <= 1.0
    sat2d = body2d & ~inner2d

    vx, vy = spec.vertebra_center_mm
    vert2d = ((xs - vx) ** 2)[:, None] + ((ys - vy) ** 2)[None, :] <= spec.vertebra_radius_mm ** 2
    vert2d &= inner2d
    z_lo, z_hi = spec.vertebra_z_range

    sat = np.broadcast_to(sat2d[:, :, None], (nx, ny, nz)).copy()
    vert = np.zeros((nx, ny, nz), dtype=bool)
    vert[:, :, z_lo:z_hi + 1] = vert2d[:, :, None]
    cavity_region = np.broadcast_to(inner2d[:, :, None], (nx, ny, nz)) & ~vert

    organ_union = np.zeros((nx, ny, nz), dtype=bool)
    organ_bits = []
    for center in layout.organs:
        ob = _sphere_bits(spec.dims, spec.spacing, center[:3], center[3]) & cavity_region
        organ_bits.append(ob)
        organ_union |= ob
    cavity_label = cavity_region & ~organ_union

    vat = np.zeros((nx, ny, nz), dtype=bool)
    for center in layout.blobs:
        vat |= _sphere_bits(spec.dims, spec.spacing, center[:3], center[3])
    vat &= cavity_label
    filler = cavity_label & ~vat

    labels = np.zeros((nx, ny, nz), dtype=np.int32)
    labels[sat] = PHANTOM_SCHEMA.label_of("sat")
    labels[cavity_label] = PHANTOM_SCHEMA.label_of("abdominal_cavity")
    bands = np.array_split(np.arange(z_lo, z_hi + 1), 5)
    for i, band in enumerate(bands):  # lowest band is L5, topmost is L1
        role = f"vertebra_L{5 - i}"
        band_bits = np.zeros_like(vert)
        band_bits[:, :, band] = vert[:, :, band]
        labels[band_bits] = PHANTOM_SCHEMA.label_of(role)
    for i, ob in enumerate(organ_bits):
        labels[ob] = PHANTOM_SCHEMA.label_of(f"organ:o{i + 1}")

    # one standard-normal draw per voxel, keyed by the linear voxel index
    counters = np.arange(nx * ny * nz, dtype=np.uint64)
    z_draws = counter_normal(spec.seed, _STREAM_INTENSITY, counters)
    z_draws = z_draws.reshape((nx, ny, nz), order="F")

    hu = np.full((nx, ny, nz), spec.hu_background, dtype=np.float64)
    ns = spec.noise_scale
    for bits, (mu, sigma) in (
        (sat | vat, spec.hu_at),
        (organ_union, spec.hu_organ),
        (vert, spec.hu_vertebra),
        (filler, spec.hu_filler),
    ):
        hu[bits] = mu + sigma * ns * z_draws[bits]

    geometry = GridGeometry(spec.dims, spec.spacing)
    schema = phantom_schema(spec.organ_count)
    return (
        ScalarVolume(geometry, hu.astype(np.float32)),
        LabelMap(geometry, labels, schema),
        BinaryMask(geometry, vat),
    )


def phantom_schema(organ_count: int) -> LabelSchema:
    """The label schema phantoms carry, trimmed to the configured organ count."""
    roles = {r: l for r, l in PHANTOM_SCHEMA.roles.items() if not r.startswith("organ:")}
    for i in range(organ_count):
        role = f"organ:o{i + 1}"
        roles[role] = PHANTOM_SCHEMA.label_of(role)
    return LabelSchema(roles)


def phantom_suite(seeds, noise_scales, out_dir, base_spec: PhantomSpec | None = None) -> dict:
    """Write one phantom case per (seed, noise_scale) plus a JSON manifest.

    Each case contributes three files (CT, labels, ground-truth VAT); the
    shared label schema is embedded in the manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = base_spec or PhantomSpec()
    cases = []
    schema = phantom_schema(base.organ_count)
    for noise in noise_scales:
        for seed in seeds:
            spec = PhantomSpec(**{**base.__dict__, "seed": int(seed),
                                  "noise_scale": float(noise)})
            ct, labels, gt = generate_phantom(spec)
            case_id = f"seed{int(seed):04d}_noise{float(noise):g}"
            paths = {
                "ct": f"{case_id}_ct.nii.gz",
                "labels": f"{case_id}_labels.nii.gz",
                "gt_vat": f"{case_id}_gt_vat.nii.gz",
            }
            write_nifti(ct, out_dir / paths["ct"])
            write_nifti(labels, out_dir / paths["labels"])
            write_nifti(gt, out_dir / paths["gt_vat"])
            cases.append({"id": case_id, "seed": int(seed),
                          "noise_scale": float(noise), **paths})
    manifest = {
        "schema": schema.to_dict(),
        "dims": list(base.dims),
        "spacing": list(base.spacing),
        "cases": cases,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest
