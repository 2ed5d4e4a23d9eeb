"""Binary-mask algebra, 2D slice erosion, z-axis analysis, boundaries, and
Euclidean distance transforms.

Connectivity conventions are fixed for determinism: slice erosion uses the
3x3 cross (4-connectivity, configurable to the full square), 3D boundary and
dilation use 6-face adjacency, and out-of-grid always counts as background.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .grids import BinaryMask, DistanceField, GridGeometry, LabelMap, SliceMask

_STRUCT_3D_FACES = ndimage.generate_binary_structure(3, 1)


def require_same_geometry(a_geom: GridGeometry, b_geom: GridGeometry) -> None:
    if a_geom != b_geom:
        raise ValidationError(
            f"geometry mismatch: {a_geom.dims}@{a_geom.spacing} vs {b_geom.dims}@{b_geom.spacing}"
        )


def extract_role(l: LabelMap, role: str) -> BinaryMask:
    """Mask of the voxels carrying the schema label for ``role``."""
    label = l.schema.label_of(role)
    return BinaryMask(l.geometry, l.data == label)


def mask_subtract(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    require_same_geometry(a.geometry, b.geometry)
    return BinaryMask(a.geometry, a.bits & ~b.bits)


def mask_intersect(a: BinaryMask, b: BinaryMask) -> BinaryMask:
    require_same_geometry(a.geometry, b.geometry)
    return BinaryMask(a.geometry, a.bits & b.bits)


def mask_union(masks: Sequence[BinaryMask]) -> BinaryMask:
    if not masks:
        raise ValidationError("mask_union requires at least one mask")
    geometry = masks[0].geometry
    bits = np.zeros(geometry.dims, dtype=bool)
    for m in masks:
        require_same_geometry(geometry, m.geometry)
        bits |= m.bits
    return BinaryMask(geometry, bits)


def median_z(m: BinaryMask) -> int:
    """Median z-index of the true voxels (lower of the two middle values)."""
    zs = np.nonzero(m.bits)[2]
    if zs.size == 0:
        raise ValidationError("median_z of an empty mask")
    zs = np.sort(zs)
    return int(zs[(zs.size - 1) // 2])


def take_slice(m: BinaryMask, z: int) -> SliceMask:
    nz = m.geometry.dims[2]
    if not 0 <= z < nz:
        raise ValidationError(f"slice index {z} outside [0, {nz})")
    return SliceMask(m.bits[:, :, z], z, m.geometry)


def _slice_structure(connectivity: int) -> np.ndarray:
    if connectivity not in (1, 2):
        raise ValidationError("erosion connectivity must be 1 (cross) or 2 (square)")
    return ndimage.generate_binary_structure(2, connectivity)


def erode_slice_once(s: SliceMask, connectivity: int = 1) -> SliceMask:
    """One morphological erosion of the slice; the border counts as background."""
    struct = _slice_structure(connectivity)
    eroded = ndimage.binary_erosion(s.bits, structure=struct, border_value=0)
    return SliceMask(eroded, s.z_index, s.geometry)


@dataclass(frozen=True)
class ErosionResult:
    """Outcome of iterative slice erosion toward a target area fraction."""

    mask: SliceMask
    iterations: int
    degenerate: bool


def erode_to_fraction(s: SliceMask, fraction: float, connectivity: int = 1) -> ErosionResult:
    """Erode repeatedly until the area is <= fraction of the original.

    If an iterate would become empty before reaching the target, the last
    nonempty iterate is returned with ``degenerate=True`` so thin rims never
    silently produce an empty sample set.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"erosion fraction must be in (0, 1], got {fraction}")
    if s.empty:
        raise ValidationError("erode_to_fraction of an empty slice mask")

    target = fraction * s.area
    current = s
    iterations = 0
    while current.area > target:
        nxt = erode_slice_once(current, connectivity)
        if nxt.empty:
            return ErosionResult(current, iterations, degenerate=True)
        current = nxt
        iterations += 1
    return ErosionResult(current, iterations, degenerate=False)


def z_extent(masks: Sequence[BinaryMask]) -> tuple[int, int]:
    """Min and max z-index over the true voxels of the union of ``masks``."""
    z_min, z_max = None, None
    for m in masks:
        zs = np.nonzero(m.bits)[2]
        if zs.size:
            lo, hi = int(zs.min()), int(zs.max())
            z_min = lo if z_min is None else min(z_min, lo)
            z_max = hi if z_max is None else max(z_max, hi)
    if z_min is None:
        raise ValidationError("z_extent of all-empty masks")
    return z_min, z_max


def crop_to_z(m: BinaryMask, z_min: int, z_max: int) -> BinaryMask:
    """Clear all voxels outside the inclusive slab [z_min, z_max]."""
    nz = m.geometry.dims[2]
    if not 0 <= z_min <= z_max < nz:
        raise ValidationError(f"invalid z range [{z_min}, {z_max}] for nz={nz}")
    bits = np.zeros_like(m.bits)
    bits[:, :, z_min:z_max + 1] = m.bits[:, :, z_min:z_max + 1]
    return BinaryMask(m.geometry, bits)


def boundary_bits(bits: np.ndarray) -> np.ndarray:
    """Foreground cells with at least one face-adjacent background cell.

    Works for 2D or 3D arrays; out-of-grid counts as background.
    """
    struct = ndimage.generate_binary_structure(bits.ndim, 1)
    interior = ndimage.binary_erosion(bits, structure=struct, border_value=0)
    return bits & ~interior


def boundary_voxels(m: BinaryMask) -> BinaryMask:
    return BinaryMask(m.geometry, boundary_bits(m.bits))


def distance_bits(bits: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """Exact Euclidean distance (same units as ``spacing``) to the nearest
    true cell, for every cell of the grid."""
    if not bits.any():
        raise ValidationError("distance transform of an empty mask")
    return ndimage.distance_transform_edt(~bits, sampling=tuple(spacing))


def distance_transform(m: BinaryMask) -> DistanceField:
    return DistanceField(m.geometry, distance_bits(m.bits, m.geometry.spacing))


def dilate(m: BinaryMask, layers: int) -> BinaryMask:
    """``layers`` iterations of 6-face dilation (0 layers is the identity)."""
    if layers < 0:
        raise ValidationError(f"dilation layers must be >= 0, got {layers}")
    if layers == 0:
        return BinaryMask(m.geometry, m.bits.copy())
    bits = ndimage.binary_dilation(m.bits, structure=_STRUCT_3D_FACES, iterations=layers)
    return BinaryMask(m.geometry, bits)
