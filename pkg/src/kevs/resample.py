"""Resampling of volumes (trilinear) and label maps (nearest neighbour).

Output voxel centres sit at ``index * target_spacing`` along each axis,
measured from the shared origin; sample positions beyond the input grid clamp
to the edge voxel. Interpolation runs in float64 with a fixed accumulation
order, so results are deterministic regardless of parallelism.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ValidationError
from .grids import GridGeometry, LabelMap, ScalarVolume


def _check_target(target_spacing) -> tuple[float, float, float]:
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or any(not math.isfinite(s) or s <= 0 for s in target):
        raise ValidationError(f"target spacing must be three finite positives, got {target_spacing}")
    return target


def _output_dims(geometry: GridGeometry, target: tuple[float, float, float]) -> tuple[int, int, int]:
    # round-half-up keeps the physical extent within one voxel of the input
    return tuple(
        max(1, int(math.floor(d * s / t + 0.5)))
        for d, s, t in zip(geometry.dims, geometry.spacing, target)
    )


def _axis_positions(n_out: int, scale: float, n_in: int) -> np.ndarray:
    pos = np.arange(n_out, dtype=np.float64) * scale
    return np.clip(pos, 0.0, float(n_in - 1))


def resample_trilinear(v: ScalarVolume, target_spacing) -> ScalarVolume:
    """Resample a scalar volume to ``target_spacing`` with trilinear interpolation."""
    target = _check_target(target_spacing)
    if target == v.geometry.spacing:
        return ScalarVolume(v.geometry, v.data.copy())

    out_dims = _output_dims(v.geometry, target)
    lo, hi, w_hi = [], [], []
    for axis in range(3):
        n_in = v.geometry.dims[axis]
        pos = _axis_positions(out_dims[axis], target[axis] / v.geometry.spacing[axis], n_in)
        i0 = np.floor(pos).astype(np.intp)
        lo.append(i0)
        hi.append(np.minimum(i0 + 1, n_in - 1))
        w_hi.append(pos - i0)

    data = v.data.astype(np.float64)
    out = np.zeros(out_dims, dtype=np.float64)
    for cx in (0, 1):
        wx = (w_hi[0] if cx else 1.0 - w_hi[0])[:, None, None]
        ix = hi[0] if cx else lo[0]
        for cy in (0, 1):
            wy = (w_hi[1] if cy else 1.0 - w_hi[1])[None, :, None]
            iy = hi[1] if cy else lo[1]
            for cz in (0, 1):
                wz = (w_hi[2] if cz else 1.0 - w_hi[2])[None, None, :]
                iz = hi[2] if cz else lo[2]
                out += data[np.ix_(ix, iy, iz)] * (wx * wy * wz)

    geometry = GridGeometry(out_dims, target, v.geometry.origin)
    return ScalarVolume(geometry, out.astype(np.float32))


def resample_nearest(l: LabelMap, target_spacing) -> LabelMap:
    """Resample a label map to ``target_spacing`` with nearest-neighbour lookup."""
    target = _check_target(target_spacing)
    if target == l.geometry.spacing:
        return LabelMap(l.geometry, l.data.copy(), l.schema)

    out_dims = _output_dims(l.geometry, target)
    idx = []
    for axis in range(3):
        n_in = l.geometry.dims[axis]
        pos = _axis_positions(out_dims[axis], target[axis] / l.geometry.spacing[axis], n_in)
        idx.append(np.floor(pos + 0.5).astype(np.intp))

    geometry = GridGeometry(out_dims, target, l.geometry.origin)
    return LabelMap(geometry, l.data[np.ix_(*idx)], l.schema)
