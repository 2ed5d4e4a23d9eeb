"""Core voxel-grid data model: geometry, volumes, label maps, and masks.

All arrays are indexed ``[x, y, z]``. The defined linear voxel order is
x-fastest, ``index = x + nx * (y + ny * z)``, i.e. Fortran ravel order of the
``(nx, ny, nz)`` array. Deterministic tie-breaking elsewhere relies on this
order, so it must not change.

Constructors take ownership of the arrays they are given and mark them
read-only; all types are immutable after construction.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ValidationError

# Canonical voxel spacing (mm) the pipeline resamples to before segmentation.
CANONICAL_SPACING = (1.5, 1.5, 1.5)

ROLE_SAT = "sat"
ROLE_CAVITY = "abdominal_cavity"
LUMBAR_ROLES = tuple(f"vertebra_L{i}" for i in range(1, 6))
ORGAN_PREFIX = "organ:"

# Roles the segmentation pipeline cannot run without.
MANDATORY_PIPELINE_ROLES = (ROLE_SAT, ROLE_CAVITY, "vertebra_L3")

_ORGAN_NAME_RE = re.compile(r"^[A-Za-z0-9_\-]+$")


@dataclass(frozen=True)
class GridGeometry:
    """Voxel counts, physical spacing (mm/voxel), and physical origin (mm)."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValidationError("geometry requires 3-tuples for dims, spacing, origin")
        if any(d < 1 for d in dims):
            raise ValidationError(f"all dims must be >= 1, got {dims}")
        if any(not math.isfinite(s) or s <= 0.0 for s in spacing):
            raise ValidationError(f"all spacings must be finite and > 0, got {spacing}")
        if any(not math.isfinite(o) for o in origin):
            raise ValidationError(f"origin must be finite, got {origin}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def nvox(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _check_shape(arr: np.ndarray, geometry: GridGeometry, what: str) -> None:
    if arr.shape != geometry.dims:
        raise ValidationError(
            f"{what} shape {arr.shape} does not match geometry dims {geometry.dims}"
        )


@dataclass(frozen=True)
class LabelSchema:
    """Injective mapping of semantic roles to label ids.

    Recognised roles: ``sat``, ``abdominal_cavity``, ``vertebra_L1`` ..
    ``vertebra_L5``, and ``organ:<name>``. Label id 0 is reserved for
    background and may not be assigned to a role.
    """

    roles: Mapping[str, int]

    def __post_init__(self):
        roles = dict(self.roles)
        for role, label in roles.items():
            if not self._known_role(role):
                raise ValidationError(f"unknown schema role {role!r}")
            if not isinstance(label, int) or isinstance(label, bool) or label < 1:
                raise ValidationError(
                    f"role {role!r} must map to an integer label >= 1, got {label!r}"
                )
        ids = list(roles.values())
        if len(set(ids)) != len(ids):
            raise ValidationError("schema role -> label mapping must be injective")
        object.__setattr__(self, "roles", roles)

    @staticmethod
    def _known_role(role: str) -> bool:
        if role in (ROLE_SAT, ROLE_CAVITY) or role in LUMBAR_ROLES:
            return True
        return role.startswith(ORGAN_PREFIX) and bool(
            _ORGAN_NAME_RE.match(role[len(ORGAN_PREFIX):])
        )

    def __contains__(self, role: str) -> bool:
        return role in self.roles

    def label_of(self, role: str) -> int:
        try:
            return self.roles[role]
        except KeyError:
            raise ValidationError(f"role {role!r} not present in label schema") from None

    @property
    def label_ids(self) -> frozenset[int]:
        return frozenset(self.roles.values())

    @property
    def organ_roles(self) -> tuple[str, ...]:
        return tuple(sorted(r for r in self.roles if r.startswith(ORGAN_PREFIX)))

    @property
    def lumbar_roles(self) -> tuple[str, ...]:
        return tuple(r for r in LUMBAR_ROLES if r in self.roles)

    @classmethod
    def from_dict(cls, raw: Mapping) -> "LabelSchema":
        roles: dict[str, int] = {}
        for key, value in raw.items():
            if key == "organs":
                if not isinstance(value, Mapping):
                    raise ValidationError('"organs" must be a name -> label object')
                for name, label in value.items():
                    roles[f"{ORGAN_PREFIX}{name}"] = label
            else:
                roles[key] = value
        return cls(roles)

    def to_dict(self) -> dict:
        out: dict = {}
        organs: dict[str, int] = {}
        for role, label in self.roles.items():
            if role.startswith(ORGAN_PREFIX):
                organs[role[len(ORGAN_PREFIX):]] = label
            else:
                out[role] = label
        if organs:
            out["organs"] = organs
        return out

    @classmethod
    def from_json(cls, path) -> "LabelSchema":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"malformed schema JSON {path}: {exc}") from exc
        if not isinstance(raw, Mapping):
            raise ValidationError(f"schema JSON {path} must contain an object")
        return cls.from_dict(raw)

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """3D grid of Hounsfield-unit intensities (float32) with physical geometry."""

    geometry: GridGeometry
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        _check_shape(arr, self.geometry, "volume data")
        if not np.isfinite(arr).all():
            raise ValidationError("volume data contains non-finite values")
        object.__setattr__(self, "data", _freeze(arr))


@dataclass(frozen=True, eq=False)
class LabelMap:
    """3D grid of non-negative integer labels plus the role schema."""

    geometry: GridGeometry
    data: np.ndarray
    schema: LabelSchema

    def __post_init__(self):
        arr = np.asarray(self.data)
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValidationError(f"label data must be integer, got dtype {arr.dtype}")
        arr = arr.astype(np.int32, copy=False)
        _check_shape(arr, self.geometry, "label data")
        present = np.unique(arr)
        if present.size and present[0] < 0:
            raise ValidationError("label data contains negative labels")
        unknown = set(int(v) for v in present if v != 0) - set(self.schema.label_ids)
        if unknown:
            raise ValidationError(
                f"label data contains labels absent from schema: {sorted(unknown)}"
            )
        object.__setattr__(self, "data", _freeze(arr))


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """3D boolean grid sharing the volume geometry."""

    geometry: GridGeometry
    bits: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.dtype != np.bool_:
            arr = arr.astype(bool)
        _check_shape(arr, self.geometry, "mask bits")
        object.__setattr__(self, "bits", _freeze(arr))

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @property
    def empty(self) -> bool:
        return not self.bits.any()


@dataclass(frozen=True, eq=False)
class SliceMask:
    """2D boolean mask of one axial slice, remembering its parent grid."""

    bits: np.ndarray
    z_index: int
    geometry: GridGeometry

    def __post_init__(self):
        arr = np.asarray(self.bits)
        if arr.dtype != np.bool_:
            arr = arr.astype(bool)
        nx, ny, nz = self.geometry.dims
        if arr.shape != (nx, ny):
            raise ValidationError(
                f"slice bits shape {arr.shape} does not match in-plane dims {(nx, ny)}"
            )
        if not 0 <= self.z_index < nz:
            raise ValidationError(f"slice z index {self.z_index} outside [0, {nz})")
        object.__setattr__(self, "bits", _freeze(arr))

    @property
    def area(self) -> int:
        return int(self.bits.sum())

    @property
    def empty(self) -> bool:
        return not self.bits.any()


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Per-voxel Euclidean distance in mm to the nearest source-mask voxel."""

    geometry: GridGeometry
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        _check_shape(arr, self.geometry, "distance values")
        object.__setattr__(self, "values", _freeze(arr))


_AXIS_PERMUTATIONS = {"x": (1, 2, 0), "y": (0, 2, 1), "z": (0, 1, 2)}


def with_z_axis(obj, axis: str):
    """Transpose a volume/label map/mask so the named axis becomes axial (z).

    Covers files whose slice axis is not the third header dimension; the
    relative order of the remaining axes is preserved.
    """
    perm = _AXIS_PERMUTATIONS.get(axis)
    if perm is None:
        raise ValidationError(f"z-axis must be one of x, y, z, got {axis!r}")
    if axis == "z":
        return obj
    g = obj.geometry
    geometry = GridGeometry(
        tuple(g.dims[p] for p in perm),
        tuple(g.spacing[p] for p in perm),
        tuple(g.origin[p] for p in perm),
    )
    if isinstance(obj, ScalarVolume):
        return ScalarVolume(geometry, np.transpose(obj.data, perm).copy())
    if isinstance(obj, LabelMap):
        return LabelMap(geometry, np.transpose(obj.data, perm).copy(), obj.schema)
    if isinstance(obj, BinaryMask):
        return BinaryMask(geometry, np.transpose(obj.bits, perm).copy())
    raise ValidationError(f"cannot reorient object of type {type(obj).__name__}")


def linear_indices(bits: np.ndarray) -> np.ndarray:
    """Linear indices (x-fastest order) of the true voxels of ``bits``."""
    return np.flatnonzero(np.ravel(bits, order="F"))


def values_at(data: np.ndarray, lin_idx: np.ndarray) -> np.ndarray:
    """Values of ``data`` at the given x-fastest linear indices."""
    return np.ravel(data, order="F")[lin_idx]


def mask_from_linear(geometry: GridGeometry, lin_idx: np.ndarray) -> BinaryMask:
    """Build a mask whose true voxels are the given x-fastest linear indices."""
    flat = np.zeros(geometry.nvox, dtype=bool)
    flat[lin_idx] = True
    return BinaryMask(geometry, flat.reshape(geometry.dims, order="F"))
