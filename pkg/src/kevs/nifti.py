"""Minimal NIfTI-1 reader/writer for the subset this pipeline needs.

Supported: single-file ``.nii`` / ``.nii.gz`` (magic ``n+1\\0``), 3D, voxel
dtypes uint8 / int16 / int32 / float32. Spacing is taken from ``pixdim``,
origin from the ``qoffset_*`` fields; no affine reorientation is performed
(axial z-axis assumed). Intensity files have ``scl_slope`` / ``scl_inter``
applied and are held as float32; label and mask files are read raw.

Written files are byte-deterministic (gzip mtime pinned to 0), so repeated
runs produce identical outputs.
"""

from __future__ import annotations

import gzip
import math
import struct
from pathlib import Path

import numpy as np

from .errors import NiftiFormatError, ValidationError
from .grids import BinaryMask, GridGeometry, LabelMap, LabelSchema, ScalarVolume

HEADER_SIZE = 348
_MAGIC_SINGLE = b"n+1\x00"

# NIfTI-1 datatype codes for the supported voxel types.
_DTYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}

# (name, struct format) pairs covering the full 348-byte header in order.
_FIELDS = [
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "c"),
    ("dim_info", "B"),
    ("dim", "8h"),
    ("intent_p1", "f"),
    ("intent_p2", "f"),
    ("intent_p3", "f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "b"),
    ("xyzt_units", "b"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern_b", "f"),
    ("quatern_c", "f"),
    ("quatern_d", "f"),
    ("qoffset_x", "f"),
    ("qoffset_y", "f"),
    ("qoffset_z", "f"),
    ("srow_x", "4f"),
    ("srow_y", "4f"),
    ("srow_z", "4f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
]
_STRUCT_FMT = "".join(fmt for _, fmt in _FIELDS)
assert struct.calcsize("<" + _STRUCT_FMT) == HEADER_SIZE


def _unpack_header(blob: bytes, byteorder: str) -> dict:
    values = struct.unpack(byteorder + _STRUCT_FMT, blob)
    fields: dict = {}
    pos = 0
    for name, fmt in _FIELDS:
        count = int(fmt[:-1]) if len(fmt) > 1 and fmt[-1] not in "sc" else 1
        if fmt.endswith("s") or fmt.endswith("c"):
            fields[name] = values[pos]
            pos += 1
        elif count == 1:
            fields[name] = values[pos]
            pos += 1
        else:
            fields[name] = values[pos:pos + count]
            pos += count
    return fields


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.GzipFile(fileobj=fh) as gz:
                return gz.read()
        return fh.read()


def _parse(raw: bytes, path) -> tuple[dict, str]:
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: file shorter than a NIfTI-1 header")
    blob = raw[:HEADER_SIZE]
    for byteorder in ("<", ">"):
        if struct.unpack(byteorder + "i", blob[:4])[0] == HEADER_SIZE:
            return _unpack_header(blob, byteorder), byteorder
    raise NiftiFormatError(f"{path}: not a NIfTI-1 file (bad sizeof_hdr)")


def read_nifti(path, kind: str, schema: LabelSchema | None = None):
    """Read a NIfTI-1 file as a ScalarVolume, LabelMap, or BinaryMask.

    ``kind`` selects the conversion: ``"scalar"`` applies intensity scaling
    and yields float32 HU; ``"label"`` requires ``schema`` and an integer
    voxel dtype; ``"mask"`` binarises nonzero voxels.
    """
    if kind not in ("scalar", "label", "mask"):
        raise ValidationError(f"kind must be 'scalar', 'label', or 'mask', got {kind!r}")
    if kind == "label" and schema is None:
        raise ValidationError("reading a label map requires a label schema")

    raw = _read_bytes(path)
    hdr, byteorder = _parse(raw, path)

    if hdr["magic"] != _MAGIC_SINGLE:
        raise NiftiFormatError(
            f"{path}: unsupported magic {hdr['magic']!r} (only single-file 'n+1')"
        )
    dim = hdr["dim"]
    ndim = dim[0]
    if ndim < 3 or any(d > 1 for d in dim[4:4 + max(0, ndim - 3)]):
        raise NiftiFormatError(f"{path}: only 3D volumes are supported, dim={list(dim)}")
    nx, ny, nz = (int(d) for d in dim[1:4])
    if min(nx, ny, nz) < 1:
        raise NiftiFormatError(f"{path}: non-positive dimensions {(nx, ny, nz)}")

    code = hdr["datatype"]
    if code not in _DTYPES:
        raise NiftiFormatError(f"{path}: unsupported datatype code {code}")
    dtype = _DTYPES[code]
    if hdr["bitpix"] != dtype.itemsize * 8:
        raise NiftiFormatError(
            f"{path}: bitpix {hdr['bitpix']} inconsistent with datatype {dtype}"
        )

    spacing = tuple(float(p) for p in hdr["pixdim"][1:4])
    origin = (float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"]))
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    for name, value in (("pixdim", spacing), ("qoffset", origin),
                        ("scl_slope", (slope,)), ("scl_inter", (inter,))):
        if any(not math.isfinite(v) for v in value):
            raise NiftiFormatError(f"{path}: non-finite header field {name}")
    if any(s <= 0 for s in spacing):
        raise NiftiFormatError(f"{path}: non-positive pixdim {spacing}")

    offset = int(hdr["vox_offset"])
    if offset < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: vox_offset {offset} inside the header")
    count = nx * ny * nz
    end = offset + count * dtype.itemsize
    if len(raw) < end:
        raise NiftiFormatError(f"{path}: truncated voxel data")
    arr = np.frombuffer(raw, dtype=dtype.newbyteorder(byteorder), count=count,
                        offset=offset)
    arr = arr.astype(dtype)  # native byte order, writable copy
    grid = arr.reshape((nx, ny, nz), order="F")

    geometry = GridGeometry((nx, ny, nz), spacing, origin)
    if kind == "scalar":
        data = grid.astype(np.float32)
        if slope not in (0.0, 1.0) or inter != 0.0:
            effective = np.float32(slope if slope != 0.0 else 1.0)
            data = data * effective + np.float32(inter)
        if not np.isfinite(data).all():
            raise NiftiFormatError(f"{path}: non-finite voxel values")
        return ScalarVolume(geometry, data)
    if kind == "label":
        if not np.issubdtype(dtype, np.integer):
            raise NiftiFormatError(f"{path}: label map requires an integer dtype, got {dtype}")
        return LabelMap(geometry, grid, schema)
    return BinaryMask(geometry, grid != 0)


def _pack_header(geometry: GridGeometry, code: int, itemsize: int) -> bytes:
    nx, ny, nz = geometry.dims
    sx, sy, sz = geometry.spacing
    ox, oy, oz = geometry.origin
    fields = {name: (b"" if fmt.endswith("s") else b"\x00" if fmt.endswith("c") else
                     (0,) * int(fmt[:-1]) if len(fmt) > 1 else 0)
              for name, fmt in _FIELDS}
    fields.update(
        sizeof_hdr=HEADER_SIZE,
        regular=b"r",
        dim=(3, nx, ny, nz, 1, 1, 1, 1),
        datatype=code,
        bitpix=itemsize * 8,
        pixdim=(1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0),
        vox_offset=float(HEADER_SIZE + 4),
        scl_slope=1.0,
        scl_inter=0.0,
        xyzt_units=2,  # millimetres
        descrip=b"kevs",
        qform_code=1,
        sform_code=1,
        qoffset_x=ox, qoffset_y=oy, qoffset_z=oz,
        srow_x=(sx, 0.0, 0.0, ox),
        srow_y=(0.0, sy, 0.0, oy),
        srow_z=(0.0, 0.0, sz, oz),
        magic=_MAGIC_SINGLE,
    )
    flat: list = []
    for name, fmt in _FIELDS:
        value = fields[name]
        if isinstance(value, tuple):
            flat.extend(value)
        else:
            flat.append(value)
    return struct.pack("<" + _STRUCT_FMT, *flat)


def write_nifti(obj, path) -> None:
    """Write a ScalarVolume, LabelMap, or BinaryMask as single-file NIfTI-1.

    Scalars are stored as float32 (bit-exact round trip); label maps as the
    narrowest of int16/int32 that fits; masks as uint8 0/1. ``.gz`` suffix
    selects gzip compression with deterministic bytes.
    """
    if isinstance(obj, ScalarVolume):
        arr = obj.data.astype(np.float32, copy=False)
    elif isinstance(obj, LabelMap):
        narrow = obj.data.max(initial=0) < np.iinfo(np.int16).max
        arr = obj.data.astype(np.int16 if narrow else np.int32)
    elif isinstance(obj, BinaryMask):
        arr = obj.bits.astype(np.uint8)
    else:
        raise ValidationError(f"cannot write object of type {type(obj).__name__}")

    header = _pack_header(obj.geometry, _DTYPE_CODES[arr.dtype], arr.dtype.itemsize)
    payload = header + b"\x00\x00\x00\x00" + np.ravel(arr, order="F").tobytes()

    path = Path(path)
    if path.suffix == ".gz":
        with open(path, "wb") as fh:
            # empty filename + zero mtime keep the compressed bytes deterministic
            with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(payload)
