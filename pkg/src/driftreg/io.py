"""Reading and writing volumes and deformation fields.

Two carriers are supported:

* single-file NIfTI-1 (``.nii``), little-endian, datatypes uint8/int16/float32;
* a raw format: ``<name>.vol`` holding float32 little-endian values in x-fastest
  order, next to a ``<name>.json`` sidecar with ``dims`` and ``spacing``.

Orientation matrices are ignored on read; volumes live in index space.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .volume import DeformationField, Volume, VolumeError

__all__ = [
    "VolumeHeader",
    "NiftiError",
    "load_volume",
    "save_volume",
    "read_nifti_header",
    "load_dvf",
    "save_dvf",
]

NIFTI_HEADER_SIZE = 348
NIFTI_MAGIC = b"n+1\x00"

# NIfTI datatype code -> numpy dtype
DATATYPES = {
    2: np.dtype("<u1"),
    4: np.dtype("<i2"),
    16: np.dtype("<f4"),
}

_HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert _HEADER_DTYPE.itemsize == NIFTI_HEADER_SIZE


class NiftiError(VolumeError):
    """Malformed or unsupported NIfTI file."""


@dataclass(frozen=True)
class VolumeHeader:
    datatype: int
    dims: tuple
    spacing: tuple
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    vox_offset: int = 352


def read_nifti_header(raw: bytes) -> VolumeHeader:
    if len(raw) < NIFTI_HEADER_SIZE:
        raise NiftiError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    hdr = np.frombuffer(raw[:NIFTI_HEADER_SIZE], dtype=_HEADER_DTYPE)[0]
    if hdr["sizeof_hdr"] != NIFTI_HEADER_SIZE:
        if int(hdr["sizeof_hdr"]).to_bytes(4, "little") == NIFTI_HEADER_SIZE.to_bytes(4, "big"):
            raise NiftiError("big-endian NIfTI files are not supported")
        raise NiftiError(f"bad sizeof_hdr {hdr['sizeof_hdr']}")
    # the magic field is zero-terminated, numpy strips the trailing NUL
    if hdr["magic"] + b"\x00" != NIFTI_MAGIC:
        raise NiftiError(f"unsupported magic {hdr['magic']!r}; only single-file n+1 is read")
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise NiftiError(f"unsupported NIfTI datatype code {code}")
    dim = [int(d) for d in hdr["dim"]]
    ndim = dim[0]
    if ndim < 3 or ndim > 7 or any(d != 1 for d in dim[4 : ndim + 1]):
        raise NiftiError(f"only 3D volumes are supported, header dim = {dim}")
    dims = tuple(dim[1:4])
    if min(dims) < 1:
        raise NiftiError(f"invalid dims {dims}")
    spacing = tuple(abs(float(p)) or 1.0 for p in hdr["pixdim"][1:4])
    slope = float(hdr["scl_slope"])
    inter = float(hdr["scl_inter"])
    # slope 0 means "no scaling" in NIfTI-1
    if slope == 0 or not np.isfinite(slope):
        slope, inter = 1.0, 0.0
    offset = int(hdr["vox_offset"])
    if offset < NIFTI_HEADER_SIZE:
        raise NiftiError(f"vox_offset {offset} points inside the header")
    return VolumeHeader(code, dims, spacing, slope, inter, offset)


def _load_nifti(path: Path) -> Volume:
    raw = path.read_bytes()
    h = read_nifti_header(raw)
    dtype = DATATYPES[h.datatype]
    count = int(np.prod(h.dims))
    nbytes = count * dtype.itemsize
    payload = raw[h.vox_offset : h.vox_offset + nbytes]
    if len(payload) != nbytes:
        raise NiftiError(
            f"payload has {len(payload)} bytes but dims {h.dims} need {nbytes}"
        )
    values = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    if (h.scl_slope, h.scl_inter) != (1.0, 0.0):
        values = h.scl_slope * values + h.scl_inter
    return Volume.from_flat(values, h.dims, h.spacing)


def _save_nifti(v: Volume, path: Path):
    hdr = np.zeros((), dtype=_HEADER_DTYPE)
    hdr["sizeof_hdr"] = NIFTI_HEADER_SIZE
    hdr["dim"] = [3, *v.dims, 1, 1, 1, 1]
    hdr["datatype"] = 16
    hdr["bitpix"] = 32
    hdr["pixdim"] = [1.0, *v.spacing, 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = 352
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = 2  # mm
    hdr["sform_code"] = 1
    hdr["srow_x"] = [v.spacing[0], 0, 0, 0]
    hdr["srow_y"] = [0, v.spacing[1], 0, 0]
    hdr["srow_z"] = [0, 0, v.spacing[2], 0]
    hdr["magic"] = NIFTI_MAGIC
    with open(path, "wb") as fh:
        fh.write(hdr.tobytes())
        fh.write(b"\x00" * 4)  # no extensions
        fh.write(v.flat().astype("<f4").tobytes())


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def _read_raw(path: Path, channels: int):
    try:
        meta = json.loads(_sidecar(path).read_text())
    except json.JSONDecodeError as exc:
        raise VolumeError(f"malformed sidecar {_sidecar(path)}: {exc}") from None
    try:
        dims = tuple(int(d) for d in meta["dims"])
        spacing = tuple(float(s) for s in meta.get("spacing", (1.0, 1.0, 1.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeError(f"malformed sidecar {_sidecar(path)}: {exc}") from None
    if len(dims) != 3:
        raise VolumeError(f"sidecar dims must have 3 entries, got {dims}")
    if int(meta.get("channels", 1)) != channels:
        raise VolumeError(f"{path} holds {meta.get('channels', 1)} channel(s), expected {channels}")
    values = np.fromfile(path, dtype="<f4").astype(np.float64)
    if values.size != channels * int(np.prod(dims)):
        raise VolumeError(f"{path} has {values.size} values, sidecar dims {dims} x {channels} channel(s)")
    return values, dims, spacing


def _write_raw(path: Path, flat: np.ndarray, dims, spacing, channels: int):
    meta = {"dims": list(map(int, dims)), "spacing": list(map(float, spacing))}
    if channels != 1:
        meta["channels"] = channels
    flat.astype("<f4").tofile(path)
    _sidecar(path).write_text(json.dumps(meta))


def load_volume(path) -> Volume:
    """Load a ``.nii`` or ``.vol`` file into a :class:`Volume`."""
    path = Path(path)
    if path.suffix == ".nii":
        return _load_nifti(path)
    if path.suffix == ".vol":
        values, dims, spacing = _read_raw(path, 1)
        return Volume.from_flat(values, dims, spacing)
    raise VolumeError(f"unrecognised volume extension {path.suffix!r} (expected .nii or .vol)")


def save_volume(v: Volume, path) -> None:
    """Write ``v`` as float32 NIfTI-1 or raw, chosen by the extension of ``path``."""
    if not isinstance(v, Volume):
        v = Volume(v)
    path = Path(path)
    if path.suffix == ".nii":
        _save_nifti(v, path)
    elif path.suffix == ".vol":
        _write_raw(path, v.flat(), v.dims, v.spacing, 1)
    else:
        raise VolumeError(f"unrecognised volume extension {path.suffix!r} (expected .nii or .vol)")


def save_dvf(u: DeformationField, path, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a displacement field as three concatenated raw channels."""
    if not isinstance(u, DeformationField):
        u = DeformationField(u)
    path = Path(path)
    flat = np.concatenate([u.data[c].ravel(order="F") for c in range(3)])
    _write_raw(path, flat, u.dims, spacing, 3)


def load_dvf(path) -> DeformationField:
    values, dims, _ = _read_raw(Path(path), 3)
    n = int(np.prod(dims))
    return DeformationField(
        np.stack([values[c * n : (c + 1) * n].reshape(dims, order="F") for c in range(3)])
    )
