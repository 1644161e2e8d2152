"""Volumes, label maps, deformation fields and their resolution pyramids.

All arrays are indexed ``[x, y, z]``.  When flattened for storage the x index
varies fastest (Fortran order), which is also the NIfTI payload layout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Volume",
    "LabelMap",
    "DeformationField",
    "VolumeError",
    "normalize_zscore",
    "downsample2x",
    "downsample_dvf",
    "block_mean",
]


class VolumeError(ValueError):
    """Invalid volume contents or shape."""


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise VolumeError(f"spacing must be 3 positive finite values, got {spacing}")
    return spacing


@dataclass(frozen=True)
class Volume:
    """A 3D scalar image.

    Parameters
    ----------
    data : ndarray, shape (X, Y, Z)
        Voxel values, stored as float64.
    spacing : tuple of float
        Voxel size in mm along each axis.
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"volume data must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise VolumeError("volume contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self):
        return self.data.shape

    def flat(self):
        """Values in storage order (x fastest)."""
        return self.data.ravel(order="F")

    @classmethod
    def from_flat(cls, values, dims, spacing=(1.0, 1.0, 1.0)):
        values = np.asarray(values)
        dims = tuple(int(d) for d in dims)
        if values.size != int(np.prod(dims)):
            raise VolumeError(f"{values.size} values do not fill dims {dims}")
        return cls(values.reshape(dims, order="F"), spacing)


@dataclass(frozen=True)
class LabelMap:
    """Integer segmentation with classes ``0..num_classes-1`` (0 is background)."""

    labels: np.ndarray
    num_classes: int = field(default=0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise VolumeError(f"label map must be 3D, got shape {labels.shape}")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise VolumeError("label map contains non-integer values")
        labels = labels.astype(np.int64)
        if labels.size and labels.min() < 0:
            raise VolumeError("label values must be non-negative")
        k = int(self.num_classes) or int(labels.max()) + 1
        if labels.max() >= k:
            raise VolumeError(f"label {labels.max()} outside 0..{k - 1}")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "num_classes", k)

    @property
    def dims(self):
        return self.labels.shape


@dataclass(frozen=True)
class DeformationField:
    """Dense displacement field in voxel units.

    ``data[c, x, y, z]`` is the displacement along axis ``c`` at voxel
    ``(x, y, z)``; channels are ordered (ux, uy, uz).
    """

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[0] != 3:
            raise VolumeError(f"deformation field must have shape (3, X, Y, Z), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise VolumeError("deformation field contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self):
        return self.data.shape[1:]

    @classmethod
    def zeros(cls, dims):
        return cls(np.zeros((3,) + tuple(dims)))


def _values(v):
    """Underlying ndarray of a Volume/DeformationField, or the array itself."""
    return np.asarray(getattr(v, "data", v), dtype=np.float64)


def normalize_zscore(v):
    """Shift and scale intensities to zero mean and unit (population) std."""
    x = _values(v)
    if x.size < 2:
        raise VolumeError("z-score needs at least two voxels")
    mu = x.mean()
    sd = np.sqrt(np.mean((x - mu) ** 2))
    if not sd > 0:
        raise VolumeError("cannot z-score a zero-variance volume")
    out = (x - mu) / sd
    if isinstance(v, Volume):
        return Volume(out, v.spacing)
    return out


def block_mean(x):
    """Mean over non-overlapping 2x2x2 blocks of the last three axes."""
    *lead, nx, ny, nz = x.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise VolumeError(f"dims {(nx, ny, nz)} must all be even to downsample")
    b = x.reshape(*lead, nx // 2, 2, ny // 2, 2, nz // 2, 2)
    # fixed summation order keeps results reproducible
    s = b[..., 0, :, 0, :, 0] + b[..., 1, :, 0, :, 0]
    s = s + b[..., 0, :, 1, :, 0] + b[..., 1, :, 1, :, 0]
    s = s + b[..., 0, :, 0, :, 1] + b[..., 1, :, 0, :, 1]
    s = s + b[..., 0, :, 1, :, 1] + b[..., 1, :, 1, :, 1]
    return s * 0.125


def block_mean_adjoint(g):
    """Transpose of :func:`block_mean`: spread each coarse value over its block."""
    for ax in (-3, -2, -1):
        g = np.repeat(g, 2, axis=ax)
    return g * 0.125


def downsample2x(v):
    """Halve each dimension by 2x2x2 block averaging; spacing doubles."""
    x = _values(v)
    out = block_mean(x)
    if isinstance(v, Volume):
        return Volume(out, tuple(2 * s for s in v.spacing))
    return out


def downsample_dvf(u):
    """Block-average a displacement field and rescale it to coarse voxel units."""
    x = _values(u)
    out = 0.5 * block_mean(x)
    if isinstance(u, DeformationField):
        return DeformationField(out)
    return out
