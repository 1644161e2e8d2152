"""Trilinear spatial transformer.

``warp(m, u)(x) = m(x + u(x))`` (pull convention), displacements in voxel
units, sample positions clamped to the grid.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from ._kernels import trilinear
from .volume import DeformationField, Volume, VolumeError, _values

__all__ = [
    "warp_trilinear",
    "warp_with_jacobian",
    "warp_gradient",
    "warp_nearest",
    "compose",
]


@lru_cache(maxsize=16)
def _grid(shape):
    g = np.indices(shape, dtype=np.float64)
    g.setflags(write=False)
    return g


def _check(m, u):
    if u.ndim != 4 or u.shape[0] != 3:
        raise VolumeError(f"deformation field must have shape (3, X, Y, Z), got {u.shape}")
    if m.shape != u.shape[1:]:
        raise VolumeError(f"dimension mismatch: volume {m.shape} vs field {u.shape[1:]}")


def _sample(m, u, need_jacobian):
    m = np.ascontiguousarray(m, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    out = np.empty(m.shape)
    jac = np.empty((3,) + m.shape) if need_jacobian else np.empty((3, 0, 0, 0))
    trilinear(m, u, out, jac, need_jacobian)
    return out, (jac if need_jacobian else None)


def warp_trilinear(m, u):
    """Resample ``m`` at ``x + u(x)`` with trilinear interpolation.

    Returns a :class:`Volume` when ``m`` is one, otherwise an ndarray.
    """
    mv, uv = _values(m), _values(u)
    _check(mv, uv)
    out, _ = _sample(mv, uv, False)
    if isinstance(m, Volume):
        return Volume(out, m.spacing)
    return out


def warp_with_jacobian(m, u):
    """Warped image and its per-voxel derivative w.r.t. each displacement channel.

    ``jac[c, x]`` is ``d warp(m, u)(x) / d u[c, x]``; the warp has no
    cross-voxel dependence, so this diagonal is the whole Jacobian.
    """
    mv, uv = _values(m), _values(u)
    _check(mv, uv)
    return _sample(mv, uv, True)


def warp_gradient(m, u, upstream):
    """Gradient of ``sum(upstream * warp(m, u))`` with respect to ``u``."""
    up = _values(upstream)
    mv = _values(m)
    if up.shape != mv.shape:
        raise VolumeError(f"dimension mismatch: upstream {up.shape} vs volume {mv.shape}")
    _, jac = warp_with_jacobian(mv, u)
    return jac * up


def warp_nearest(labels, u):
    """Nearest-neighbour pull warp for integer label maps (clamp-to-edge)."""
    lab = np.asarray(getattr(labels, "labels", labels))
    uv = _values(u)
    _check(lab, uv)
    p = _grid(lab.shape) + uv
    idx = [
        np.clip(np.floor(p[c] + 0.5), 0, lab.shape[c] - 1).astype(np.intp)
        for c in range(3)
    ]
    return lab[idx[0], idx[1], idx[2]]


def compose(u_ab, u_ba):
    """Field of the round trip: ``u_ba(x) + u_ab(x + u_ba(x))``.

    Warping by the result equals warping by ``u_ab`` and then by ``u_ba``.
    """
    a, b = _values(u_ab), _values(u_ba)
    if a.shape != b.shape:
        raise VolumeError(f"dimension mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    _check(a[0], b)
    out = np.empty_like(b)
    for c in range(3):
        out[c] = b[c] + _sample(a[c], b, False)[0]
    if isinstance(u_ab, DeformationField) or isinstance(u_ba, DeformationField):
        return DeformationField(out)
    return out
