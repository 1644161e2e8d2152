"""Synthetic phantoms with known deformations.

A phantom is a cube with four nested classes (background, outer shell,
interior blob, bright core) whose mean intensities increase with the label.
Smooth texture and mild noise give the registration something to lock onto
inside each class.

``make_pair`` returns a ground-truth field ``gt`` in the engine's pull
convention: ``warp(moving, gt) ~= fixed``, so a successful registration of
``(fixed, moving)`` recovers ``u_mf ~= gt``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import DeformationField, LabelMap, Volume, VolumeError, _values
from .warp import _sample, warp_nearest, warp_trilinear

__all__ = [
    "PhantomSpec",
    "make_phantom",
    "make_deformation",
    "make_pair",
    "invert_field",
    "dvf_endpoint_error",
    "intensity_remap",
    "CLASS_MEANS",
]

CLASS_MEANS = (0.0, 0.35, 0.65, 1.0)
NOISE_FRACTION = 0.02
TEXTURE_AMPLITUDE = 0.06


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 32
    seed: int = 0
    kind: str = "gaussian_bumps"
    max_displacement: float = 3.0
    bumps: int = 4
    direction: tuple = field(default=(1.0, 0.0, 0.0))

    def __post_init__(self):
        if self.kind not in ("gaussian_bumps", "uniform_shift"):
            raise VolumeError(f"unknown deformation kind {self.kind!r}")
        if not 0 <= self.max_displacement < self.size / 4:
            raise VolumeError(
                f"max displacement {self.max_displacement} must lie in [0, size/4 = {self.size / 4})"
            )
        if self.bumps < 1:
            raise VolumeError("bump count must be >= 1")


def _coords(size):
    g = np.indices((size,) * 3, dtype=np.float64)
    return (g - (size - 1) / 2.0) / size


def _smooth_field(rng, size, sigma):
    t = ndimage.gaussian_filter(rng.standard_normal((size,) * 3), sigma, mode="wrap")
    return t / t.std()


def make_phantom(spec: PhantomSpec = PhantomSpec()):
    """Deterministic 4-class volume and its label map."""
    size = spec.size
    if size < 16:
        raise VolumeError(f"phantom size must be >= 16, got {size}")
    rng = np.random.default_rng([spec.seed, 0])
    p = _coords(size)

    def ellipsoid(radii, centre, wobble):
        q = sum(((p[i] - centre[i]) / radii[i]) ** 2 for i in range(3))
        return q + wobble * _smooth_field(rng, size, size / 8) < 1.0

    labels = np.zeros((size,) * 3, dtype=np.int64)
    shell = ellipsoid(np.array([0.42, 0.38, 0.40]) * rng.uniform(0.95, 1.05, 3), [0, 0, 0], 0.08)
    blob = ellipsoid(np.array([0.28, 0.24, 0.26]) * rng.uniform(0.9, 1.1, 3), rng.uniform(-0.04, 0.04, 3), 0.12)
    core = ellipsoid(np.array([0.12, 0.14, 0.11]) * rng.uniform(0.9, 1.1, 3), rng.uniform(-0.06, 0.06, 3), 0.15)
    labels[shell] = 1
    labels[blob & shell] = 2
    labels[core & blob & shell] = 3

    img = np.asarray(CLASS_MEANS)[labels]
    img = ndimage.gaussian_filter(img, 0.8, mode="nearest")
    img = img + TEXTURE_AMPLITUDE * _smooth_field(rng, size, 1.5)
    rng_noise = np.random.default_rng([spec.seed, 1])
    span = img.max() - img.min()
    img = img + NOISE_FRACTION * span * rng_noise.standard_normal(img.shape)
    return Volume(img), LabelMap(labels, num_classes=4)


def make_deformation(spec: PhantomSpec = PhantomSpec()) -> DeformationField:
    """Ground-truth field with ``max |u| == spec.max_displacement``."""
    size = spec.size
    if spec.max_displacement == 0:
        return DeformationField.zeros((size,) * 3)
    if spec.kind == "uniform_shift":
        d = np.asarray(spec.direction, dtype=np.float64)
        d = d / np.linalg.norm(d) * spec.max_displacement
        return DeformationField(np.broadcast_to(d[:, None, None, None], (3,) + (size,) * 3))

    rng = np.random.default_rng([spec.seed, 2])
    g = np.indices((size,) * 3, dtype=np.float64)
    u = np.zeros((3,) + (size,) * 3)
    for _ in range(spec.bumps):
        centre = rng.uniform(0.3, 0.7, 3) * (size - 1)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        width = rng.uniform(0.2, 0.3) * size
        r2 = sum((g[i] - centre[i]) ** 2 for i in range(3))
        u += direction[:, None, None, None] * np.exp(-r2 / (2 * width * width))
    norm = np.sqrt(np.sum(u * u, axis=0))
    u *= spec.max_displacement / norm.max()
    return DeformationField(u)


def invert_field(u, iterations=60):
    """Fixed-point inverse ``v(y) = -u(y + v(y))`` of the map ``x -> x + u(x)``."""
    u = _values(u)
    v = -u.copy()
    for _ in range(iterations):
        v = -np.stack([_sample(u[c], v, False)[0] for c in range(3)])
    return v


def make_pair(spec: PhantomSpec = PhantomSpec()):
    """``(fixed, moving, gt, labels_fixed, labels_moving)`` with ``warp(moving, gt) ~= fixed``."""
    fixed, labels = make_phantom(spec)
    gt = make_deformation(spec)
    if spec.max_displacement == 0:
        return fixed, fixed, gt, labels, labels
    inv = invert_field(gt.data)
    moving = warp_trilinear(fixed, inv)
    labels_moving = LabelMap(warp_nearest(labels, inv), num_classes=labels.num_classes)
    return fixed, moving, gt, labels, labels_moving


def intensity_remap(v, strength=3.0):
    """Monotone, nonlinear contrast change ``(exp(s x') - 1) / (exp(s) - 1)`` on min-max scaled ``x'``."""
    x = _values(v)
    x = (x - x.min()) / (x.max() - x.min())
    out = np.expm1(strength * x) / np.expm1(strength)
    if isinstance(v, Volume):
        return Volume(out, v.spacing)
    return out


def dvf_endpoint_error(est, gt, margin=2):
    """Mean and max endpoint error ``|est - gt|`` over voxels at least ``margin`` from the border."""
    a, b = _values(est), _values(gt)
    if a.shape != b.shape:
        raise VolumeError(f"dimension mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    sl = (slice(None),) + tuple(slice(margin, n - margin) for n in a.shape[1:])
    d = a[sl] - b[sl]
    err = np.sqrt(np.sum(d * d, axis=0))
    return float(err.mean()), float(err.max())
