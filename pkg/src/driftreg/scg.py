"""Self-constructing graph latents.

Pooled feature maps are turned into per-node Gaussian parameters (mean and
log standard deviation), a reparameterised embedding ``Z``, and an adjacency
``A = relu(Z Z^T)``.  Feature maps are channels-first arrays ``(c, h, w, d)``;
node ``k`` of a flattened map is spatial position ``k`` in x-fastest order.

Nothing here is trained: parameters come from a seeded He initialisation and
the KL term is reported and summed into the objective as a constant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import _values

__all__ = [
    "ScgParams",
    "ScgLatent",
    "init_params",
    "adaptive_pool",
    "conv3d_same",
    "latent_params",
    "reparameterize",
    "adjacency",
    "kl_loss",
    "residual_embedding",
    "scg_forward",
    "scg_term",
]


class ScgError(ValueError):
    pass


@dataclass(frozen=True)
class ScgParams:
    """Kernels for the mean (3x3x3) and spread (1x1x1) convolutions.

    ``conv3`` has shape ``(3, 3, 3, c_in, c)``, ``conv1`` shape ``(c_in, c)``.
    """

    conv3: np.ndarray
    bias3: np.ndarray
    conv1: np.ndarray
    bias1: np.ndarray

    def __post_init__(self):
        c_in, c = self.conv1.shape
        if self.conv3.shape != (3, 3, 3, c_in, c):
            raise ScgError(f"conv3 shape {self.conv3.shape} inconsistent with conv1 {self.conv1.shape}")
        if self.bias3.shape != (c,) or self.bias1.shape != (c,):
            raise ScgError("bias shapes must be (c,)")
        for arr in (self.conv3, self.bias3, self.conv1, self.bias1):
            if not np.all(np.isfinite(arr)):
                raise ScgError("non-finite SCG parameter")

    @property
    def c_in(self):
        return self.conv1.shape[0]

    @property
    def c(self):
        return self.conv1.shape[1]

    @classmethod
    def zeros(cls, c_in, c):
        return cls(np.zeros((3, 3, 3, c_in, c)), np.zeros(c), np.zeros((c_in, c)), np.zeros(c))


@dataclass(frozen=True)
class ScgLatent:
    mean: np.ndarray
    log_sigma: np.ndarray
    z: np.ndarray
    adjacency: np.ndarray
    kl: float
    residual: np.ndarray

    @property
    def n(self):
        return self.mean.shape[0]

    @property
    def c(self):
        return self.mean.shape[1]


def init_params(c_in=2, c=8, seed=0):
    """He-initialised parameters (normal, std ``sqrt(2 / fan_in)``), zero biases."""
    rng = np.random.default_rng(seed)
    conv3 = rng.standard_normal((3, 3, 3, c_in, c)) * np.sqrt(2.0 / (27 * c_in))
    conv1 = rng.standard_normal((c_in, c)) * np.sqrt(2.0 / c_in)
    return ScgParams(conv3, np.zeros(c), conv1, np.zeros(c))


def _bin_edges(n_in, n_out):
    i = np.arange(n_out)
    start = (i * n_in) // n_out
    stop = -((-(i + 1) * n_in) // n_out)  # ceil
    return start, stop


def adaptive_pool(fm, target):
    """Average-pool ``(c, h, w, d)`` features onto ``target`` spatial dims.

    Bin ``i`` along an axis of length ``n`` covers ``floor(i n / t)`` up to
    ``ceil((i + 1) n / t)``, so bins may overlap when ``t`` does not divide ``n``.
    """
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 4:
        raise ScgError(f"feature map must be (c, h, w, d), got shape {fm.shape}")
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t < 1 for t in target):
        raise ScgError(f"pool target must be 3 positive ints, got {target}")
    if any(t > s for t, s in zip(target, fm.shape[1:])):
        raise ScgError(f"pool target {target} larger than source {fm.shape[1:]}")
    out = fm
    for ax, t in enumerate(target, start=1):
        start, stop = _bin_edges(out.shape[ax], t)
        parts = [
            np.take(out, np.arange(a, b), axis=ax).mean(axis=ax, keepdims=True)
            for a, b in zip(start, stop)
        ]
        out = np.concatenate(parts, axis=ax)
    return out


def conv3d_same(fm, kernel, bias):
    """3x3x3 cross-correlation with zero padding; ``kernel`` is ``(3, 3, 3, c_in, c_out)``."""
    c_in, h, w, d = fm.shape
    padded = np.pad(fm, ((0, 0), (1, 1), (1, 1), (1, 1)))
    out = np.zeros((kernel.shape[-1], h, w, d))
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                patch = padded[:, dx : dx + h, dy : dy + w, dz : dz + d]
                out += np.einsum("ixyz,io->oxyz", patch, kernel[dx, dy, dz])
    return out + bias[:, None, None, None]


def _flatten_nodes(x):
    """``(c, h, w, d)`` -> ``(n, c)`` with nodes in x-fastest order."""
    c = x.shape[0]
    return x.reshape(c, -1, order="F").T.copy()


def latent_params(fm, p: ScgParams):
    """Node means from the 3x3x3 conv and log std from ``log(softplus(1x1x1 conv))``."""
    fm = np.asarray(fm, dtype=np.float64)
    if fm.ndim != 4 or fm.shape[0] != p.c_in:
        raise ScgError(f"feature map {fm.shape} does not match {p.c_in} input channels")
    mean = _flatten_nodes(conv3d_same(fm, p.conv3, p.bias3))
    pre = np.einsum("ixyz,io->oxyz", fm, p.conv1) + p.bias1[:, None, None, None]
    log_sigma = np.log(np.logaddexp(0.0, _flatten_nodes(pre)))
    return mean, log_sigma


def _same_shape(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ScgError(f"shape mismatch: {shape} vs {a.shape}")


def reparameterize(mean, log_sigma, noise):
    """``Z = M + sigma * noise`` elementwise."""
    mean, log_sigma, noise = (np.asarray(x, dtype=np.float64) for x in (mean, log_sigma, noise))
    _same_shape(mean, log_sigma, noise)
    return mean + np.exp(log_sigma) * noise


def adjacency(z):
    """Symmetric nonnegative node affinity ``max(0, Z Z^T)``."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ScgError(f"Z must be an n x c matrix, got shape {z.shape}")
    a = np.maximum(z @ z.T, 0.0)
    # enforce exact symmetry regardless of BLAS accumulation order
    return np.triu(a) + np.triu(a, 1).T


def kl_loss(mean, log_sigma, variant="standard"):
    """KL term averaged over the ``n x c`` latent entries.

    ``standard`` is the Gaussian-prior KL ``-1/(2nc) sum(1 + 2 log s - M^2 - s^2)``.
    ``literal`` evaluates ``-1/(2nc) sum(1 + (log s)^2 M^2 s^2)``, the
    alternative algebraic reading, kept for comparison.
    """
    mean = np.asarray(mean, dtype=np.float64)
    log_sigma = np.asarray(log_sigma, dtype=np.float64)
    _same_shape(mean, log_sigma)
    norm = -1.0 / (2.0 * mean.size)
    sigma2 = np.exp(2.0 * log_sigma)
    if variant == "standard":
        return float(norm * np.sum(1.0 + 2.0 * log_sigma - mean * mean - sigma2))
    if variant == "literal":
        return float(norm * np.sum(1.0 + log_sigma * log_sigma * mean * mean * sigma2))
    raise ScgError(f"unknown KL variant {variant!r}")


def residual_embedding(mean, log_sigma):
    """``M * (1 - log sigma)`` elementwise."""
    mean = np.asarray(mean, dtype=np.float64)
    log_sigma = np.asarray(log_sigma, dtype=np.float64)
    _same_shape(mean, log_sigma)
    return mean * (1.0 - log_sigma)


def scg_forward(f, m, p: ScgParams, pool_target=(4, 4, 4), seed=0):
    """Run the full latent pipeline on the two-channel stack ``(f, m)``."""
    f, m = _values(f), _values(m)
    if f.shape != m.shape:
        raise ScgError(f"dimension mismatch: {f.shape} vs {m.shape}")
    pooled = adaptive_pool(np.stack([f, m]), pool_target)
    mean, log_sigma = latent_params(pooled, p)
    noise = np.random.default_rng(seed).standard_normal(mean.shape)
    z = reparameterize(mean, log_sigma, noise)
    return ScgLatent(
        mean=mean,
        log_sigma=log_sigma,
        z=z,
        adjacency=adjacency(z),
        kl=kl_loss(mean, log_sigma),
        residual=residual_embedding(mean, log_sigma),
    )


def scg_term(f, m, p: ScgParams, pool_target=(4, 4, 4), seed=0):
    """Scalar graph-latent loss for the ordered pair ``(f, m)`` (standard KL)."""
    return scg_forward(f, m, p, pool_target, seed).kl
