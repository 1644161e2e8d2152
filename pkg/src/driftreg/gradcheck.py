"""Finite-difference verification of every analytic gradient in the package.

Each term is evaluated on small seeded random instances.  A sample of
gradient components (those not negligible next to the largest one) is
compared against central differences.  The objectives are piecewise smooth
because trilinear interpolation has kinks at grid lines, so a component
whose forward and backward one-sided differences disagree is treated as
sitting on a kink and skipped.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .losses import MICDIR_WEIGHTS, Flags, direct_loss, micdir_loss, mse_sim, ncc, nmi, smoothness
from .warp import warp_gradient, warp_trilinear

__all__ = ["TERMS", "TermResult", "check_term", "run_gradcheck", "TOLERANCE"]

TOLERANCE = 1e-4
TERMS = ("warp_adjoint", "ncc", "mse", "nmi", "smoothness", "direct_loss", "micdir_loss")
STEP = {"nmi": 1e-5}
DEFAULT_STEP = 1e-6


@dataclass
class TermResult:
    term: str
    max_rel_error: float
    checked: int
    skipped: int
    instances: int

    @property
    def passed(self):
        return self.checked > 0 and self.max_rel_error < TOLERANCE


def _image(rng, shape):
    return ndimage.gaussian_filter(rng.standard_normal(shape), 1.0, mode="nearest")


def _field(rng, shape, amplitude=1.5):
    return rng.uniform(-amplitude, amplitude, (3,) + shape)


def _instance(term, rng, shape):
    """``(fun, x, grad)``: a scalar function of the flat parameter vector, a point, its analytic gradient."""
    if term == "warp_adjoint":
        m, up = _image(rng, shape), rng.standard_normal(shape)
        u = _field(rng, shape)
        return (lambda x: float(np.sum(up * warp_trilinear(m, x))), u, warp_gradient(m, u, up))
    if term == "ncc":
        a, b = _image(rng, shape), _image(rng, shape)
        return (lambda x: ncc(a, x)[0], b, ncc(a, b)[1])
    if term == "mse":
        a, b = _image(rng, shape), _image(rng, shape)
        return (lambda x: mse_sim(a, x)[0], b, mse_sim(a, b)[1])
    if term == "nmi":
        a, b = _image(rng, shape), _image(rng, shape)
        return (lambda x: nmi(a, x, bins=8)[0], b, nmi(a, b, bins=8)[1])
    if term == "smoothness":
        u = _field(rng, shape)
        return (lambda x: smoothness(x)[0], u, smoothness(u)[1])
    if term == "direct_loss":
        f, m = _image(rng, shape), _image(rng, shape)
        u = _field(rng, shape)
        return (lambda x: direct_loss(f, m, x)[0].total, u, direct_loss(f, m, u)[1])
    if term == "micdir_loss":
        f, m = _image(rng, shape), _image(rng, shape)
        flags = Flags(mss=all(n % 2 == 0 for n in shape), ic=True, scg=True)
        scg = (0.3, 0.7)
        u = np.stack([_field(rng, shape), _field(rng, shape)])

        def run(x):
            return micdir_loss(f, m, x[0], x[1], MICDIR_WEIGHTS, flags, scg)

        _, g_fm, g_mf = run(u)
        return (lambda x: run(x)[0].total, u, np.stack([g_fm, g_mf]))
    raise ValueError(f"unknown term {term!r}")


def _compare(fun, x, grad, h, rng, n_components):
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    g = np.asarray(grad, dtype=np.float64).reshape(-1)
    scale = np.max(np.abs(g))
    pool = np.flatnonzero(np.abs(g) >= 1e-3 * scale) if scale > 0 else np.arange(g.size)
    picks = rng.choice(pool, size=min(n_components, pool.size), replace=False)
    f0 = fun(x)
    worst, checked, skipped = 0.0, 0, 0
    for i in picks:
        orig = flat[i]
        flat[i] = orig + h
        fp = fun(x)
        flat[i] = orig - h
        fm = fun(x)
        flat[i] = orig
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if abs(fwd - bwd) > 1e-2 * max(abs(fwd), abs(bwd)):
            skipped += 1
            continue
        num = (fp - fm) / (2 * h)
        denom = max(abs(num), abs(g[i]))
        if denom > 0:
            worst = max(worst, float(abs(num - g[i]) / denom))
        checked += 1
    return worst, checked, skipped


def check_term(term, seed=0, instances=50, sizes=(6, 7, 8), n_components=30, flip_sign=False):
    """Run the FD comparison for one term over ``instances`` random problems."""
    rng = np.random.default_rng([seed, TERMS.index(term)])
    h = STEP.get(term, DEFAULT_STEP)
    worst, checked, skipped = 0.0, 0, 0
    for _ in range(instances):
        n = int(rng.choice(sizes))
        fun, x, grad = _instance(term, rng, (n, n, n))
        if flip_sign:
            grad = -grad
        w, c, s = _compare(fun, x, grad, h, rng, n_components)
        worst, checked, skipped = max(worst, w), checked + c, skipped + s
    return TermResult(term, worst, checked, skipped, instances)


def run_gradcheck(seed=0, instances=50, sizes=(6, 7, 8), terms=TERMS, flip_sign=False):
    return [check_term(t, seed, instances, sizes, flip_sign=flip_sign) for t in terms]
