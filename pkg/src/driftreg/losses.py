"""Objective terms and their gradients with respect to the displacement field.

Similarity functions return ``(score, grad_b)`` where ``grad_b`` is the
derivative with respect to the second (warped) image.  NCC and NMI are
similarities (higher is better); MSE is a distance.  The sign of each term in
an objective is carried by its weight, so a negative weight on NCC turns
alignment into a minimisation problem.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import forward_diff_sq, parzen_joint, parzen_joint_adjoint
from .volume import VolumeError, _values, block_mean_adjoint, downsample2x, downsample_dvf
from .warp import warp_with_jacobian

__all__ = [
    "LossWeights",
    "LossValue",
    "Flags",
    "ncc",
    "local_ncc",
    "mse_sim",
    "nmi",
    "parzen_weights",
    "smoothness",
    "similarity",
    "direct_loss",
    "micdir_loss",
    "MICDIR_WEIGHTS",
]


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha: float = -1.0
    alpha_d: float = 0.0
    beta: float = 0.5
    beta_d: float = 0.0
    lam: float = 0.0

    def __post_init__(self):
        for name in ("alpha", "alpha_d", "beta", "beta_d", "lam"):
            if not np.isfinite(getattr(self, name)):
                raise LossError(f"weight {name} must be finite")


MICDIR_WEIGHTS = LossWeights(alpha=-1.2, alpha_d=-0.6, beta=0.5, beta_d=0.25, lam=5.0)


@dataclass(frozen=True)
class Flags:
    mss: bool = False
    ic: bool = False
    scg: bool = False

    @property
    def any(self):
        return self.mss or self.ic or self.scg


@dataclass
class LossValue:
    """Total objective plus its unweighted terms and the weight of each."""

    total: float
    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    @classmethod
    def assemble(cls, items):
        """Build from ``(name, weight, value)`` triples, summing in the given order."""
        terms, weights = {}, {}
        total = 0.0
        for name, w, v in items:
            terms[name] = float(v)
            weights[name] = float(w)
            total = total + w * v
        return cls(float(total), terms, weights)

    def as_dict(self):
        return {"total": self.total, "terms": dict(self.terms), "weights": dict(self.weights)}


def _pair(a, b):
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise VolumeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------- similarity


def ncc(a, b):
    """Global zero-normalised cross-correlation and its gradient w.r.t. ``b``."""
    a, b = _pair(a, b)
    da = a - a.mean()
    db = b - b.mean()
    saa = np.sum(da * da)
    sbb = np.sum(db * db)
    if not (saa > 0 and sbb > 0):
        raise LossError("NCC is undefined for a zero-variance input")
    sab = np.sum(da * db)
    norm = np.sqrt(saa * sbb)
    score = sab / norm
    # projection form: for b == a the coefficient is exactly 1 and the
    # gradient vanishes bitwise instead of leaving rounding residue
    grad = (da - (sab / sbb) * db) / norm
    return float(score), grad


def _box_sum(x, r):
    """Sum over a (2r+1)^3 window around each voxel, zero outside the grid."""
    out = x
    for ax in range(3):
        n = out.shape[ax]
        pad = [(0, 0)] * 3
        pad[ax] = (1, 0)
        c = np.pad(np.cumsum(out, axis=ax), pad)
        hi = np.minimum(np.arange(n) + r + 1, n)
        lo = np.maximum(np.arange(n) - r, 0)
        out = np.take(c, hi, axis=ax) - np.take(c, lo, axis=ax)
    return out


def local_ncc(a, b, window=9, eps=1e-5):
    """Mean over voxels of squared windowed correlation ``cross^2 / (var_a var_b + eps)``."""
    a, b = _pair(a, b)
    if window < 1 or window % 2 == 0:
        raise LossError(f"window must be a positive odd integer, got {window}")
    r = window // 2
    n = _box_sum(np.ones_like(a), r)
    sa, sb = _box_sum(a, r), _box_sum(b, r)
    ma, mb = sa / n, sb / n
    cross = _box_sum(a * b, r) - sa * mb
    va = _box_sum(a * a, r) - sa * ma
    vb = _box_sum(b * b, r) - sb * mb
    den = va * vb + eps
    cc = cross * cross / den
    size = a.size
    alpha = 2.0 * cross / den
    beta = 2.0 * cross * cross * va / (den * den)
    grad = (
        a * _box_sum(alpha, r)
        - _box_sum(alpha * ma, r)
        - b * _box_sum(beta, r)
        + _box_sum(beta * mb, r)
    ) / size
    return float(cc.mean()), grad


def mse_sim(a, b):
    """Mean squared difference and its gradient w.r.t. ``b``."""
    a, b = _pair(a, b)
    d = b - a
    return float(np.mean(d * d)), (2.0 / d.size) * d


def _bspline3(x):
    x = np.abs(x)
    out = np.where(x < 1.0, (4.0 - 6.0 * x * x + 3.0 * x ** 3) / 6.0, 0.0)
    return np.where((x >= 1.0) & (x < 2.0), (2.0 - x) ** 3 / 6.0, out)


def _bspline3_deriv(x):
    s = np.sign(x)
    x = np.abs(x)
    out = np.where(x < 1.0, (-12.0 * x + 9.0 * x * x) / 6.0, 0.0)
    out = np.where((x >= 1.0) & (x < 2.0), -0.5 * (2.0 - x) ** 2, out)
    return s * out


_OFFSETS = (-1, 0, 1, 2)


def parzen_weights(t, width):
    """Normalised cubic B-spline bin weights for continuous bin positions ``t``.

    Returns ``(bins, w, dw)``: four candidate bin indices per sample (lowest
    is ``floor(t) - 1``), their weights summing to one, and ``dw/dt``.
    ``width`` scales the kernel in bin units and must lie in (0, 1].
    """
    base = np.floor(t)
    frac = t - base
    k = np.stack([_bspline3((o - frac) / width) for o in _OFFSETS])
    dk = np.stack([-_bspline3_deriv((o - frac) / width) / width for o in _OFFSETS])
    s = k.sum(axis=0)
    ds = dk.sum(axis=0)
    w = k / s
    dw = (dk * s - k * ds) / (s * s)
    bins = base.astype(np.intp) + np.array(_OFFSETS)[:, None]
    return bins, w, dw


def _to_bins(x, bins):
    lo, hi = x.min(), x.max()
    rng = hi - lo
    if not rng > 0:
        raise LossError("NMI needs inputs with a nonzero intensity range")
    return (x - lo) * ((bins - 1) / rng), rng, int(np.argmin(x)), int(np.argmax(x))


def _entropy(p):
    nz = p[p > 0]
    return -float(np.sum(nz * np.log(nz)))


def nmi(a, b, bins=32, width=0.5):
    """Studholme NMI ``(H(A) + H(B)) / H(A, B)`` with a Parzen-window joint histogram.

    Intensities are min-max mapped onto ``[0, bins - 1]``; each sample spreads
    over neighbouring bins through a cubic B-spline of the given width (in
    bins).  The histogram keeps two guard bins on each side so no mass is
    lost at the ends.  The gradient w.r.t. ``b`` includes the dependence of
    the intensity range on ``b``.
    """
    a, b = _pair(a, b)
    if int(bins) != bins or bins < 2:
        raise LossError(f"bins must be an integer >= 2, got {bins}")
    if not 0 < width <= 1:
        raise LossError(f"Parzen width must lie in (0, 1], got {width}")
    bins = int(bins)
    nb = bins + 4
    ta, _, _, _ = _to_bins(a.ravel(), bins)
    tb, rb, bmin, bmax = _to_bins(b.ravel(), bins)
    n = ta.size
    joint = parzen_joint(ta, tb, float(width), bins + 4, 2) / n
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    ha, hb, hab = _entropy(pa), _entropy(pb), _entropy(joint)
    score = (ha + hb) / hab

    tiny = np.finfo(float).tiny
    la = np.log(np.maximum(pa, tiny))
    lb = np.log(np.maximum(pb, tiny))
    lab = np.log(np.maximum(joint, tiny))
    # d score / d joint[i, j]
    g = (-(la[:, None] + 1.0) - (lb[None, :] + 1.0) + score * (lab + 1.0)) / hab
    dt = parzen_joint_adjoint(ta, tb, float(width), g, 2) / n
    grad = dt * ((bins - 1) / rb)
    # the intensity range moves with the extreme voxels
    grad[bmax] += np.dot(dt, -tb / rb)
    grad[bmin] += np.dot(dt, (tb - (bins - 1)) / rb)
    return float(score), grad.reshape(b.shape)


def similarity(name, a, b, **opts):
    """Dispatch to a similarity by name: ``ncc``, ``lncc``, ``nmi`` or ``mse``."""
    if name == "ncc":
        return ncc(a, b)
    if name == "lncc":
        return local_ncc(a, b, window=opts.get("window", 9))
    if name == "nmi":
        return nmi(a, b, bins=opts.get("bins", 32), width=opts.get("width", 0.5))
    if name == "mse":
        return mse_sim(a, b)
    raise LossError(f"unknown similarity {name!r}")


# ---------------------------------------------------------------- regulariser


def smoothness(u):
    """Mean squared forward difference of the field.

    The sum of squared differences along each axis for each channel is
    divided by ``9 N`` (3 channels x 3 axes x N voxels).
    """
    u = _values(u)
    if u.ndim != 4 or u.shape[0] != 3:
        raise VolumeError(f"deformation field must have shape (3, X, Y, Z), got {u.shape}")
    if min(u.shape[1:]) < 2:
        raise VolumeError(f"smoothness needs at least 2 voxels per axis, got {u.shape[1:]}")
    scale = 1.0 / (9.0 * u[0].size)
    grad = np.zeros_like(u)
    total = forward_diff_sq(np.ascontiguousarray(u), grad, scale)
    return float(total * scale), grad


# ---------------------------------------------------------------- objectives


def _sim_term(sim, sim_opts, fixed, moving, u):
    warped, jac = warp_with_jacobian(moving, u)
    score, gb = similarity(sim, fixed, warped, **sim_opts)
    return score, jac * gb


def direct_loss(f, m, u, sim="ncc", alpha=-1.0, beta=0.5, sim_opts=None):
    """``alpha * sim(f, warp(m, u)) + beta * smoothness(u)`` and its gradient."""
    sim_opts = sim_opts or {}
    u = _values(u)
    s, gs = _sim_term(sim, sim_opts, _values(f), _values(m), u)
    r, gr = smoothness(u)
    value = LossValue.assemble([("sim_mf", alpha, s), ("sm_mf", beta, r)])
    return value, alpha * gs + beta * gr


def _direction(sim, sim_opts, w, mss, fixed, moving, fixed_d, moving_d, u):
    """Terms for one registration direction (moving -> fixed) and the field gradient."""
    s, gs = _sim_term(sim, sim_opts, fixed, moving, u)
    r, gr = smoothness(u)
    grad = w.alpha * gs + w.beta * gr
    out = {"sim": s, "sm": r}
    if mss:
        ud = downsample_dvf(u)
        sd, gsd = _sim_term(sim, sim_opts, fixed_d, moving_d, ud)
        rd, grd = smoothness(ud)
        grad = grad + 0.5 * block_mean_adjoint(w.alpha_d * gsd + w.beta_d * grd)
        out["sim_d"] = sd
        out["sm_d"] = rd
    return out, grad


def micdir_loss(
    f,
    m,
    u_fm,
    u_mf,
    w: LossWeights,
    flags: Flags = Flags(),
    scg_terms=None,
    sim="ncc",
    sim_opts=None,
    pyramid=None,
):
    """Multi-scale, inverse-consistent objective.

    Returns ``(LossValue, grad_fm, grad_mf)``; ``grad_fm`` is ``None`` when
    ``flags.ic`` is off, in which case only the moving -> fixed direction
    contributes.  ``scg_terms`` is the pair ``(scg_fm, scg_mf)`` of
    precomputed graph-latent losses; they add to the total with no field
    gradient.  ``pyramid`` optionally supplies the half-resolution
    ``(f_d, m_d)`` to avoid recomputing them.
    """
    sim_opts = sim_opts or {}
    f, m = _values(f), _values(m)
    u_mf = _values(u_mf)
    if flags.scg and scg_terms is None:
        raise LossError("scg flag set but no scg_terms supplied")
    f_d = m_d = None
    if flags.mss:
        f_d, m_d = pyramid if pyramid is not None else (downsample2x(f), downsample2x(m))

    mf, g_mf = _direction(sim, sim_opts, w, flags.mss, f, m, f_d, m_d, u_mf)
    fm, g_fm = None, None
    if flags.ic:
        fm, g_fm = _direction(sim, sim_opts, w, flags.mss, m, f, m_d, f_d, _values(u_fm))

    items = [("sim_mf", w.alpha, mf["sim"])]
    if fm:
        items.append(("sim_fm", w.alpha, fm["sim"]))
    if flags.mss:
        items.append(("sim_d_mf", w.alpha_d, mf["sim_d"]))
        if fm:
            items.append(("sim_d_fm", w.alpha_d, fm["sim_d"]))
    items.append(("sm_mf", w.beta, mf["sm"]))
    if fm:
        items.append(("sm_fm", w.beta, fm["sm"]))
    if flags.mss:
        items.append(("sm_d_mf", w.beta_d, mf["sm_d"]))
        if fm:
            items.append(("sm_d_fm", w.beta_d, fm["sm_d"]))
    if flags.scg:
        scg_fm, scg_mf = scg_terms
        items.append(("scg_mf", w.lam, scg_mf))
        if fm:
            items.append(("scg_fm", w.lam, scg_fm))
    return LossValue.assemble(items), g_fm, g_mf
