"""Compiled inner loops.  All kernels are serial so results are bitwise reproducible."""
import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _axis(p, n):
    inside = p >= 0.0 and p <= n - 1
    if p < 0.0:
        p = 0.0
    elif p > n - 1:
        p = n - 1.0
    i0 = int(np.floor(p))
    if i0 > n - 2:
        i0 = max(n - 2, 0)
    i1 = min(i0 + 1, n - 1)
    return i0, i1, p - i0, inside


@numba.njit(cache=True)
def trilinear(m, u, out, jac, need_jac):
    """Pull-warp ``m`` by ``u`` into ``out``; fill ``jac`` with d out / d u when asked."""
    nx, ny, nz = m.shape
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                x0, x1, tx, inx = _axis(i + u[0, i, j, k], nx)
                y0, y1, ty, iny = _axis(j + u[1, i, j, k], ny)
                z0, z1, tz, inz = _axis(k + u[2, i, j, k], nz)
                c000 = m[x0, y0, z0]
                c100 = m[x1, y0, z0]
                c010 = m[x0, y1, z0]
                c110 = m[x1, y1, z0]
                c001 = m[x0, y0, z1]
                c101 = m[x1, y0, z1]
                c011 = m[x0, y1, z1]
                c111 = m[x1, y1, z1]
                sx = 1.0 - tx
                a00 = sx * c000 + tx * c100
                a10 = sx * c010 + tx * c110
                a01 = sx * c001 + tx * c101
                a11 = sx * c011 + tx * c111
                sy = 1.0 - ty
                b0 = sy * a00 + ty * a10
                b1 = sy * a01 + ty * a11
                sz = 1.0 - tz
                out[i, j, k] = sz * b0 + tz * b1
                if need_jac:
                    gx = sz * (sy * (c100 - c000) + ty * (c110 - c010)) + tz * (
                        sy * (c101 - c001) + ty * (c111 - c011)
                    )
                    jac[0, i, j, k] = gx if inx else 0.0
                    jac[1, i, j, k] = (sz * (a10 - a00) + tz * (a11 - a01)) if iny else 0.0
                    jac[2, i, j, k] = (b1 - b0) if inz else 0.0


@numba.njit(cache=True)
def forward_diff_sq(u, grad, scale):
    """Sum of squared forward differences of ``u`` along its three spatial axes.

    Accumulates ``scale * d/du`` of that sum into ``grad``.
    """
    nc, nx, ny, nz = u.shape
    total = 0.0
    for c in range(nc):
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    v = u[c, i, j, k]
                    if i + 1 < nx:
                        d = u[c, i + 1, j, k] - v
                        total += d * d
                        g = 2.0 * scale * d
                        grad[c, i + 1, j, k] += g
                        grad[c, i, j, k] -= g
                    if j + 1 < ny:
                        d = u[c, i, j + 1, k] - v
                        total += d * d
                        g = 2.0 * scale * d
                        grad[c, i, j + 1, k] += g
                        grad[c, i, j, k] -= g
                    if k + 1 < nz:
                        d = u[c, i, j, k + 1] - v
                        total += d * d
                        g = 2.0 * scale * d
                        grad[c, i, j, k + 1] += g
                        grad[c, i, j, k] -= g
    return total


@numba.njit(cache=True, inline="always")
def _bspline3(x):
    x = abs(x)
    if x < 1.0:
        return (4.0 - 6.0 * x * x + 3.0 * x * x * x) / 6.0
    if x < 2.0:
        y = 2.0 - x
        return y * y * y / 6.0
    return 0.0


@numba.njit(cache=True, inline="always")
def _bspline3_deriv(x):
    s = 1.0 if x > 0 else (-1.0 if x < 0 else 0.0)
    x = abs(x)
    if x < 1.0:
        return s * (-12.0 * x + 9.0 * x * x) / 6.0
    if x < 2.0:
        y = 2.0 - x
        return -s * 0.5 * y * y
    return 0.0


@numba.njit(cache=True, inline="always")
def _parzen(t, width, w, dw):
    """Fill 4 normalised weights (and d/dt) for bins floor(t)-1 .. floor(t)+2; return floor(t)-1."""
    base = np.floor(t)
    frac = t - base
    s = 0.0
    ds = 0.0
    for o in range(4):
        d = (o - 1 - frac) / width
        w[o] = _bspline3(d)
        dw[o] = -_bspline3_deriv(d) / width
        s += w[o]
        ds += dw[o]
    for o in range(4):
        dw[o] = (dw[o] * s - w[o] * ds) / (s * s)
        w[o] = w[o] / s
    return int(base) - 1


@numba.njit(cache=True)
def parzen_joint(ta, tb, width, nb, pad):
    """Joint histogram (counts) of Parzen-weighted bin positions, ``pad`` guard bins per side."""
    joint = np.zeros((nb, nb))
    wa = np.empty(4)
    wb = np.empty(4)
    dummy = np.empty(4)
    for n in range(ta.size):
        ia = _parzen(ta[n], width, wa, dummy) + pad
        ib = _parzen(tb[n], width, wb, dummy) + pad
        for ka in range(4):
            for kb in range(4):
                joint[ia + ka, ib + kb] += wa[ka] * wb[kb]
    return joint


@numba.njit(cache=True)
def parzen_joint_adjoint(ta, tb, width, g, pad):
    """Per-sample derivative of ``sum(g * joint)`` with respect to ``tb``."""
    out = np.empty(tb.size)
    wa = np.empty(4)
    wb = np.empty(4)
    dwb = np.empty(4)
    dummy = np.empty(4)
    for n in range(ta.size):
        ia = _parzen(ta[n], width, wa, dummy) + pad
        ib = _parzen(tb[n], width, wb, dwb) + pad
        acc = 0.0
        for kb in range(4):
            row = 0.0
            for ka in range(4):
                row += wa[ka] * g[ia + ka, ib + kb]
            acc += row * dwb[kb]
        out[n] = acc
    return out
