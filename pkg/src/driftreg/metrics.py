"""Evaluation metrics for registered volumes."""
from __future__ import annotations

import math

import numpy as np

from .volume import LabelMap, VolumeError, _values

__all__ = [
    "MetricError",
    "TTestResult",
    "pcc",
    "dice",
    "kld_joint",
    "kld_from_histograms",
    "ssim",
    "mse_metric",
    "welch_ttest",
    "betainc",
    "segment_intensity",
    "evaluate",
    "INTERMODAL_METRICS",
]

INTERMODAL_METRICS = ("pcc", "dice", "kld")


class MetricError(ValueError):
    pass


def _pair(a, b):
    a, b = _values(a), _values(b)
    if a.shape != b.shape:
        raise VolumeError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return a, b


def pcc(a, b):
    """Sample Pearson correlation, ``1/(N-1) sum z_a z_b`` with ``ddof=1`` std."""
    a, b = _pair(a, b)
    da = a - a.mean()
    db = b - b.mean()
    n = a.size
    sa = np.sqrt(np.sum(da * da) / (n - 1))
    sb = np.sqrt(np.sum(db * db) / (n - 1))
    if not (sa > 0 and sb > 0):
        raise MetricError("PCC is undefined for a constant input")
    return float(np.sum((da / sa) * (db / sb)) / (n - 1))


def mse_metric(a, b):
    a, b = _pair(a, b)
    d = a - b
    return float(np.mean(d * d))


def dice(x, y):
    """Per-class Dice over labels ``0..K-1`` and their unweighted mean.

    A class absent from both maps scores 1.
    """
    if not isinstance(x, LabelMap):
        x = LabelMap(x)
    if not isinstance(y, LabelMap):
        y = LabelMap(y)
    if x.dims != y.dims:
        raise VolumeError(f"dimension mismatch: {x.dims} vs {y.dims}")
    if x.num_classes != y.num_classes:
        raise MetricError(f"label alphabets differ: {x.num_classes} vs {y.num_classes} classes")
    k = x.num_classes
    xs = np.bincount(x.labels.ravel(), minlength=k)
    ys = np.bincount(y.labels.ravel(), minlength=k)
    same = x.labels == y.labels
    inter = np.bincount(x.labels[same], minlength=k)
    per_class = {}
    for c in range(k):
        denom = xs[c] + ys[c]
        per_class[c] = 1.0 if denom == 0 else float(2.0 * inter[c] / denom)
    return per_class, float(np.mean(list(per_class.values())))


def kld_from_histograms(p_obs, p_exp, eps=1e-10):
    """``sum p_o log(p_o / p_e)`` after adding ``eps`` to every cell and renormalising."""
    po = np.asarray(p_obs, dtype=np.float64) + eps
    pe = np.asarray(p_exp, dtype=np.float64) + eps
    if po.shape != pe.shape:
        raise MetricError(f"histogram shapes differ: {po.shape} vs {pe.shape}")
    po /= po.sum()
    pe /= pe.sum()
    return float(np.sum(po * np.log(po / pe)))


def _edges(values, bins):
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    return np.linspace(lo, hi, bins + 1)


def kld_joint(a, b_obs, b_exp, bins=32):
    """KL distance between the joint histograms of ``(a, b_obs)`` and ``(a, b_exp)``.

    Both histograms share bin edges: ``a``'s range on one axis and the
    combined range of ``b_obs`` and ``b_exp`` on the other.
    """
    if int(bins) != bins or bins < 2:
        raise MetricError(f"bins must be an integer >= 2, got {bins}")
    a, b_obs = _pair(a, b_obs)
    _, b_exp = _pair(a, b_exp)
    ea = _edges(a, int(bins))
    eb = _edges(np.concatenate([b_obs.ravel(), b_exp.ravel()]), int(bins))
    h_obs, _, _ = np.histogram2d(a.ravel(), b_obs.ravel(), bins=(ea, eb))
    h_exp, _, _ = np.histogram2d(a.ravel(), b_exp.ravel(), bins=(ea, eb))
    return kld_from_histograms(h_obs / h_obs.sum(), h_exp / h_exp.sum())


def _window_sums(x, w):
    """Sums over every fully-contained ``w^3`` window."""
    for ax in range(3):
        c = np.cumsum(x, axis=ax)
        pad = [(0, 0)] * 3
        pad[ax] = (1, 0)
        c = np.pad(c, pad)
        n = c.shape[ax]
        x = np.take(c, np.arange(w, n), axis=ax) - np.take(c, np.arange(0, n - w), axis=ax)
    return x


def ssim(a, b, window=7):
    """Mean SSIM over all fully-contained ``window^3`` windows.

    ``c1 = (0.01 L)^2``, ``c2 = (0.03 L)^2`` with ``L`` the joint intensity
    range of both volumes; window variances use ``N - 1``.
    """
    a, b = _pair(a, b)
    if min(a.shape) < window:
        raise MetricError(f"volume {a.shape} smaller than the {window}^3 SSIM window")
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    L = hi - lo
    if L == 0:
        return 1.0
    c1 = (0.01 * L) ** 2
    c2 = (0.03 * L) ** 2
    n = window ** 3
    mu_a = _window_sums(a, window) / n
    mu_b = _window_sums(b, window) / n
    # second moments on centred data to limit cancellation
    ca = a - a.mean()
    cb = b - b.mean()
    sa = _window_sums(ca, window)
    sb = _window_sums(cb, window)
    var_a = (_window_sums(ca * ca, window) - sa * sa / n) / (n - 1)
    var_b = (_window_sums(cb * cb, window) - sb * sb / n) / (n - 1)
    cov = (_window_sums(ca * cb, window) - sa * sb / n) / (n - 1)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------- statistics


def _betacf(a, b, x, tol=1e-15, max_iter=10000):
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise MetricError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a, b, x):
    """Regularised incomplete beta ``I_x(a, b)``."""
    if not (a > 0 and b > 0):
        raise MetricError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


class TTestResult:
    """Welch t statistic, two-sided p-value and degrees of freedom.

    Unpacks as ``(t, p)``.
    """

    __slots__ = ("t", "p", "df")

    def __init__(self, t, p, df):
        self.t, self.p, self.df = t, p, df

    def __iter__(self):
        return iter((self.t, self.p))

    def __repr__(self):
        return f"TTestResult(t={self.t!r}, p={self.p!r}, df={self.df!r})"


def welch_ttest(xs, ys):
    """Two-sided Welch t-test for unequal variances."""
    x = np.asarray(xs, dtype=np.float64).ravel()
    y = np.asarray(ys, dtype=np.float64).ravel()
    if x.size < 2 or y.size < 2:
        raise MetricError("each sample needs at least two values")
    vx = x.var(ddof=1) / x.size
    vy = y.var(ddof=1) / y.size
    se2 = vx + vy
    if se2 == 0:
        raise MetricError("t statistic undefined: both samples have zero variance")
    t = float((x.mean() - y.mean()) / math.sqrt(se2))
    df = float(se2 * se2 / (vx * vx / (x.size - 1) + vy * vy / (y.size - 1)))
    p = betainc(df / 2.0, 0.5, df / (df + t * t))
    return TTestResult(t, min(1.0, p), df)


# ---------------------------------------------------------------- segmentation


def segment_intensity(v, k=4, seed=0, max_iter=100, tol=1e-6):
    """Seeded 1D k-means on intensities; labels ordered by ascending class mean."""
    x = _values(v).ravel()
    if k < 2:
        raise MetricError(f"class count must be >= 2, got {k}")
    distinct = np.unique(x)
    if distinct.size < k:
        raise MetricError(f"{distinct.size} distinct intensities cannot form {k} classes")
    rng = np.random.default_rng(seed)
    # k-means++ seeding on the distinct values
    centres = [distinct[rng.integers(distinct.size)]]
    for _ in range(1, k):
        d2 = np.min((distinct[:, None] - np.array(centres)[None, :]) ** 2, axis=1)
        centres.append(distinct[rng.choice(distinct.size, p=d2 / d2.sum())])
    centres = np.sort(np.array(centres))
    for _ in range(max_iter):
        assign = np.argmin(np.abs(x[:, None] - centres[None, :]), axis=1)
        counts = np.bincount(assign, minlength=k)
        sums = np.bincount(assign, weights=x, minlength=k)
        new = centres.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled]
        for c in np.flatnonzero(~filled):
            new[c] = x[np.argmax(np.min(np.abs(x[:, None] - new[None, filled]), axis=1))]
        shift = np.max(np.abs(new - centres))
        centres = new
        if shift < tol:
            break
    assign = np.argmin(np.abs(x[:, None] - centres[None, :]), axis=1)
    order = np.argsort(centres, kind="stable")
    rank = np.empty(k, dtype=np.int64)
    rank[order] = np.arange(k)
    shape = _values(v).shape
    return LabelMap(rank[assign].reshape(shape), num_classes=k)


# ---------------------------------------------------------------- report


def evaluate(fixed, registered, labels_fixed=None, labels_registered=None, intermodal=False,
             classes=4, bins=32, seed=0):
    """Metric report comparing a registered volume with the fixed one.

    KLD compares the joint histogram of (fixed, registered) with that of
    (fixed, fixed).  Without label maps, Dice is computed on k-means
    segmentations of both volumes and the report says so.  Intermodal
    reports carry only PCC, Dice and KLD.
    """
    f, r = _pair(fixed, registered)
    report = {
        "pcc": pcc(f, r),
        "kld": kld_joint(f, r, f, bins=bins),
    }
    if not intermodal:
        report["ssim"] = ssim(f, r) if min(f.shape) >= 7 else float("nan")
        report["mse"] = mse_metric(f, r)
    notes = []
    if labels_fixed is None or labels_registered is None:
        labels_fixed = segment_intensity(f, classes, seed)
        labels_registered = segment_intensity(r, classes, seed)
        notes.append(f"dice computed on {classes}-class intensity segmentations (no label maps given)")
    per_class, mean = dice(labels_fixed, labels_registered)
    report["dice"] = mean
    out = {"metrics": report, "dice_per_class": {str(c): v for c, v in per_class.items()},
           "voxels": int(f.size)}
    if notes:
        out["notes"] = notes
    return out
