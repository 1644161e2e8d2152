import numpy as np
import pytest

from driftreg.losses import ncc
from driftreg.phantom import (
    PhantomSpec,
    dvf_endpoint_error,
    intensity_remap,
    invert_field,
    make_deformation,
    make_pair,
    make_phantom,
)
from driftreg.volume import VolumeError
from driftreg.warp import compose, warp_trilinear


def test_deterministic():
    a = make_pair(PhantomSpec(size=16, seed=3, max_displacement=2.0))
    b = make_pair(PhantomSpec(size=16, seed=3, max_displacement=2.0))
    for x, y in zip(a, b):
        assert np.array_equal(np.asarray(getattr(x, "data", getattr(x, "labels", x))),
                              np.asarray(getattr(y, "data", getattr(y, "labels", y))))


def test_four_classes_with_increasing_means():
    v, lab = make_phantom(PhantomSpec(size=32, seed=1))
    assert set(np.unique(lab.labels)) == {0, 1, 2, 3}
    means = [v.data[lab.labels == c].mean() for c in range(4)]
    assert all(a < b for a, b in zip(means, means[1:]))


def test_zero_displacement():
    f, m, gt, lf, lm = make_pair(PhantomSpec(size=16, max_displacement=0.0))
    assert not np.any(gt.data)
    assert np.array_equal(f.data, m.data) and np.array_equal(lf.labels, lm.labels)


def test_uniform_shift_is_constant():
    gt = make_deformation(PhantomSpec(size=16, kind="uniform_shift", max_displacement=2.0,
                                      direction=(0.0, 3.0, 4.0)))
    np.testing.assert_allclose(gt.data[0], 0.0)
    np.testing.assert_allclose(gt.data[1], 1.2)
    np.testing.assert_allclose(gt.data[2], 1.6)


@pytest.mark.parametrize("seed", range(3))
def test_bump_amplitude(seed):
    gt = make_deformation(PhantomSpec(size=24, seed=seed, max_displacement=3.5))
    assert abs(np.sqrt((gt.data ** 2).sum(0)).max() - 3.5) < 1e-9


def test_nonzero_field_changes_image():
    f, m, *_ = make_pair(PhantomSpec(size=24, seed=2))
    assert ncc(f.data, m.data)[0] < 1.0


def test_gt_warps_moving_onto_fixed():
    # pull convention: warping the moving volume by gt recovers the fixed one
    spec = PhantomSpec(size=24, seed=0, kind="uniform_shift", max_displacement=2.0)
    f, m, gt, *_ = make_pair(spec)
    sl = (slice(3, -3),) * 3
    np.testing.assert_allclose(warp_trilinear(m, gt).data[sl], f.data[sl], atol=1e-12)


def test_gt_warps_moving_onto_fixed_bumps():
    f, m, gt, *_ = make_pair(PhantomSpec(size=32, seed=4))
    sl = (slice(4, -4),) * 3
    back = warp_trilinear(m, gt).data[sl]
    # only interpolation blur remains
    assert np.abs(back - f.data[sl]).mean() < 0.02
    assert ncc(back, f.data[sl])[0] > ncc(m.data[sl], f.data[sl])[0]


def test_invert_field_round_trip():
    gt = make_deformation(PhantomSpec(size=24, seed=5, max_displacement=3.0))
    inv = invert_field(gt.data)
    sl = (slice(None),) + (slice(3, -3),) * 3
    assert np.abs(compose(gt.data, inv)[sl]).max() < 1e-3


def test_endpoint_error_examples():
    u = np.zeros((3, 8, 8, 8))
    assert dvf_endpoint_error(u, u) == (0.0, 0.0)
    v = u.copy()
    v[0] = 3.0
    v[1] = 4.0
    assert dvf_endpoint_error(v, u) == (5.0, 5.0)
    w = u.copy()
    w[2, 4, 4, 4] = 2.0
    mean, mx = dvf_endpoint_error(w, u, margin=2)
    assert mx == 2.0 and mean == pytest.approx(2.0 / 64)


def test_endpoint_error_matches_loop():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(2, 3, 7, 6, 8))
    errs = [np.sqrt(sum((a[c, x, y, z] - b[c, x, y, z]) ** 2 for c in range(3)))
            for x in range(1, 6) for y in range(1, 5) for z in range(1, 7)]
    mean, mx = dvf_endpoint_error(a, b, margin=1)
    assert mean == pytest.approx(np.mean(errs), abs=1e-12) and mx == pytest.approx(max(errs), abs=1e-12)


def test_spec_errors():
    with pytest.raises(VolumeError, match="size/4"):
        PhantomSpec(size=16, max_displacement=4.0)
    with pytest.raises(VolumeError, match=">= 16"):
        make_phantom(PhantomSpec(size=12, max_displacement=1.0))
    with pytest.raises(VolumeError, match="kind"):
        PhantomSpec(kind="spiral")


def test_intensity_remap_monotone():
    v, _ = make_phantom(PhantomSpec(size=16))
    r = intensity_remap(v)
    order = np.argsort(v.data.ravel())
    assert np.all(np.diff(r.data.ravel()[order]) >= 0)
    assert r.data.min() == 0.0 and r.data.max() == pytest.approx(1.0)
