import json
import struct

import numpy as np
import pytest

from driftreg.io import NiftiError, load_dvf, load_volume, read_nifti_header, save_dvf, save_volume
from driftreg.volume import DeformationField, Volume, VolumeError


def nifti_bytes(values, dims, code, spacing=(1.0, 1.0, 1.0), slope=1.0, inter=0.0,
                magic=b"n+1\x00", endian="<", offset=352):
    """Hand-packed NIfTI-1 single file, independent of the package writer."""
    bitpix = {2: 8, 4: 16, 16: 32, 64: 64}[code]
    hdr = bytearray(348)
    struct.pack_into(endian + "i", hdr, 0, 348)
    struct.pack_into(endian + "8h", hdr, 40, 3, *dims, 1, 1, 1, 1)
    struct.pack_into(endian + "hh", hdr, 70, code, bitpix)
    struct.pack_into(endian + "8f", hdr, 76, 1.0, *spacing, 0, 0, 0, 0)
    struct.pack_into(endian + "fff", hdr, 108, float(offset), slope, inter)
    hdr[344:348] = magic
    dtype = {2: "u1", 4: "i2", 16: "f4", 64: "f8"}[code]
    payload = np.asarray(values).ravel(order="F").astype(endian + dtype).tobytes()
    return bytes(hdr) + b"\x00" * (offset - 348) + payload


def test_float32_zeros(tmp_path):
    p = tmp_path / "z.nii"
    p.write_bytes(nifti_bytes(np.zeros(64), (4, 4, 4), 16))
    v = load_volume(p)
    assert v.dims == (4, 4, 4)
    assert np.all(v.data == 0.0)


def test_int16_slope_intercept(tmp_path):
    p = tmp_path / "s.nii"
    raw = np.full((2, 2, 2), 3, dtype=np.int16)
    p.write_bytes(nifti_bytes(raw, (2, 2, 2), 4, slope=2.0, inter=1.0))
    assert np.all(load_volume(p).data == 7.0)


def test_zero_slope_means_unscaled(tmp_path):
    p = tmp_path / "s0.nii"
    p.write_bytes(nifti_bytes(np.full(8, 5, dtype=np.uint8), (2, 2, 2), 2, slope=0.0, inter=9.0))
    assert np.all(load_volume(p).data == 5.0)


def test_uint8_layout_and_spacing(tmp_path):
    p = tmp_path / "u.nii"
    vals = np.arange(24, dtype=np.uint8).reshape(2, 3, 4, order="F")
    p.write_bytes(nifti_bytes(vals, (2, 3, 4), 2, spacing=(0.5, 1.0, 2.0)))
    v = load_volume(p)
    np.testing.assert_array_equal(v.data, vals)
    assert v.spacing == (0.5, 1.0, 2.0)


def test_float64_unsupported(tmp_path):
    p = tmp_path / "d.nii"
    p.write_bytes(nifti_bytes(np.zeros(8), (2, 2, 2), 64))
    with pytest.raises(NiftiError, match="datatype code 64"):
        load_volume(p)


def test_big_endian_rejected(tmp_path):
    p = tmp_path / "be.nii"
    p.write_bytes(nifti_bytes(np.zeros(8), (2, 2, 2), 16, endian=">"))
    with pytest.raises(NiftiError, match="big-endian"):
        load_volume(p)


def test_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "m.nii"
    p.write_bytes(nifti_bytes(np.zeros(8), (2, 2, 2), 16, magic=b"ni1\x00"))
    with pytest.raises(NiftiError, match="magic"):
        load_volume(p)
    p.write_bytes(nifti_bytes(np.zeros(8), (2, 2, 2), 16)[:-4])
    with pytest.raises(NiftiError, match="payload"):
        load_volume(p)
    with pytest.raises(NiftiError, match="too short"):
        read_nifti_header(b"\x00" * 100)


def test_vox_offset_respected(tmp_path):
    p = tmp_path / "o.nii"
    vals = np.arange(8.0)
    p.write_bytes(nifti_bytes(vals, (2, 2, 2), 16, offset=400))
    np.testing.assert_array_equal(load_volume(p).flat(), vals)


@pytest.mark.parametrize("suffix", [".nii", ".vol"])
def test_round_trip(tmp_path, suffix):
    rng = np.random.default_rng(0)
    v = Volume(rng.normal(size=(8, 8, 8)), (0.8, 1.0, 1.2))
    p = tmp_path / f"v{suffix}"
    save_volume(v, p)
    w = load_volume(p)
    assert w.dims == v.dims
    np.testing.assert_allclose(w.spacing, v.spacing, rtol=1e-7)
    np.testing.assert_array_equal(w.data, v.data.astype(np.float32).astype(np.float64))


def test_saved_header_fields(tmp_path):
    p = tmp_path / "h.nii"
    save_volume(Volume(np.ones((3, 4, 5)), (1.0, 2.0, 3.0)), p)
    h = read_nifti_header(p.read_bytes())
    assert (h.datatype, h.dims, h.spacing, h.vox_offset) == (16, (3, 4, 5), (1.0, 2.0, 3.0), 352)


def test_raw_sidecar_format(tmp_path):
    p = tmp_path / "r.vol"
    save_volume(Volume(np.arange(8.0).reshape(2, 2, 2, order="F"), (1.0, 1.0, 2.0)), p)
    assert json.loads(p.with_suffix(".json").read_text()) == {"dims": [2, 2, 2], "spacing": [1.0, 1.0, 2.0]}
    np.testing.assert_array_equal(np.fromfile(p, "<f4"), np.arange(8.0))


def test_raw_size_mismatch(tmp_path):
    p = tmp_path / "r.vol"
    np.zeros(7, "<f4").tofile(p)
    p.with_suffix(".json").write_text(json.dumps({"dims": [2, 2, 2]}))
    with pytest.raises(VolumeError, match="7 values"):
        load_volume(p)
    p.with_suffix(".json").write_text("{not json")
    with pytest.raises(VolumeError, match="malformed sidecar"):
        load_volume(p)


def test_unwritable_location(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        save_volume(Volume(np.zeros((2, 2, 2))), blocker / "v.nii")


def test_nan_rejected_before_write(tmp_path):
    data = np.zeros((2, 2, 2))
    data[0, 0, 0] = np.nan
    with pytest.raises(VolumeError):
        save_volume(data, tmp_path / "nan.nii")
    assert not (tmp_path / "nan.nii").exists()


def test_unknown_extension(tmp_path):
    with pytest.raises(VolumeError, match="extension"):
        save_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "v.img")


def test_dvf_round_trip(tmp_path):
    u = np.random.default_rng(1).normal(size=(3, 4, 5, 6))
    p = tmp_path / "u.vol"
    save_dvf(DeformationField(u), p)
    assert json.loads(p.with_suffix(".json").read_text())["channels"] == 3
    np.testing.assert_array_equal(load_dvf(p).data, u.astype(np.float32).astype(np.float64))
    # channel count is enforced both ways
    with pytest.raises(VolumeError, match="channel"):
        load_volume(p)
