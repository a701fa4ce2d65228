import gzip
import itertools
import struct

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gliomapred.nifti_io import (
    BadMagicError,
    HeaderDataMismatchError,
    NiftiFileNotFoundError,
    NonFiniteDataError,
    OrientationCode,
    SingularAffineError,
    UnsupportedDatatypeError,
    UnsupportedFormatError,
    Volume,
    affine_to_quaternion,
    load_nifti,
    make_header,
    make_volume,
    orientation_of,
    quaternion_to_affine,
    reorient_to_ras,
    save_nifti,
)
from helpers import perm_flip_affine, random_data, voxel_world

DTYPES = [np.uint8, np.int8, np.int16, np.uint16, np.int32, np.uint32, np.int64,
          np.float32, np.float64]


# -- loading / saving --------------------------------------------------------


def test_round_trip_small_volume_bit_identical(tmp_path, rng):
    data = rng.normal(size=(8, 8, 8))
    vol = make_volume(data)
    back = load_nifti(save_nifti(vol, tmp_path / "v.nii"))
    assert back.data.tobytes() == vol.data.tobytes()
    np.testing.assert_array_equal(back.affine, vol.affine)


def test_gzip_and_plain_copies_load_equal(tmp_path, rng):
    vol = make_volume(random_data(rng, (7, 5, 6), np.int16))
    a = load_nifti(save_nifti(vol, tmp_path / "a.nii"))
    b = load_nifti(save_nifti(vol, tmp_path / "b.nii.gz"))
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.affine, b.affine)
    assert a.header == b.header
    assert a == b


@pytest.mark.parametrize("dtype", DTYPES)
@pytest.mark.parametrize("byteorder", ["<", ">"])
def test_round_trip_dtypes_and_byteorders(tmp_path, rng, dtype, byteorder):
    raw = random_data(rng, (4, 3, 5), dtype)
    vol = make_volume(raw)
    back = load_nifti(save_nifti(vol, tmp_path / "v.nii.gz", byteorder=byteorder))
    assert back.data.dtype == np.float64
    np.testing.assert_array_equal(back.data, raw.astype(np.float64))


def test_gzip_output_is_deterministic(tmp_path, rng):
    vol = make_volume(random_data(rng, (6, 6, 6), np.int16))
    a = save_nifti(vol, tmp_path / "a.nii.gz").read_bytes()
    b = save_nifti(vol, tmp_path / "b.nii.gz").read_bytes()
    assert a == b


def test_nibabel_reads_our_files(tmp_path, rng):
    affine = perm_flip_affine((1, 2, 0), (-1, 1, 1), (1.0, 2.0, 0.5), (10.0, -4.0, 3.0))
    raw = random_data(rng, (5, 4, 3), np.int16)
    path = save_nifti(make_volume(raw, affine), tmp_path / "v.nii.gz")
    img = nib.load(str(path))
    np.testing.assert_array_equal(np.asarray(img.dataobj), raw)
    np.testing.assert_allclose(img.affine, affine, atol=1e-6)


@pytest.mark.parametrize("qform", [False, True])
def test_we_read_nibabel_files(tmp_path, rng, qform):
    affine = perm_flip_affine((0, 2, 1), (1, -1, 1), (0.9, 1.1, 1.3), (-5.0, 2.0, 7.0))
    raw = random_data(rng, (6, 5, 4), np.float32)
    img = nib.Nifti1Image(raw, affine)
    if qform:
        img.set_sform(None, code=0)
        img.set_qform(affine, code=1)
    nib.save(img, str(tmp_path / "n.nii"))
    vol = load_nifti(tmp_path / "n.nii")
    np.testing.assert_array_equal(vol.data, raw.astype(np.float64))
    np.testing.assert_allclose(vol.affine, affine, atol=1e-5)


def test_qform_written_and_read_back(tmp_path):
    affine = perm_flip_affine((2, 0, 1), (-1, -1, 1), (1.0, 1.5, 2.0), (1.0, 2.0, 3.0))
    vol = make_volume(np.arange(24.0).reshape(2, 3, 4), affine)
    back = load_nifti(save_nifti(vol, tmp_path / "q.nii", use_qform=True))
    np.testing.assert_allclose(back.affine, affine, atol=1e-5)


def test_quaternion_round_trip_on_rotation():
    theta = 0.3
    rot = np.array([[np.cos(theta), -np.sin(theta), 0], [np.sin(theta), np.cos(theta), 0], [0, 0, 1]])
    affine = np.eye(4)
    affine[:3, :3] = rot @ np.diag([1.0, 2.0, 3.0])
    affine[:3, 3] = [4, 5, 6]
    b, c, d, qfac, zooms = affine_to_quaternion(affine)
    np.testing.assert_allclose(quaternion_to_affine(b, c, d, qfac, zooms, affine[:3, 3]), affine,
                               atol=1e-12)


def test_no_sform_no_qform_uses_spacing(tmp_path):
    img = nib.Nifti1Image(np.zeros((3, 3, 3), np.float32), np.diag([2.0, 3.0, 4.0, 1.0]))
    img.set_sform(None, code=0)
    img.set_qform(None, code=0)
    nib.save(img, str(tmp_path / "n.nii"))
    vol = load_nifti(tmp_path / "n.nii")
    np.testing.assert_allclose(vol.affine, np.diag([2.0, 3.0, 4.0, 1.0]))


def test_brats_shaped_volume_dims(tmp_path):
    vol = make_volume(np.zeros((240, 240, 155), np.int16))
    back = load_nifti(save_nifti(vol, tmp_path / "t2.nii.gz"))
    assert back.shape == (240, 240, 155)


# -- errors ------------------------------------------------------------------


def _write_raw(path, blob, gz=False):
    if gz:
        with gzip.open(path, "wb") as fh:
            fh.write(blob)
    else:
        path.write_bytes(blob)
    return path


@pytest.fixture
def good_bytes(tmp_path):
    vol = make_volume(np.arange(27, dtype=np.int16).reshape(3, 3, 3))
    return bytearray(save_nifti(vol, tmp_path / "g.nii").read_bytes())


def test_missing_file(tmp_path):
    with pytest.raises(NiftiFileNotFoundError):
        load_nifti(tmp_path / "nope.nii")
    with pytest.raises(FileNotFoundError):
        load_nifti(tmp_path / "nope.nii.gz")


def test_bad_magic(tmp_path, good_bytes):
    good_bytes[344:348] = b"abcd"
    with pytest.raises(BadMagicError):
        load_nifti(_write_raw(tmp_path / "b.nii", bytes(good_bytes)))


def test_pair_files_rejected(tmp_path, good_bytes):
    good_bytes[344:348] = b"ni1\x00"
    with pytest.raises(UnsupportedFormatError):
        load_nifti(_write_raw(tmp_path / "b.nii", bytes(good_bytes)))


def test_nifti2_rejected(tmp_path, good_bytes):
    struct.pack_into("<i", good_bytes, 0, 540)
    with pytest.raises((UnsupportedFormatError, BadMagicError)):
        load_nifti(_write_raw(tmp_path / "b.nii", bytes(good_bytes)))


def test_unsupported_datatype(tmp_path, good_bytes):
    struct.pack_into("<2h", good_bytes, 70, 32, 64)  # complex64
    with pytest.raises(UnsupportedDatatypeError):
        load_nifti(_write_raw(tmp_path / "b.nii", bytes(good_bytes)))


def test_truncated_payload(tmp_path, good_bytes):
    with pytest.raises(HeaderDataMismatchError):
        load_nifti(_write_raw(tmp_path / "b.nii.gz", bytes(good_bytes[:-10]), gz=True))


def test_bitpix_mismatch(tmp_path, good_bytes):
    struct.pack_into("<h", good_bytes, 72, 32)
    with pytest.raises(HeaderDataMismatchError):
        load_nifti(_write_raw(tmp_path / "b.nii", bytes(good_bytes)))


def test_four_d_rejected(tmp_path, good_bytes):
    struct.pack_into("<8h", good_bytes, 40, 4, 3, 3, 1, 3, 1, 1, 1)
    with pytest.raises(UnsupportedFormatError):
        load_nifti(_write_raw(tmp_path / "b.nii", bytes(good_bytes)))


def test_non_finite_data_rejected(tmp_path):
    data = np.zeros((2, 2, 2), np.float32)
    data[0, 0, 0] = np.nan
    nib.save(nib.Nifti1Image(data, np.eye(4)), str(tmp_path / "n.nii"))
    with pytest.raises(NonFiniteDataError):
        load_nifti(tmp_path / "n.nii")


def test_header_invariants():
    with pytest.raises(SingularAffineError):
        make_header((2, 2, 2), np.array([[1.0, 1, 0, 0], [0, 0, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]))
    with pytest.raises(ValueError):
        make_header((0, 2, 2), np.eye(4))
    with pytest.raises(HeaderDataMismatchError):
        Volume(np.zeros((2, 2, 2)), make_header((2, 2, 3), np.eye(4)))


# -- orientation -------------------------------------------------------------


def test_orientation_examples():
    assert orientation_of(np.eye(4)) == ("R", "A", "S")
    assert orientation_of(np.diag([-1.0, -1.0, 1.0, 1.0])) == ("L", "P", "S")
    eye = np.eye(4)
    permuted = eye[:, [1, 2, 0, 3]]  # columns [col1, col2, col0]: i->A, j->S, k->R
    assert orientation_of(permuted) == ("A", "S", "R")
    assert str(orientation_of(np.eye(4))) == "RAS"


def test_orientation_matches_nibabel(rng):
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((1, -1), repeat=3):
            a = perm_flip_affine(perm, signs)
            a[:3, :3] += rng.normal(0, 0.05, (3, 3))  # small obliquity
            assert orientation_of(a) == nib.aff2axcodes(a)


def test_orientation_code_rejects_repeated_axes():
    with pytest.raises(ValueError):
        OrientationCode(("R", "L", "S"))


def test_orientation_singular():
    with pytest.raises(SingularAffineError):
        orientation_of(np.zeros((4, 4)))


def test_ras_volume_is_fixed_point(rng):
    vol = make_volume(rng.normal(size=(4, 5, 6)), np.diag([2.0, 2.0, 2.0, 1.0]))
    assert reorient_to_ras(vol) is vol


def test_lps_volume_flips_first_two_axes(rng):
    data = rng.normal(size=(5, 5, 5))
    lps = perm_flip_affine((0, 1, 2), (-1, -1, 1), offset=(4.0, 4.0, 0.0))
    out = reorient_to_ras(make_volume(data, lps))
    assert orientation_of(out.affine) == "RAS"
    np.testing.assert_array_equal(out.data, data[::-1, ::-1, :])
    w_in, v_in = voxel_world(make_volume(data, lps))
    w_out, v_out = voxel_world(out)
    key_in = {tuple(np.round(w, 9)): v for w, v in zip(w_in, v_in)}
    key_out = {tuple(np.round(w, 9)): v for w, v in zip(w_out, v_out)}
    assert key_in == key_out


def test_reorientation_matches_nibabel(rng):
    data = rng.normal(size=(3, 4, 5))
    affine = perm_flip_affine((2, 0, 1), (1, -1, -1), (1.0, 2.0, 3.0), (1.0, 1.0, 1.0))
    img = nib.as_closest_canonical(nib.Nifti1Image(data, affine))
    out = reorient_to_ras(make_volume(data, affine))
    np.testing.assert_allclose(out.data, np.asarray(img.dataobj))
    np.testing.assert_allclose(out.affine, img.affine, atol=1e-12)


perm_flip = st.tuples(
    st.permutations([0, 1, 2]),
    st.tuples(*[st.sampled_from([1, -1])] * 3),
    st.tuples(*[st.floats(0.5, 3.0)] * 3),
    st.tuples(*[st.floats(-50, 50)] * 3),
    st.tuples(*[st.integers(1, 5)] * 3),
    st.integers(0, 2**32 - 1),
)


@given(perm_flip)
def test_reorientation_properties(args):
    perm, signs, spacing, offset, shape, seed = args
    data = np.random.default_rng(seed).normal(size=shape)
    vol = make_volume(data, perm_flip_affine(perm, signs, spacing, offset))
    out = reorient_to_ras(vol)
    assert orientation_of(out.affine) == "RAS"
    # idempotence
    again = reorient_to_ras(out)
    np.testing.assert_array_equal(again.data, out.data)
    np.testing.assert_array_equal(again.affine, out.affine)
    # voxel conservation
    np.testing.assert_array_equal(np.sort(out.data, axis=None), np.sort(data, axis=None))
    # world coordinates: same value at the same world point, to 1e-9 mm
    w_in, v_in = voxel_world(vol)
    w_out, v_out = voxel_world(out)
    o_in = np.lexsort(np.round(w_in, 6).T)
    o_out = np.lexsort(np.round(w_out, 6).T)
    np.testing.assert_allclose(w_in[o_in], w_out[o_out], atol=1e-9, rtol=0)
    np.testing.assert_array_equal(v_in[o_in], v_out[o_out])


@given(st.sampled_from(DTYPES), st.booleans(), st.sampled_from(["<", ">"]),
       st.tuples(*[st.integers(1, 6)] * 3), st.integers(0, 2**32 - 1))
def test_writer_output_always_loads_back(tmp_path_factory, dtype, gz, order, shape, seed):
    raw = random_data(np.random.default_rng(seed), shape, dtype)
    path = tmp_path_factory.mktemp("rt") / ("v.nii.gz" if gz else "v.nii")
    back = load_nifti(save_nifti(make_volume(raw), path, byteorder=order))
    np.testing.assert_array_equal(back.data, raw.astype(np.float64))
