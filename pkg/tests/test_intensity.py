import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gliomapred.intensity import (
    IntensityWindow,
    SliceClampWarning,
    SliceExtractionError,
    SliceStack,
    clip_intensity,
    export_stacks,
    extract_slice_stack,
    load_stacks,
    normalize_intensity,
    resize_stack,
    resolve_axis,
    scaled_positions,
    window_volume,
)
from gliomapred.nifti_io import make_volume

W = IntensityWindow()


def vol_of(values):
    return make_volume(np.asarray(values, dtype=float).reshape(-1, 1, 1))


def test_window_defaults_and_guard():
    assert (W.lo, W.hi) == (-1000.0, 800.0)
    with pytest.raises(ValueError):
        IntensityWindow(5.0, 5.0)
    with pytest.raises(ValueError):
        IntensityWindow(10.0, -10.0)


def test_clip_examples():
    out = clip_intensity(vol_of([-2000, 0, 1000]), W).data.ravel()
    np.testing.assert_array_equal(out, [-1000, 0, 800])


def test_normalize_examples():
    out = normalize_intensity(vol_of([-1000, 800, -100]), W).data.ravel()
    assert out[0] == 0.0 and out[1] == 1.0
    assert out[2] == pytest.approx(0.5, abs=1e-15)


def test_normalize_requires_clipped_input():
    with pytest.raises(ValueError):
        normalize_intensity(vol_of([900.0]), W)


finite = st.floats(-5000, 5000, allow_nan=False)


@given(hnp.arrays(np.float64, st.integers(1, 60), elements=finite))
def test_clip_then_normalize_lands_in_unit_interval(values):
    v = np.concatenate([values, [-1000.0, 800.0, -3000.0, 3000.0]])
    out = window_volume(vol_of(v), W).data.ravel()
    assert out.min() == 0.0 and out.max() == 1.0
    assert np.all((out >= 0) & (out <= 1))
    inside = (v >= -1000) & (v <= 800)
    clipped = clip_intensity(vol_of(v), W).data.ravel()
    np.testing.assert_array_equal(clipped[inside], v[inside])


@given(st.floats(-1000, 800), st.floats(-1000, 800))
def test_normalize_is_affine_and_monotone(a, b):
    na, nb = normalize_intensity(vol_of([a, b]), W).data.ravel()
    assert na - nb == pytest.approx((a - b) / 1800.0, abs=1e-12)
    if a < b:
        assert na < nb or (b - a) < 1e-12


def test_axis_names():
    assert resolve_axis("axial") == resolve_axis("z") == resolve_axis(2) == 2
    assert resolve_axis("sagittal") == 0
    with pytest.raises(ValueError):
        resolve_axis(3)


def test_brats_positions_resolve_to_same_indices():
    vol = make_volume(np.zeros((240, 240, 155)))
    stack = extract_slice_stack(vol, (60, 90, 120), 2)
    assert stack.provenance.indices == (60, 90, 120)
    assert stack.pixels.shape == (240, 240, 3)


def test_constant_volume_gives_constant_channels():
    vol = make_volume(np.full((10, 12, 40), 0.25))
    stack = extract_slice_stack(vol, (5, 15, 25), 2)
    assert np.all(stack.pixels == 0.25)


def test_clamped_position_warns():
    vol = make_volume(np.zeros((4, 4, 50)))
    with pytest.warns(SliceClampWarning):
        stack = extract_slice_stack(vol, (0, 30, 60), 2)
    assert stack.provenance.indices == (0, 30, 49)


def test_too_thin_volume_errors():
    vol = make_volume(np.zeros((4, 4, 3)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SliceClampWarning)
        with pytest.raises(SliceExtractionError):
            extract_slice_stack(vol, (60, 90, 120), 2)


def test_non_ras_volume_rejected():
    vol = make_volume(np.zeros((4, 4, 8)), np.diag([-1.0, 1.0, 1.0, 1.0]))
    with pytest.raises(SliceExtractionError):
        extract_slice_stack(vol, (1, 3, 5), 2)


def test_positions_must_increase():
    with pytest.raises(ValueError):
        extract_slice_stack(make_volume(np.zeros((4, 4, 8))), (5, 3, 1), 2)


@given(
    st.integers(0, 2),
    st.tuples(*[st.integers(6, 14)] * 3),
    st.tuples(*[st.floats(0.5, 2.0)] * 3),
    st.floats(-20, 20),
    st.integers(0, 2**32 - 1),
)
def test_channels_are_slabs_and_positions_round_trip(axis, shape, spacing, origin, seed):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0, 1, shape)
    affine = np.diag([*spacing, 1.0])
    affine[:3, 3] = origin
    vol = make_volume(data, affine)
    n = shape[axis]
    idx = sorted(rng.choice(n, 3, replace=False))
    world = [origin + i * spacing[axis] for i in idx]
    positions = [w + rng.uniform(-0.49, 0.49) * spacing[axis] for w in world]
    stack = extract_slice_stack(vol, positions, axis)
    assert list(stack.provenance.indices) == idx
    for k, i in enumerate(idx):
        np.testing.assert_array_equal(stack.pixels[..., k], np.take(data, i, axis=axis))
    for p, q in zip(positions, stack.provenance.positions_mm):
        assert abs(p - q) <= 0.5 * spacing[axis] + 1e-9


def test_slice_stack_invariants():
    from gliomapred.intensity import SliceProvenance

    prov = SliceProvenance("p", "T1", 2, (1, 2, 3), (1.0, 2.0, 3.0))
    with pytest.raises(ValueError):
        SliceStack(np.full((4, 4, 3), 1.5), prov)
    with pytest.raises(ValueError):
        SliceStack(np.zeros((4, 4, 2)), prov)
    with pytest.raises(ValueError):
        SliceStack(np.zeros((4, 4, 3)), SliceProvenance("p", "T1", 2, (3, 2, 1), (1.0, 2.0, 3.0)))


def test_scaled_positions():
    assert scaled_positions(155) == (60.0, 90.0, 120.0)
    assert scaled_positions(64) == (25.0, 37.0, 50.0)


def test_resize_stack_keeps_range():
    vol = make_volume(np.random.default_rng(0).uniform(0, 1, (20, 20, 10)))
    stack = extract_slice_stack(vol, (2, 5, 8), 2)
    out = resize_stack(stack, (32, 32))
    assert out.pixels.shape == (32, 32, 3)
    assert out.pixels.min() >= 0 and out.pixels.max() <= 1


def test_export_round_trip(tmp_path):
    vol = make_volume(np.random.default_rng(1).uniform(0, 1, (6, 7, 10)))
    stacks = [extract_slice_stack(vol, (2, 5, 8), 2, patient_id="P1", modality=m)
              for m in ("T1", "FLAIR")]
    manifest = export_stacks(stacks, tmp_path, {"P1": (1, 0)})
    back = load_stacks(manifest)
    assert set(back) == {"P1/T1", "P1/FLAIR"}
    np.testing.assert_allclose(back["P1/T1"].pixels, stacks[0].pixels, atol=1e-7)
    assert back["P1/T1"].provenance == stacks[0].provenance
    assert "grade_code" in manifest.read_text().splitlines()[0]
