import itertools

import nibabel as nib
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvstrip.errors import DegenerateInputError, VolumeIOError
from mvstrip.volume import (
    CANONICAL_CODES,
    LabelVolume,
    NormParams,
    Orientation,
    VIEW_CODES,
    Volume,
    apply_normalization,
    conform,
    extract_slices,
    load_dataset,
    load_label,
    load_volume,
    normalize_intensity,
    reorient,
    save_volume,
)
from oracles import track_voxel

ALL_CODES = [
    tuple(c)
    for perm in itertools.permutations([("R", "L"), ("A", "P"), ("S", "I")])
    for c in itertools.product(*perm)
]


# -- construction --------------------------------------------------------------

def test_volume_is_read_only_float32():
    v = Volume(np.arange(8, dtype=np.int16).reshape(2, 2, 2))
    assert v.data.dtype == np.float32
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


def test_volume_rejects_bad_geometry():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), axis_codes=("R", "L", "S"))


def test_label_volume_requires_binary_values():
    assert LabelVolume(np.ones((2, 2, 2))).data.dtype == np.uint8
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), 2))


def test_view_codes_and_orientation_property():
    assert VIEW_CODES[Orientation.AXIAL] == ("S", "P", "R")
    assert VIEW_CODES[Orientation.CORONAL] == ("A", "I", "R")
    assert VIEW_CODES[Orientation.SAGITTAL] == ("R", "I", "A")
    v = Volume(np.zeros((2, 3, 4)))
    assert v.axis_codes == CANONICAL_CODES and v.orientation is None
    for r in Orientation:
        assert reorient(v, r).orientation is r


# -- reorientation -------------------------------------------------------------

def test_reorient_tracks_single_voxel(rng):
    shape = (3, 4, 5)
    for _ in range(30):
        src = ALL_CODES[rng.integers(len(ALL_CODES))]
        dst = ALL_CODES[rng.integers(len(ALL_CODES))]
        idx = tuple(int(rng.integers(n)) for n in shape)
        data = np.zeros(shape)
        data[idx] = 1
        out = reorient(Volume(data, axis_codes=src), dst)
        expected = track_voxel(idx, shape, src, dst)
        assert tuple(int(i) for i in np.argwhere(out.data)[0]) == expected


def test_reorient_preserves_world_position_of_every_voxel(rng):
    data = rng.random((3, 4, 5))
    v = Volume(data, spacing=(1.0, 2.0, 0.5), axis_codes=("L", "P", "S"), origin=(10.0, -4.0, 2.5))
    for r in Orientation:
        out = reorient(v, r)
        for idx in itertools.product(range(3), range(4), range(5)):
            world = v.affine @ np.r_[idx, 1.0]
            new_idx = np.linalg.solve(out.affine, world)[:3]
            assert np.allclose(new_idx, np.rint(new_idx), atol=1e-9)
            assert out.data[tuple(np.rint(new_idx).astype(int))] == v.data[idx]


@settings(max_examples=50, deadline=None)
@given(
    shape=st.tuples(*[st.integers(1, 6)] * 3),
    src=st.sampled_from(ALL_CODES),
    dst=st.sampled_from(ALL_CODES),
    seed=st.integers(0, 2**16),
)
def test_reorient_round_trip_is_exact(shape, src, dst, seed):
    data = np.random.default_rng(seed).random(shape)
    v = Volume(data, spacing=(1.0, 1.5, 2.0), axis_codes=src, origin=(3.0, -1.0, 7.0))
    back = reorient(reorient(v, dst), src)
    assert np.array_equal(back.data, v.data)
    assert back.spacing == v.spacing and back.axis_codes == v.axis_codes
    assert np.allclose(back.origin, v.origin, atol=1e-12)


def test_reorient_identity_returns_same_volume():
    v = Volume(np.zeros((2, 2, 2)))
    assert reorient(v, CANONICAL_CODES) is v


# -- slice extraction ----------------------------------------------------------

def test_extract_slices_matches_direct_reads(rng):
    img = Volume(rng.random((4, 5, 6)))
    lab = LabelVolume(rng.random((4, 5, 6)) > 0.5)
    for r in Orientation:
        pairs = extract_slices(img, lab, r, "s1")
        grid = reorient(img, r).data
        assert len(pairs) == grid.shape[0]
        for p in pairs:
            assert p.orientation is r and p.subject_id == "s1"
            assert np.array_equal(p.image, grid[p.index])
            assert np.array_equal(p.label, reorient(lab, r).data[p.index])
        assert np.array_equal(np.stack([p.image for p in pairs]), grid)


def test_extract_slices_count_and_shape():
    pairs = extract_slices(Volume(np.zeros((8, 8, 8))), r=Orientation.AXIAL)
    assert len(pairs) == 8
    assert all(p.image.shape == (8, 8) and p.label is None for p in pairs)


def test_extract_slices_rejects_mismatched_label():
    with pytest.raises(ValueError):
        extract_slices(Volume(np.zeros((4, 4, 4))), LabelVolume(np.zeros((4, 4, 5), dtype=np.uint8)))


# -- conform -------------------------------------------------------------------

def _inside_oracle(n_in, s_in, n_out, s_out):
    """Output voxels whose centre lies within the input's physical extent (1D)."""
    pos = (np.arange(n_out) - (n_out - 1) / 2) * s_out
    return np.abs(pos) <= n_in * s_in / 2 + 1e-9


@pytest.mark.parametrize(
    "shape_in,spacing_in,shape_out,spacing_out",
    [
        ((10, 12, 14), (1.0, 1.0, 1.0), (16, 16, 16), (1.0, 1.0, 1.0)),
        ((8, 8, 8), (2.0, 2.0, 2.0), (16, 16, 16), (1.0, 1.0, 1.0)),
        ((20, 10, 7), (0.5, 1.3, 2.0), (12, 12, 12), (1.0, 1.0, 1.0)),
        ((9, 9, 9), (1.0, 1.0, 1.0), (5, 7, 9), (2.0, 1.5, 1.0)),
    ],
)
def test_conform_constant_field(shape_in, spacing_in, shape_out, spacing_out):
    v = Volume(np.full(shape_in, 3.25), spacing=spacing_in, axis_codes=("L", "A", "S"), origin=(5.0, -2.0, 1.0))
    out = conform(v, shape_out, spacing_out)
    assert out.shape == shape_out and out.spacing == spacing_out and out.axis_codes == v.axis_codes
    inside = np.ones(shape_out, dtype=bool)
    for ax in range(3):
        m = _inside_oracle(shape_in[ax], spacing_in[ax], shape_out[ax], spacing_out[ax])
        inside &= m.reshape([-1 if k == ax else 1 for k in range(3)])
    assert np.allclose(out.data[inside], 3.25, atol=1e-6)
    assert np.all(out.data[~inside] == 0)


def test_conform_preserves_world_centre():
    v = Volume(np.zeros((10, 12, 14)), spacing=(0.7, 1.1, 2.0), axis_codes=("P", "S", "L"), origin=(1.0, 2.0, 3.0))
    out = conform(v, (16, 16, 16), (1.0, 1.0, 1.0))
    centre = lambda vol: vol.affine @ np.r_[(np.asarray(vol.shape) - 1) / 2, 1.0]
    assert np.allclose(centre(v), centre(out), atol=1e-9)


def test_conform_half_resolution_fills_canonical_grid():
    v = Volume(np.ones((32, 32, 32)), spacing=(2.0, 2.0, 2.0))
    out = conform(v, (64, 64, 64), (1.0, 1.0, 1.0))
    assert out.shape == (64, 64, 64) and out.spacing == (1.0, 1.0, 1.0)
    assert np.allclose(out.data, 1.0)


def test_conform_identity_is_exact(rng):
    v = Volume(rng.random((6, 6, 6)))
    out = conform(v, (6, 6, 6), (1.0, 1.0, 1.0))
    assert np.array_equal(out.data, v.data) and out.origin == v.origin


def test_conform_linear_ramp_is_reproduced_inside():
    x = np.arange(8, dtype=float)
    v = Volume(np.broadcast_to(x[:, None, None], (8, 4, 4)), spacing=(2.0, 1.0, 1.0))
    out = conform(v, (16, 4, 4), (1.0, 1.0, 1.0))
    # output centre positions mapped back to input index space
    src = (np.arange(16) - 7.5) / 2 + 3.5
    interior = (src >= 0) & (src <= 7)
    assert np.allclose(out.data[interior, 0, 0], src[interior], atol=1e-5)


def test_conform_labels_stay_binary(rng):
    lab = LabelVolume(rng.random((7, 9, 11)) > 0.5)
    out = conform(lab, (10, 10, 10), (0.8, 0.9, 1.3))
    assert isinstance(out, LabelVolume) and set(np.unique(out.data)) <= {0, 1}


def test_conform_rejects_invalid_target():
    v = Volume(np.zeros((4, 4, 4)))
    with pytest.raises(ValueError):
        conform(v, (4, 4, 0))
    with pytest.raises(ValueError):
        conform(v, (4, 4, 4), (1.0, -1.0, 1.0))


# -- normalization -------------------------------------------------------------

def test_normalize_ramp_maps_percentiles_to_unit_interval():
    v = Volume(np.arange(101, dtype=float).reshape(101, 1, 1))
    out, params = normalize_intensity(v)
    assert params.low == pytest.approx(1.0) and params.high == pytest.approx(99.0)
    assert out.data[1, 0, 0] == pytest.approx(0.0, abs=1e-7)
    assert out.data[99, 0, 0] == pytest.approx(1.0, abs=1e-7)
    assert out.data[0, 0, 0] == 0 and out.data[100, 0, 0] == 1
    assert out.data[50, 0, 0] == pytest.approx(49 / 98, abs=1e-6)


def test_normalize_constant_volume_raises():
    with pytest.raises(DegenerateInputError):
        normalize_intensity(Volume(np.full((3, 3, 3), 4.0)))


def test_normalize_mostly_empty_falls_back_to_range():
    data = np.zeros((10, 10, 10))
    data[0, 0, 0] = 5.0
    out, params = normalize_intensity(Volume(data))
    assert (params.low, params.high) == (0.0, 5.0)
    assert out.data.max() == 1.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), scale=st.floats(0.1, 1000), shift=st.floats(-500, 500))
def test_normalize_is_bounded_monotone_and_affine_invariant(seed, scale, shift):
    data = np.random.default_rng(seed).normal(size=(6, 6, 6))
    out, params = normalize_intensity(Volume(data))
    assert out.data.min() >= 0 and out.data.max() <= 1
    order = np.argsort(data.ravel(), kind="stable")
    assert np.all(np.diff(out.data.ravel()[order].astype(np.float64)) >= 0)
    shifted, _ = normalize_intensity(Volume(data * scale + shift))
    assert np.allclose(shifted.data, out.data, atol=1e-4)
    assert np.array_equal(apply_normalization(Volume(data), params).data, out.data)


def test_convention_only_params_recompute_per_volume(rng):
    v = Volume(rng.normal(size=(5, 5, 5)))
    expected, _ = normalize_intensity(v)
    assert np.array_equal(apply_normalization(v, NormParams()).data, expected.data)
    assert NormParams(0.0, 1.0).convention == NormParams()


# -- I/O -----------------------------------------------------------------------

def test_save_load_round_trip(tmp_path, rng):
    v = Volume(rng.random((5, 6, 7)), spacing=(0.5, 1.25, 2.0), axis_codes=("L", "P", "S"), origin=(-10.5, 4.25, 3.0))
    path = tmp_path / "img.nii.gz"
    save_volume(v, path)
    back = load_volume(path)
    assert np.array_equal(back.data, v.data)
    assert back.spacing == v.spacing and back.axis_codes == v.axis_codes and back.origin == v.origin


def test_label_round_trip_is_uint8(tmp_path, rng):
    lab = LabelVolume(rng.random((4, 4, 4)) > 0.3)
    path = tmp_path / "mask.nii.gz"
    save_volume(lab, path)
    assert nib.load(path).get_data_dtype() == np.uint8
    back = load_label(path)
    assert isinstance(back, LabelVolume) and np.array_equal(back.data, lab.data)


def test_canonical_size_header_is_echoed(tmp_path):
    path = tmp_path / "big.nii.gz"
    save_volume(LabelVolume(np.zeros((256, 256, 256), dtype=np.uint8)), path)
    v = load_volume(path)
    assert v.shape == (256, 256, 256) and v.spacing == (1.0, 1.0, 1.0)


def test_save_overwrites_existing_file(tmp_path):
    path = tmp_path / "x.nii"
    save_volume(Volume(np.zeros((2, 2, 2))), path)
    save_volume(Volume(np.ones((2, 2, 2))), path)
    assert load_volume(path).data.min() == 1


def test_load_errors_name_the_path(tmp_path):
    missing = tmp_path / "nope.nii.gz"
    with pytest.raises(VolumeIOError, match="nope.nii.gz"):
        load_volume(missing)
    four_d = tmp_path / "four.nii.gz"
    nib.save(nib.Nifti1Image(np.zeros((2, 2, 2, 2), dtype=np.float32), np.eye(4)), four_d)
    with pytest.raises(VolumeIOError, match="expected 3D volume"):
        load_volume(four_d)
    junk = tmp_path / "junk.nii"
    junk.write_bytes(b"not a nifti file")
    with pytest.raises(VolumeIOError, match="junk.nii"):
        load_volume(junk)


def test_save_to_unwritable_location_raises(tmp_path):
    with pytest.raises(VolumeIOError):
        save_volume(Volume(np.zeros((2, 2, 2))), tmp_path / "no" / "such" / "dir" / "x.nii")


def test_load_dataset_layout_and_missing_mask(tmp_path):
    for sid in ("a", "b"):
        (tmp_path / sid).mkdir()
        save_volume(Volume(np.zeros((2, 2, 2))), tmp_path / sid / "image.nii.gz")
    save_volume(LabelVolume(np.zeros((2, 2, 2), dtype=np.uint8)), tmp_path / "a" / "mask.nii.gz")
    with pytest.raises(VolumeIOError, match="b"):
        load_dataset(tmp_path)
    data = load_dataset(tmp_path, require_masks=False)
    assert sorted(data) == ["a", "b"]
