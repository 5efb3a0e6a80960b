import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from segmate.data import clip_normalize, make_triplet, phantom_generate, resize_slice, volume_slices, z_norm
from segmate.errors import DataError, FormatError, GenerationError
from segmate.smv import decode, encode, read_smv, write_smv
from segmate.volume import MaskVolume, Volume

# -- clip / normalize --------------------------------------------------------


def test_clip_normalize_examples():
    assert clip_normalize(-1500) == 0.0
    assert clip_normalize(2000) == 1.0
    assert clip_normalize(500) == 0.5
    assert clip_normalize(-1000) == 0.0


def test_clip_normalize_exhaustive_int16():
    hu = np.arange(-32768, 32768, dtype=np.int16)
    out = clip_normalize(hu)
    assert out.dtype == np.float32
    assert out.min() == 0.0 and out.max() == 1.0
    assert np.all(np.diff(out) >= 0)
    expected = (np.clip(hu.astype(np.float64), -1000, 2000) + 1000) / 3000
    assert np.max(np.abs(out - expected)) < 1e-7


# -- resize ------------------------------------------------------------------


def test_resize_same_size_identity(rng):
    mask = rng.integers(0, 5, (7, 9)).astype(np.uint8)
    np.testing.assert_array_equal(resize_slice(mask, (7, 9), "mask"), mask)
    img = rng.standard_normal((7, 9)).astype(np.float32)
    np.testing.assert_array_equal(resize_slice(img, (7, 9)), img)


@pytest.mark.parametrize("target", [(1, 1), (3, 5), (8, 8), (13, 4)])
def test_resize_constant_stays_constant(target):
    out = resize_slice(np.full((6, 6), 0.375, np.float32), target)
    assert out.shape == target
    np.testing.assert_allclose(out, 0.375, rtol=0, atol=1e-7)


def test_resize_ramp_halving():
    ramp = np.arange(16, dtype=np.float32).reshape(4, 4)
    # half-pixel centres: each output samples midway between two input pixels
    np.testing.assert_allclose(resize_slice(ramp, (2, 2)), [[2.5, 4.5], [10.5, 12.5]], atol=1e-6)


def test_resize_mask_keeps_label_set(rng):
    mask = rng.integers(0, 4, (10, 10))
    out = resize_slice(mask, (23, 17), "mask")
    assert set(np.unique(out)) <= set(np.unique(mask))


def test_resize_rejects_bad_arguments():
    with pytest.raises(ValueError):
        resize_slice(np.zeros((4, 4)), (0, 3))
    with pytest.raises(ValueError):
        resize_slice(np.zeros((4, 4)), (2, 2), "cubic")


# -- triplets / z_norm -------------------------------------------------------


def _ramp_volume(depth):
    vox = (np.arange(depth, dtype=np.int16)[:, None, None] * 10 + np.zeros((1, 3, 3), np.int16))
    return Volume(vox)


def test_triplet_boundaries_and_z_norm():
    vol = _ramp_volume(162)
    first = make_triplet(vol, 0)
    assert first.z_norm == 0.0
    np.testing.assert_array_equal(first.stack, clip_normalize(vol.voxels[[0, 0, 1]]))
    assert make_triplet(vol, 161).z_norm == 1.0
    np.testing.assert_array_equal(make_triplet(vol, 161).stack, clip_normalize(vol.voxels[[160, 161, 161]]))
    assert make_triplet(vol, 81).z_norm == pytest.approx(0.50311, abs=1e-5)
    assert make_triplet(vol, 81).z_norm == 81 / 161


def test_single_slice_volume():
    s = make_triplet(_ramp_volume(1), 0)
    assert s.z_norm == 0.0
    np.testing.assert_array_equal(s.stack[0], s.stack[2])


@pytest.mark.parametrize("t", [-1, 5])
def test_triplet_out_of_range(t):
    with pytest.raises(IndexError):
        make_triplet(_ramp_volume(5), t)


@given(depth=st.integers(2, 200))
def test_z_norm_endpoints_and_monotone(depth):
    zs = [z_norm(t, depth) for t in range(depth)]
    assert zs[0] == 0.0 and zs[-1] == 1.0
    assert all(a < b for a, b in zip(zs, zs[1:]))


def test_z_norm_physical_mode():
    assert z_norm(0, 4, "physical") == 0.125
    assert z_norm(3, 4, "physical") == 0.875
    with pytest.raises(ValueError):
        z_norm(0, 4, "mm")


@given(seed=st.integers(0, 10_000), t=st.integers(0, 5))
def test_triplet_centre_is_normalized_slice(seed, t):
    rng = np.random.default_rng(seed)
    vol = Volume(rng.integers(-2000, 3000, (6, 4, 4)))
    np.testing.assert_array_equal(make_triplet(vol, t).stack[1], clip_normalize(vol.voxels[t]))


def test_volume_slices_resizes_stack_and_labels(rng):
    (vol, mask), = phantom_generate(1, 1, (4, 24, 24), 2)
    stacks, labels, zs = volume_slices(vol, mask, (16, 16))
    assert stacks.shape == (4, 3, 16, 16) and labels.shape == (4, 16, 16)
    np.testing.assert_allclose(zs, [0, 1 / 3, 2 / 3, 1], rtol=1e-7)


# -- phantoms ----------------------------------------------------------------


def test_phantom_single_ellipsoid_matches_rasterisation_oracle():
    (vol, mask, specs), = phantom_generate(11, 1, (10, 16, 16), 2, return_specs=True)
    (cz, cy, cx), (rz, ry, rx) = specs[0].center, specs[0].radii
    count = 0
    for z in range(10):
        for y in range(16):
            for x in range(16):
                if ((z - cz) / rz) ** 2 + ((y - cy) / ry) ** 2 + ((x - cx) / rx) ** 2 <= 1.0:
                    count += 1
    assert int((mask.labels == 1).sum()) == count


def test_phantom_determinism_and_empty():
    a = phantom_generate(3, 2, (8, 24, 24), 3)
    b = phantom_generate(3, 2, (8, 24, 24), 3)
    for (va, ma), (vb, mb) in zip(a, b):
        assert encode(va) == encode(vb) and encode(ma) == encode(mb)
    assert phantom_generate(3, 0) == []


def test_phantom_organs_distinct_and_banded():
    for vol, mask, specs in phantom_generate(5, 3, (12, 32, 32), 4, return_specs=True):
        assert set(np.unique(mask.labels)) == {0, 1, 2, 3}
        for s in specs:
            organ = vol.voxels[mask.labels == s.label].astype(float)
            assert abs(organ.mean() - s.hu) < 10
        assert len({s.hu for s in specs}) == 3


def test_phantom_infeasible_packing():
    with pytest.raises(GenerationError):
        phantom_generate(0, 1, (8, 12, 12), 9, max_tries=5)
    with pytest.raises(GenerationError):
        phantom_generate(0, 1, num_classes=1)
    with pytest.raises(GenerationError):
        phantom_generate(0, 1, (2, 16, 16), 2)


# -- SMV ---------------------------------------------------------------------


def test_smv_round_trip_files(tmp_path):
    for vol, mask in phantom_generate(2, 2, (8, 24, 24), 3, spacing=(2.5, 0.8, 0.8)):
        for obj in (vol, mask):
            path = tmp_path / f"{obj.patient_id}.smv"
            write_smv(path, obj)
            back = read_smv(path)
            assert type(back) is type(obj)
            assert back.spacing == obj.spacing and back.patient_id == obj.patient_id
            assert encode(back) == path.read_bytes()


def test_smv_header_layout():
    m = MaskVolume(np.zeros((2, 3, 4), np.uint8), 5, (1.0, 2.0, 3.0), "ab")
    buf = encode(m)
    assert buf[:4] == b"SMV1"
    assert struct.unpack_from("<BBH3I3fI", buf, 4) == (1, 0, 5, 2, 3, 4, 1.0, 2.0, 3.0, 2)
    assert buf[36:38] == b"ab"
    assert len(buf) == 38 + 24


def test_smv_errors():
    vol = Volume(np.zeros((2, 2, 2), np.int16), patient_id="x")
    buf = encode(vol)
    with pytest.raises(FormatError):
        decode(b"NOPE" + buf[4:])
    with pytest.raises(FormatError):
        decode(buf[:-1])
    big = bytearray(buf)
    struct.pack_into("<I", big, 8, 99)  # claim a deeper grid than the payload holds
    with pytest.raises(FormatError, match="truncated"):
        decode(bytes(big))
    mask = bytearray(encode(MaskVolume(np.zeros((1, 2, 2), np.uint8), 3)))
    mask[-1] = 3  # label K in a K-class mask
    with pytest.raises(FormatError):
        decode(bytes(mask))


def test_volume_validation():
    with pytest.raises(DataError):
        MaskVolume(np.full((1, 1, 1), 4), 4)
    with pytest.raises(DataError):
        Volume(np.zeros((1, 1, 1)), (1.0, 0.0, 1.0))


@given(data=st.binary(max_size=80))
def test_smv_fuzz_only_structured_errors(data):
    try:
        decode(data)
    except FormatError:
        pass


@given(seed=st.integers(0, 10_000), pos=st.integers(0, 60), val=st.integers(0, 255))
def test_smv_byte_flips_never_crash(seed, pos, val):
    rng = np.random.default_rng(seed)
    mask = MaskVolume(rng.integers(0, 3, (2, 3, 3)), 3, patient_id="p")
    buf = bytearray(encode(mask))
    buf[pos % len(buf)] = val
    try:
        out = decode(bytes(buf))
    except FormatError:
        return
    assert isinstance(out, (Volume, MaskVolume))
