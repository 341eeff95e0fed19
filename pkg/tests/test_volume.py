import numpy as np
import pytest

from sonobrain.errors import (
    BadMagicError,
    IoFailureError,
    NonPositiveDimError,
    NonPositiveSpacingError,
    ShapeMismatchError,
    TruncatedPayloadError,
)
from sonobrain.volume import (
    MAGIC,
    Mask,
    Volume,
    center_crop,
    load_mask,
    load_volume,
    normalize_intensity,
    resample_isotropic,
    save_volume,
)

HEADER_BYTES = 46  # magic + dims + spacing + origin + dtype + reserved


def random_volume(rng, dims=(5, 6, 7), dtype=np.float32):
    data = rng.uniform(0, 1, dims).astype(dtype)
    return Volume(data, (0.7, 0.8, 0.9), (-1.0, 2.0, 3.5))


class TestVolb1IO:
    def test_zero_payload_round_trip(self, tmp_path):
        v = Volume(np.zeros((2, 2, 2), np.float32), (1, 1, 1))
        path = tmp_path / "zeros.volb1"
        save_volume(v, path)
        back = load_volume(path)
        assert back.dims == (2, 2, 2)
        assert np.array_equal(back.data, v.data)

    def test_round_trip_bit_identical(self, tmp_path):
        rng = np.random.default_rng(3)
        v = random_volume(rng)
        path = tmp_path / "v.volb1"
        save_volume(v, path)
        back = load_volume(path)
        assert back.data.tobytes() == v.data.tobytes()
        assert back.spacing == pytest.approx(v.spacing)
        assert back.origin == pytest.approx(v.origin)

    def test_mask_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        m = Mask((rng.uniform(0, 1, (4, 4, 4)) > 0.5).astype(np.uint8), (2, 2, 2))
        path = tmp_path / "m.volb1"
        save_volume(m, path)
        back = load_mask(path)
        assert isinstance(back, Mask)
        assert np.array_equal(back.data, m.data)

    def test_file_size_matches_format(self, tmp_path):
        v = Volume(np.zeros((160, 160, 160), np.float32))
        path = tmp_path / "big.volb1"
        save_volume(v, path)
        assert path.stat().st_size == HEADER_BYTES + 160**3 * 4

    def test_truncated_payload(self, tmp_path):
        v = Volume(np.zeros((4, 4, 4), np.float32))
        path = tmp_path / "t.volb1"
        save_volume(v, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: HEADER_BYTES + 60 * 4])  # 60 of 64 floats
        with pytest.raises(TruncatedPayloadError):
            load_volume(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.volb1"
        path.write_bytes(b"NOTAVOL" + b"\0" * 64)
        with pytest.raises(BadMagicError):
            load_volume(path)

    def test_nonpositive_dim_in_header(self, tmp_path):
        v = Volume(np.zeros((2, 2, 2), np.float32))
        path = tmp_path / "d.volb1"
        save_volume(v, path)
        raw = bytearray(path.read_bytes())
        raw[len(MAGIC) : len(MAGIC) + 4] = (0).to_bytes(4, "little")
        path.write_bytes(bytes(raw))
        with pytest.raises(NonPositiveDimError):
            load_volume(path)

    def test_unwritable_path(self):
        v = Volume(np.zeros((2, 2, 2), np.float32))
        with pytest.raises(IoFailureError):
            save_volume(v, "/nonexistent_dir_xyz/v.volb1")

    def test_mask_rejects_nonbinary(self):
        with pytest.raises(ShapeMismatchError):
            Mask(np.full((2, 2, 2), 2, np.uint8))

    def test_invalid_spacing_rejected(self):
        with pytest.raises(NonPositiveSpacingError):
            Volume(np.zeros((2, 2, 2), np.float32), spacing=(0.0, 1.0, 1.0))


class TestCenterCrop:
    def test_crop_6_to_4_keeps_middle(self):
        data = np.arange(6**3, dtype=np.float32).reshape(6, 6, 6)
        v = Volume(data, (1, 1, 1))
        out = center_crop(v, (4, 4, 4))
        assert np.array_equal(out.data, data[1:5, 1:5, 1:5])

    def test_identity_crop(self):
        data = np.arange(4**3, dtype=np.float32).reshape(4, 4, 4)
        out = center_crop(Volume(data), (4, 4, 4))
        assert np.array_equal(out.data, data)
        assert out.origin == (0.0, 0.0, 0.0)

    def test_pad_3_to_5_symmetric(self):
        data = np.ones((3, 3, 3), np.float32)
        out = center_crop(Volume(data), (5, 5, 5))
        assert out.dims == (5, 5, 5)
        assert np.array_equal(out.data[1:4, 1:4, 1:4], data)
        assert out.data.sum() == data.sum()  # zero padding only

    def test_odd_pad_extra_voxel_on_high_side(self):
        data = np.ones((3, 3, 3), np.float32)
        out = center_crop(Volume(data), (6, 6, 6))
        # pad_low 1, pad_high 2 on each axis
        assert out.data[0].sum() == 0 and out.data[1].sum() > 0
        assert out.data[4].sum() == 0 and out.data[3].sum() > 0

    def test_idempotent_at_fixed_target(self):
        rng = np.random.default_rng(0)
        v = random_volume(rng, dims=(7, 8, 9))
        once = center_crop(v, (5, 5, 5))
        twice = center_crop(once, (5, 5, 5))
        assert np.array_equal(once.data, twice.data)
        assert once.origin == twice.origin

    def test_world_coordinates_preserved(self):
        v = Volume(np.zeros((6, 6, 6), np.float32), (0.5, 0.5, 0.5), (10.0, 20.0, 30.0))
        out = center_crop(v, (4, 4, 4))
        # retained voxel (0,0,0) of the crop was voxel (1,1,1) of the input
        assert out.origin == pytest.approx((10.5, 20.5, 30.5))

    def test_crop_then_pad_origin_consistency(self):
        v = Volume(np.zeros((3, 3, 3), np.float32), (1, 1, 1), (0.0, 0.0, 0.0))
        out = center_crop(v, (5, 5, 5))
        assert out.origin == pytest.approx((-1.0, -1.0, -1.0))

    def test_mask_stays_mask(self):
        m = Mask(np.ones((4, 4, 4), np.uint8))
        assert isinstance(center_crop(m, (2, 2, 2)), Mask)

    def test_bad_target(self):
        with pytest.raises(NonPositiveDimError):
            center_crop(Volume(np.zeros((2, 2, 2), np.float32)), (0, 2, 2))


class TestResample:
    def test_identity_resample(self):
        rng = np.random.default_rng(5)
        v = Volume(rng.uniform(0, 1, (6, 6, 6)).astype(np.float32), (0.6, 0.6, 0.6))
        out = resample_isotropic(v, 0.6)
        assert out.dims == v.dims
        assert np.abs(out.data - v.data).max() < 1e-6

    def test_constant_stays_constant(self):
        v = Volume(np.full((4, 5, 6), 0.7, np.float32), (1.0, 1.0, 1.0))
        out = resample_isotropic(v, 0.37)
        assert np.abs(out.data - 0.7).max() < 1e-6

    def test_linear_ramp_matches_analytic(self):
        # f(x) = x along the fastest axis, spacing 1 -> 0.5
        w = 9
        data = np.tile(np.arange(w, dtype=np.float32), (w, w, 1))
        v = Volume(data, (1.0, 1.0, 1.0))
        out = resample_isotropic(v, 0.5)
        xs = np.arange(out.dims[2]) * 0.5
        valid = xs <= w - 1  # beyond the last source center the ramp clamps
        expect = np.minimum(xs, w - 1)
        got = out.data[2, 2]
        assert np.abs(got[valid] - expect[valid]).max() < 1e-6

    def test_output_dims_formula(self):
        v = Volume(np.zeros((10, 20, 30), np.float32), (0.5, 1.0, 2.0))
        out = resample_isotropic(v, 1.0)
        # round(dim * spacing / new) per axis, (z, y, x) = (10*2, 20*1, 30*0.5)
        assert out.dims == (20, 20, 15)
        assert out.spacing == (1.0, 1.0, 1.0)

    def test_min_dim_one(self):
        v = Volume(np.zeros((2, 2, 2), np.float32), (1, 1, 1))
        out = resample_isotropic(v, 100.0)
        assert out.dims == (1, 1, 1)

    def test_values_stay_in_range(self):
        rng = np.random.default_rng(6)
        v = Volume(rng.uniform(0.2, 0.9, (5, 5, 5)).astype(np.float32), (1, 1, 1))
        out = resample_isotropic(v, 0.31)
        assert out.data.min() >= v.data.min() - 1e-6
        assert out.data.max() <= v.data.max() + 1e-6

    def test_bad_spacing(self):
        with pytest.raises(NonPositiveSpacingError):
            resample_isotropic(Volume(np.zeros((2, 2, 2), np.float32)), -1.0)


class TestNormalize:
    def test_affine_rescale(self):
        v = Volume(np.array([0, 127, 255], np.float32).reshape(1, 1, 3))
        out = normalize_intensity(v)
        assert out.data.ravel() == pytest.approx([0.0, 127 / 255, 1.0], abs=1e-7)

    def test_constant_maps_to_zero(self):
        v = Volume(np.full((3, 3, 3), 9.0, np.float32))
        assert normalize_intensity(v).data.max() == 0.0

    def test_full_range_for_nonconstant(self):
        rng = np.random.default_rng(7)
        v = Volume(rng.uniform(-5, 17, (4, 4, 4)).astype(np.float32))
        out = normalize_intensity(v)
        assert out.data.min() == 0.0
        assert out.data.max() == 1.0

    def test_uint8_input(self):
        v = Volume(np.array([[[0, 128, 255]]], np.uint8))
        out = normalize_intensity(v)
        assert out.data.dtype == np.float32
        assert out.data.max() == 1.0
