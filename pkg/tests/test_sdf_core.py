import json
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import brute_force_sdf
from nsc.sdf_core import (
    DegenerateMaskError,
    Domain,
    SdfSampleSet,
    VoxelGrid,
    analytic_sdf_sphere,
    frame_times,
    read_grid,
    read_samples,
    sample_sdf_points,
    signed_distance_transform,
    trilinear,
    voxelize_sdf,
    write_grid,
    write_samples,
)


def sphere(p):
    return np.linalg.norm(p, axis=1) - 0.5


class TestDomain:
    def test_defaults(self):
        d = Domain()
        assert d.spatial_lo == (-1.0, -1.0, -1.0) and d.spatial_hi == (1.0, 1.0, 1.0)
        assert (d.time_lo, d.time_hi) == (-1.0, 1.0)

    def test_rejects_inverted_bounds(self):
        with pytest.raises(ValueError):
            Domain((0, 0, 0), (1, -1, 1))

    def test_roundtrip_dict(self):
        d = Domain((-1, -2, -3), (1, 2, 3), 0.0, 2.0)
        assert Domain.from_dict(d.to_dict()) == d


class TestSignedDistanceTransform:
    def test_single_center_voxel(self):
        m = np.zeros((3, 3, 3), dtype=np.uint8)
        m[1, 1, 1] = 1
        sdf = signed_distance_transform(VoxelGrid(m)).values
        vs = 2.0 / 3.0
        assert sdf[1, 1, 1] == pytest.approx(-0.5 * vs)
        for face in [(0, 1, 1), (2, 1, 1), (1, 0, 1), (1, 2, 1), (1, 1, 0), (1, 1, 2)]:
            assert sdf[face] == pytest.approx(0.5 * vs)

    def test_single_empty_corner(self):
        m = np.ones((4, 4, 4), dtype=np.uint8)
        m[0, 0, 0] = 0
        sdf = signed_distance_transform(VoxelGrid(m)).values
        assert sdf[0, 0, 0] > 0
        assert np.all(sdf.ravel()[1:] < 0)

    @pytest.mark.parametrize("fill", [0, 1])
    def test_degenerate(self, fill):
        with pytest.raises(DegenerateMaskError, match="degenerate mask"):
            signed_distance_transform(VoxelGrid(np.full((4, 4, 4), fill, dtype=np.uint8)))

    def test_rejects_non_binary(self):
        with pytest.raises(ValueError):
            signed_distance_transform(VoxelGrid(np.full((2, 2, 2), 0.5)))

    def test_random_16_cubed_matches_brute_force(self, rng):
        m = (rng.random((16, 16, 16)) < 0.3).astype(np.uint8)
        g = VoxelGrid(m)
        got = signed_distance_transform(g).values
        np.testing.assert_allclose(got, brute_force_sdf(m, g.spacing), rtol=0, atol=1e-9)

    def test_sign_follows_mask(self, rng):
        m = (rng.random((9, 7, 5)) < 0.5).astype(np.uint8)
        sdf = signed_distance_transform(VoxelGrid(m)).values
        assert np.array_equal(sdf < 0, m.astype(bool))

    def test_lipschitz_between_neighbours(self, rng):
        m = (rng.random((12, 12, 12)) < 0.4).astype(np.uint8)
        g = signed_distance_transform(VoxelGrid(m))
        for ax in range(3):
            step = g.spacing[ax]
            diff = np.abs(np.diff(g.values, axis=ax))
            assert diff.max() <= step + 1e-12


class TestAnalyticSphere:
    @pytest.mark.parametrize(
        "center,radius,point,expected",
        [((0, 0, 0), 1, (0, 0, 0), -1.0), ((0, 0, 0), 1, (1, 0, 0), 0.0), ((0.2, 0, 0), 0.5, (0.2, 0.5, 0), 0.0)],
    )
    def test_examples(self, center, radius, point, expected):
        assert analytic_sdf_sphere(center, radius, point) == pytest.approx(expected, abs=1e-15)

    def test_rejects_nonpositive_radius(self):
        with pytest.raises(ValueError):
            analytic_sdf_sphere((0, 0, 0), 0, (1, 0, 0))


class TestVoxelize:
    def test_constant(self):
        g = voxelize_sdf(lambda p: np.full(len(p), 0.25), (4, 5, 6))
        assert g.dims == (4, 5, 6) and np.all(g.values == 0.25)

    def test_sphere_exact_at_centers(self):
        g = voxelize_sdf(sphere, (64, 64, 64))
        ax = np.linspace(-1 + 1 / 64, 1 - 1 / 64, 64)
        pts = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
        assert np.max(np.abs(g.values.ravel() - sphere(pts))) == 0

    def test_sphere_volume(self):
        g = voxelize_sdf(sphere, (64, 64, 64))
        vol = np.count_nonzero(g.values < 0) * np.prod(g.spacing)
        assert vol == pytest.approx(4 / 3 * np.pi * 0.5**3, rel=0.02)

    def test_rejects_tiny_dims(self):
        with pytest.raises(ValueError):
            voxelize_sdf(sphere, (1, 4, 4))


@settings(max_examples=50, deadline=None)
@given(
    coef=st.lists(st.floats(-3, 3), min_size=4, max_size=4),
    dims=st.tuples(st.integers(2, 7), st.integers(2, 7), st.integers(2, 7)),
    seed=st.integers(0, 2**31),
)
def test_trilinear_reproduces_affine_fields(coef, dims, seed):
    a = np.asarray(coef)

    def field(p):
        return p @ a[:3] + a[3]

    g = voxelize_sdf(field, dims)
    q = np.random.default_rng(seed).uniform(-1, 1, size=(50, 3))
    np.testing.assert_allclose(trilinear(g, q), field(q), atol=1e-10)


@pytest.fixture(scope="module")
def sphere_grids():
    return [voxelize_sdf(sphere, (32, 32, 32), time_index=k) for k in range(3)]


class TestSampling:
    def test_near_fraction_zero_is_uniform(self, sphere_grids):
        s = sample_sdf_points(sphere_grids, 3000, near_fraction=0.0, rng_seed=1)
        band = np.mean(np.abs(s.sdf) < 0.03)
        # uniform draws hit the band only in proportion to its volume
        assert band < 0.1
        assert not s.metadata["near_fallback"]

    def test_band_fraction(self):
        g = [voxelize_sdf(sphere, (64, 64, 64))]
        s = sample_sdf_points(g, 10000, near_fraction=0.7, band=0.03, rng_seed=3)
        near = np.count_nonzero(np.abs(s.sdf) < 0.03)
        assert len(s) == 10000
        assert 6800 <= near <= 7200

    def test_deterministic(self, sphere_grids):
        a = sample_sdf_points(sphere_grids, 2000, rng_seed=9)
        b = sample_sdf_points(sphere_grids, 2000, rng_seed=9)
        assert a.samples.tobytes() == b.samples.tobytes()

    def test_inside_domain_and_frames_represented(self, sphere_grids):
        s = sample_sdf_points(sphere_grids, 2000, rng_seed=2)
        assert Domain().contains(s.coords).all()
        assert np.allclose(s.timepoints(), frame_times(3))
        assert np.all(np.isfinite(s.sdf))

    def test_sdf_is_trilinear_value(self, sphere_grids):
        s = sample_sdf_points(sphere_grids[:1], 500, rng_seed=4)
        np.testing.assert_allclose(s.sdf, trilinear(sphere_grids[0], s.coords[:, :3]), atol=1e-6)

    def test_rejects_bad_count(self, sphere_grids):
        with pytest.raises(ValueError):
            sample_sdf_points(sphere_grids, 0)

    def test_fallback_when_band_empty(self):
        g = [voxelize_sdf(lambda p: np.full(len(p), 1.0), (8, 8, 8))]
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            s = sample_sdf_points(g, 100, rng_seed=0)
        assert s.metadata["near_fallback"] is True
        assert len(s) == 100
        assert any(issubclass(w.category, RuntimeWarning) for w in caught)


class TestFiles:
    def test_sample_file_layout(self, tmp_path):
        rows = np.arange(15, dtype=np.float32).reshape(3, 5)
        path = tmp_path / "a.sdf4"
        write_samples(path, SdfSampleSet(7, rows))
        raw = path.read_bytes()
        assert raw[:4] == b"SDF4"
        assert struct.unpack_from("<IIQ", raw, 4) == (1, 7, 3)
        assert raw[20:] == rows.astype("<f4").tobytes()
        back = read_samples(path)
        assert back.sequence_id == 7 and np.array_equal(back.samples, rows)

    def test_sample_file_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.sdf4"
        path.write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(ValueError):
            read_samples(path)

    def test_grid_x_fastest(self, tmp_path):
        v = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
        write_grid(tmp_path / "m.json", VoxelGrid(v, time_index=3, voxel_size_nm=(90, 90, 1000)))
        header = json.loads((tmp_path / "m.json").read_text())
        assert header["order"] == "x-fastest" and header["dtype"] == "u8" and header["dims"] == [2, 3, 4]
        raw = np.frombuffer((tmp_path / "m.raw").read_bytes(), dtype=np.uint8)
        # x varies fastest: the second byte is voxel (1, 0, 0)
        assert raw[1] == v[1, 0, 0] and raw[2] == v[0, 1, 0]
        back = read_grid(tmp_path / "m.json")
        assert np.array_equal(back.values, v) and back.time_index == 3 and back.voxel_size_nm == (90, 90, 1000)

    def test_grid_f32_roundtrip(self, tmp_path, rng):
        v = rng.normal(size=(5, 4, 3))
        write_grid(tmp_path / "g.json", VoxelGrid(v), "f32")
        back = read_grid(tmp_path / "g.json")
        np.testing.assert_array_equal(back.values, v.astype(np.float32))

    def test_grid_size_mismatch(self, tmp_path):
        write_grid(tmp_path / "g.json", VoxelGrid(np.zeros((2, 2, 2), dtype=np.uint8)))
        (tmp_path / "g.raw").write_bytes(b"\0")
        with pytest.raises(ValueError):
            read_grid(tmp_path / "g.json")
