import numpy as np
import pytest

from nsc import _mc_tables
from nsc.meshing import (
    TriangleMesh,
    export_obj,
    marching_cubes,
    mesh_signed_volume,
    mesh_surface_area,
    read_mesh_binary,
    read_obj,
    write_mesh_binary,
)
from nsc.sdf_core import VoxelGrid, voxelize_sdf


def sphere(r, c=(0, 0, 0)):
    return lambda p: np.linalg.norm(p - np.asarray(c), axis=1) - r


@pytest.fixture(scope="module")
def sphere_mesh():
    return marching_cubes(voxelize_sdf(sphere(0.5), (64, 64, 64)))


def test_tables_consistent():
    assert len(_mc_tables.TRIANGLES) == 256
    assert _mc_tables.TRIANGLES[0] == () and _mc_tables.TRIANGLES[255] == ()
    for case, tri in enumerate(_mc_tables.TRIANGLES):
        assert len(tri) % 3 == 0
        for e in tri:
            a, b = _mc_tables.EDGES[e]
            # every edge used must join an inside corner to an outside corner
            assert ((case >> a) & 1) != ((case >> b) & 1)


def test_single_cell_has_one_triangle():
    v = np.ones((2, 2, 2))
    v[0, 0, 0] = -1
    m = marching_cubes(VoxelGrid(v))
    assert m.triangles.shape == (1, 3) and len(m.vertices) == 3


def test_empty_and_full_grids():
    assert marching_cubes(VoxelGrid(np.ones((4, 4, 4)))).is_empty
    assert marching_cubes(VoxelGrid(-np.ones((4, 4, 4)))).is_empty


def test_sphere_geometry(sphere_mesh):
    r = np.linalg.norm(sphere_mesh.vertices, axis=1)
    assert np.all(np.abs(r - 0.5) <= 2 / 64)
    assert sphere_mesh.euler_characteristic() == 2
    assert sphere_mesh.is_watertight()
    assert sphere_mesh.connected_components() == 1
    assert mesh_surface_area(sphere_mesh) == pytest.approx(np.pi, rel=0.03)


def test_outward_orientation(sphere_mesh):
    assert mesh_signed_volume(sphere_mesh) > 0
    v = sphere_mesh.vertices[sphere_mesh.triangles]
    normals = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    assert np.mean(np.einsum("ij,ij->i", normals, v.mean(axis=1)) > 0) > 0.99


def test_two_spheres_two_components():
    f = lambda p: np.minimum(sphere(0.3, (-0.5, 0, 0))(p), sphere(0.3, (0.5, 0, 0))(p))
    m = marching_cubes(voxelize_sdf(f, (48, 48, 48)))
    assert m.connected_components() == 2
    assert m.euler_characteristic() == 4


def test_torus_genus_one():
    def torus(p):
        q = np.column_stack([np.hypot(p[:, 0], p[:, 1]) - 0.5, p[:, 2]])
        return np.linalg.norm(q, axis=1) - 0.2

    m = marching_cubes(voxelize_sdf(torus, (64, 64, 64)))
    assert m.euler_characteristic() == 0 and m.is_watertight()


def test_iso_offset_shrinks_surface():
    g = voxelize_sdf(sphere(0.5), (32, 32, 32))
    assert mesh_surface_area(marching_cubes(g, iso=-0.1)) < mesh_surface_area(marching_cubes(g))


def test_physical_units_scale():
    g = voxelize_sdf(sphere(0.5), (32, 32, 32))
    a = mesh_surface_area(marching_cubes(VoxelGrid(g.values, voxel_size_nm=(100, 100, 100)), units="um"))
    b = mesh_surface_area(marching_cubes(VoxelGrid(g.values, voxel_size_nm=(200, 200, 200)), units="um"))
    assert b == pytest.approx(4 * a, rel=1e-12)
    with pytest.raises(ValueError):
        marching_cubes(g, units="furlong")


def test_deterministic():
    g = voxelize_sdf(sphere(0.4), (24, 24, 24))
    a, b = marching_cubes(g), marching_cubes(g)
    assert a.vertices.tobytes() == b.vertices.tobytes() and a.triangles.tobytes() == b.triangles.tobytes()


def test_obj_roundtrip(tmp_path, sphere_mesh):
    export_obj(sphere_mesh, tmp_path / "s.obj")
    text = (tmp_path / "s.obj").read_bytes()
    assert b"\r\n" not in text
    assert text.splitlines()[0].startswith(b"#")
    back = read_obj(tmp_path / "s.obj")
    assert np.array_equal(back.triangles, sphere_mesh.triangles)
    np.testing.assert_allclose(back.vertices, sphere_mesh.vertices, rtol=1e-8, atol=1e-12)


def test_obj_indices_one_based(tmp_path):
    m = TriangleMesh(np.eye(3), [[0, 1, 2]])
    export_obj(m, tmp_path / "t.obj")
    assert (tmp_path / "t.obj").read_text().splitlines()[-1] == "f 1 2 3"


def test_binary_roundtrip(tmp_path, sphere_mesh):
    write_mesh_binary(sphere_mesh, tmp_path / "s.msh")
    back = read_mesh_binary(tmp_path / "s.msh")
    assert np.array_equal(back.triangles, sphere_mesh.triangles)
    np.testing.assert_allclose(back.vertices, sphere_mesh.vertices, atol=1e-6)
    (tmp_path / "bad.msh").write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(ValueError):
        read_mesh_binary(tmp_path / "bad.msh")


def test_bad_indices():
    with pytest.raises(ValueError):
        TriangleMesh(np.zeros((2, 3)), [[0, 1, 2]])
