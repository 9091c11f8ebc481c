"""Marching-cubes extraction of the zero level set, mesh measures and export."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from ._mc_tables import CORNERS, EDGES, TRIANGLES
from .sdf_core import VoxelGrid

MESH_MAGIC = b"MSH1"

_CORNERS = np.array(CORNERS, dtype=np.int64)
_EDGES = np.array(EDGES, dtype=np.int64)
_NTRI = np.array([len(t) // 3 for t in TRIANGLES], dtype=np.int64)
_TRI = np.full((256, 15), -1, dtype=np.int64)
for _case, _t in enumerate(TRIANGLES):
    _TRI[_case, : len(_t)] = _t
# each cell edge as (lower corner offset, axis)
_EDGE_ORIGIN = np.minimum(_CORNERS[_EDGES[:, 0]], _CORNERS[_EDGES[:, 1]])
_EDGE_AXIS = np.argmax(np.abs(_CORNERS[_EDGES[:, 1]] - _CORNERS[_EDGES[:, 0]]), axis=1)


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float
    triangles: np.ndarray  # (F, 3) int
    units: str = "normalized"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def edges(self) -> np.ndarray:
        """Undirected edges, one row per (triangle, side)."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.sort(e, axis=1)

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        n_edges = len(np.unique(self.edges(), axis=0)) if len(self.triangles) else 0
        return int(len(used) - n_edges + len(self.triangles))

    def is_watertight(self) -> bool:
        if self.is_empty:
            return False
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def connected_components(self) -> int:
        if self.is_empty:
            return 0
        e = self.edges()
        n = len(self.vertices)
        adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        _, labels = connected_components(adj, directed=False)
        return len(np.unique(labels[np.unique(self.triangles)]))


def marching_cubes(grid: VoxelGrid, iso: float = 0.0, units: str = "normalized") -> TriangleMesh:
    """Polygonize ``grid == iso`` with the classic 256-case table.

    Vertices are shared through their grid-edge identity, so closed surfaces
    come out watertight. Triangles wind counter-clockwise seen from the side
    where the field exceeds ``iso``. ``units`` is ``"normalized"`` (domain
    coordinates of voxel centers) or ``"um"`` (physical, from ``voxel_size_nm``).
    """
    v = np.asarray(grid.values, dtype=float) - iso
    dims = np.asarray(v.shape)
    if np.any(dims < 2):
        raise ValueError("marching cubes needs at least 2 voxels per axis")
    prov = {"time_index": grid.time_index, "iso": iso}
    below = v < 0
    nx, ny, nz = dims - 1
    case = np.zeros((nx, ny, nz), dtype=np.int64)
    for k, (dx, dy, dz) in enumerate(CORNERS):
        case |= below[dx : dx + nx, dy : dy + ny, dz : dz + nz].astype(np.int64) << k
    case = case.ravel()
    active = np.flatnonzero(_NTRI[case] > 0)
    if active.size == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), units, prov)

    cases = case[active]
    counts = _NTRI[cases]
    cell = np.repeat(active, counts)
    slot = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    tri_edges = np.stack([_TRI[np.repeat(cases, counts), 3 * slot + j] for j in range(3)], axis=1)

    ci = np.stack(np.unravel_index(cell, (nx, ny, nz)), axis=1)
    origin = ci[:, None, :] + _EDGE_ORIGIN[tri_edges]
    axis = _EDGE_AXIS[tri_edges]
    flat = np.ravel_multi_index((origin[..., 0], origin[..., 1], origin[..., 2]), tuple(dims))
    keys = flat * 3 + axis
    uniq, inverse = np.unique(keys.ravel(), return_inverse=True)
    triangles = inverse.reshape(-1, 3)

    p0 = np.stack(np.unravel_index(uniq // 3, tuple(dims)), axis=1)
    ax = uniq % 3
    p1 = p0.copy()
    p1[np.arange(len(p1)), ax] += 1
    s0 = v[p0[:, 0], p0[:, 1], p0[:, 2]]
    s1 = v[p1[:, 0], p1[:, 1], p1[:, 2]]
    frac = s0 / (s0 - s1)
    idx = p0.astype(float)
    idx[np.arange(len(idx)), ax] += frac

    if units == "normalized":
        verts = grid.domain.lo + (idx + 0.5) * grid.spacing
    elif units == "um":
        verts = idx * (np.asarray(grid.voxel_size_nm) / 1000.0)
    else:
        raise ValueError(f"unknown units {units!r}")
    # table winding faces the inside; flip so normals point along +gradient
    return TriangleMesh(verts, triangles[:, ::-1].copy(), units, prov)


def triangle_areas(mesh: TriangleMesh) -> np.ndarray:
    v = mesh.vertices[mesh.triangles]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def mesh_surface_area(mesh: TriangleMesh) -> float:
    if mesh.is_empty:
        return 0.0
    return float(triangle_areas(mesh).sum())


def mesh_signed_volume(mesh: TriangleMesh) -> float:
    """Enclosed volume by the divergence theorem; positive for outward winding."""
    if mesh.is_empty:
        return 0.0
    v = mesh.vertices[mesh.triangles]
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)


def export_obj(mesh: TriangleMesh, path) -> None:
    path = Path(path)
    lines = [f"# nsc mesh units={mesh.units} vertices={len(mesh.vertices)} faces={len(mesh.triangles)}"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write mesh to {path}: {exc}") from exc


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    units = "normalized"
    for line in Path(path).read_text().splitlines():
        if line.startswith("#") and "units=" in line:
            units = line.split("units=")[1].split()[0]
        elif line.startswith("v "):
            verts.append([float(x) for x in line.split()[1:4]])
        elif line.startswith("f "):
            faces.append([int(tok.split("/")[0]) - 1 for tok in line.split()[1:4]])
    return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3), units)


def write_mesh_binary(mesh: TriangleMesh, path) -> None:
    """``MSH1`` | u64 vertex count | u64 triangle count | f32 xyz... | u32 indices..."""
    with open(Path(path), "wb") as fh:
        fh.write(MESH_MAGIC + struct.pack("<QQ", len(mesh.vertices), len(mesh.triangles)))
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(mesh.triangles, dtype="<u4").tobytes())


def read_mesh_binary(path) -> TriangleMesh:
    raw = Path(path).read_bytes()
    if raw[:4] != MESH_MAGIC:
        raise ValueError(f"{path}: not an MSH1 file")
    nv, nt = struct.unpack_from("<QQ", raw, 4)
    off = 20
    verts = np.frombuffer(raw, dtype="<f4", count=3 * nv, offset=off).reshape(nv, 3)
    off += 12 * nv
    tris = np.frombuffer(raw, dtype="<u4", count=3 * nt, offset=off).reshape(nt, 3)
    return TriangleMesh(verts.astype(float), tris.astype(np.int64))
