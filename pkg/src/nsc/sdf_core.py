"""Signed distance fields on the normalized space-time domain.

Grids store values indexed ``[ix, iy, iz]``. Voxel ``i`` along an axis has its
center at ``lo + (i + 0.5) * (hi - lo) / n``, so a grid never samples the
domain boundary itself.
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

SAMPLE_MAGIC = b"SDF4"
SAMPLE_VERSION = 1
_SAMPLE_HEADER = struct.Struct("<4sIIQ")

MASK_DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}


class DegenerateMaskError(ValueError):
    pass


@dataclass(frozen=True)
class Domain:
    spatial_lo: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    spatial_hi: tuple[float, float, float] = (1.0, 1.0, 1.0)
    time_lo: float = -1.0
    time_hi: float = 1.0

    def __post_init__(self):
        lo = np.asarray(self.spatial_lo, dtype=float)
        hi = np.asarray(self.spatial_hi, dtype=float)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("spatial bounds must be 3-vectors")
        if np.any(lo >= hi) or not self.time_lo <= self.time_hi:
            raise ValueError("domain lower bounds must be below upper bounds")
        object.__setattr__(self, "spatial_lo", tuple(float(v) for v in lo))
        object.__setattr__(self, "spatial_hi", tuple(float(v) for v in hi))

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.spatial_lo)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.spatial_hi)

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of (x, y, z, t) rows lying inside the closed domain."""
        p = np.atleast_2d(points)
        inside = np.all((p[:, :3] >= self.lo) & (p[:, :3] <= self.hi), axis=1)
        if p.shape[1] > 3:
            inside &= (p[:, 3] >= self.time_lo) & (p[:, 3] <= self.time_hi)
        return inside

    def to_dict(self) -> dict:
        return {
            "spatial_lo": list(self.spatial_lo),
            "spatial_hi": list(self.spatial_hi),
            "time_lo": self.time_lo,
            "time_hi": self.time_hi,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Domain":
        return cls(tuple(d["spatial_lo"]), tuple(d["spatial_hi"]), d["time_lo"], d["time_hi"])


@dataclass
class VoxelGrid:
    """Dense scalar field (SDF or 0/1 occupancy) over ``domain``.

    ``voxel_size_nm`` is the physical spacing used for descriptors; the
    network always sees the normalized domain.
    """

    values: np.ndarray
    domain: Domain = field(default_factory=Domain)
    time_index: int = 0
    voxel_size_nm: tuple[float, float, float] = (125.0, 125.0, 125.0)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ValueError(f"grid values must be a non-empty 3D array, got {self.values.shape}")
        if self.time_index < 0:
            raise ValueError("time_index must be >= 0")
        self.voxel_size_nm = tuple(float(v) for v in self.voxel_size_nm)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)

    @property
    def spacing(self) -> np.ndarray:
        """Voxel edge lengths in normalized units."""
        return (self.domain.hi - self.domain.lo) / np.asarray(self.dims)

    def axis_centers(self, axis: int) -> np.ndarray:
        return voxel_centers(self.dims[axis], self.domain.spatial_lo[axis], self.domain.spatial_hi[axis])

    def occupancy(self) -> np.ndarray:
        """Interior voxels of an SDF grid; exact zeros count as outside."""
        return self.values < 0

    def with_values(self, values: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(values, self.domain, self.time_index, self.voxel_size_nm)


@dataclass
class SdfSampleSet:
    sequence_id: int
    samples: np.ndarray  # (count, 5) float32 rows of x, y, z, t, sdf
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32).reshape(-1, 5)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def coords(self) -> np.ndarray:
        return self.samples[:, :4]

    @property
    def sdf(self) -> np.ndarray:
        return self.samples[:, 4]

    def timepoints(self) -> np.ndarray:
        return np.unique(self.samples[:, 3])


def voxel_centers(n: int, lo: float, hi: float) -> np.ndarray:
    return lo + (np.arange(n) + 0.5) * (hi - lo) / n


def frame_times(frames: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Times of ``frames`` evenly spaced frames, both endpoints included."""
    if frames < 1:
        raise ValueError("frames must be >= 1")
    if frames == 1:
        return np.array([float(lo)])
    k = np.arange(frames)
    return lo + (hi - lo) * k / (frames - 1)


def analytic_sdf_sphere(center, radius: float, point) -> float | np.ndarray:
    if radius <= 0:
        raise ValueError("radius must be positive")
    p = np.asarray(point, dtype=float)
    d = np.linalg.norm(p - np.asarray(center, dtype=float), axis=-1) - radius
    return float(d) if np.ndim(d) == 0 else d


def signed_distance_transform(mask: VoxelGrid) -> VoxelGrid:
    """Exact signed Euclidean distance of an occupancy grid.

    The surface is taken to lie on the faces between inside and outside
    voxels: every voxel stores the distance to the nearest voxel center of
    the opposite phase minus half a voxel, negated inside.
    """
    m = np.asarray(mask.values)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask values must be 0 or 1")
    inside = m.astype(bool)
    if inside.all() or not inside.any():
        raise DegenerateMaskError("degenerate mask")
    spacing = mask.spacing
    half = 0.5 * float(spacing.min())
    d_in = ndimage.distance_transform_edt(inside, sampling=spacing)
    d_out = ndimage.distance_transform_edt(~inside, sampling=spacing)
    sdf = np.where(inside, half - d_in, d_out - half)
    return mask.with_values(sdf)


def trilinear(grid: VoxelGrid, points: np.ndarray) -> np.ndarray:
    """Interpolate grid values at (x, y, z) points.

    Points outside the outermost voxel centers are linearly extrapolated
    from the boundary cell, so affine fields are reproduced everywhere.
    """
    dims = np.asarray(grid.dims)
    if np.any(dims < 2):
        raise ValueError("trilinear interpolation needs at least 2 voxels per axis")
    p = np.atleast_2d(np.asarray(points, dtype=float))[:, :3]
    u = (p - grid.domain.lo) / grid.spacing - 0.5
    i0 = np.clip(np.floor(u).astype(np.int64), 0, dims - 2)
    f = u - i0
    v = np.asarray(grid.values, dtype=float)
    out = np.zeros(p.shape[0])
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                out += wx * wy * wz * v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    return out


def voxelize_sdf(
    evaluator: Callable[[np.ndarray], np.ndarray],
    dims: Sequence[int],
    domain: Domain | None = None,
    time_index: int = 0,
    voxel_size_nm=(125.0, 125.0, 125.0),
) -> VoxelGrid:
    """Evaluate ``evaluator`` on an (N, 3) array of voxel centers."""
    domain = domain or Domain()
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or min(dims) < 2:
        raise ValueError("dims must be three integers >= 2")
    axes = [voxel_centers(n, lo, hi) for n, lo, hi in zip(dims, domain.spatial_lo, domain.spatial_hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    values = np.asarray(evaluator(pts), dtype=float)
    if values.ndim == 0:
        values = np.full(pts.shape[0], float(values))
    return VoxelGrid(values.reshape(dims), domain, time_index, voxel_size_nm)


def sample_sdf_points(
    sdf_grid_sequence: Sequence[VoxelGrid],
    count: int,
    near_fraction: float = 0.7,
    band: float = 0.03,
    rng_seed: int = 0,
    sequence_id: int = 0,
    max_oversampling: int = 100,
    times: Sequence[float] | None = None,
) -> SdfSampleSet:
    """Draw training samples from a sequence of SDF grids.

    Samples are split evenly over frames. Within a frame ``near_fraction``
    of them are rejection-sampled to satisfy ``|sdf| < band``; the rest are
    uniform over the spatial domain. Candidates for the near set are drawn
    uniformly inside voxels whose center value could reach the band, which
    keeps the accepted points uniform over the band region.

    ``times`` overrides the default evenly spaced frame times, e.g. when the
    grids are a subset of a longer sequence.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    if not 0.0 <= near_fraction <= 1.0:
        raise ValueError("near_fraction must lie in [0, 1]")
    if band <= 0:
        raise ValueError("band must be positive")
    grids = list(sdf_grid_sequence)
    if not grids:
        raise ValueError("empty grid sequence")
    if count < len(grids):
        raise ValueError("count must be at least the number of frames")

    rng = np.random.default_rng(rng_seed)
    domain = grids[0].domain
    if times is None:
        times = frame_times(len(grids), domain.time_lo, domain.time_hi)
    elif len(times) != len(grids):
        raise ValueError("one time per grid is required")
    per_frame = np.full(len(grids), count // len(grids))
    per_frame[: count % len(grids)] += 1

    fallback = False
    rows = []
    for grid, t, n in zip(grids, times, per_frame):
        n_near = int(round(near_fraction * n))
        near, short = _sample_near(grid, n_near, band, rng, max_oversampling)
        fallback |= short > 0
        uniform = rng.uniform(domain.lo, domain.hi, size=(n - near.shape[0], 3))
        pts = np.concatenate([near, uniform])
        sdf = trilinear(grid, pts)
        rows.append(np.column_stack([pts, np.full(n, t), sdf]))
    if fallback:
        warnings.warn("near-surface band under-populated; filled with uniform samples", RuntimeWarning)
    meta = {"near_fallback": bool(fallback), "near_fraction": near_fraction, "band": band}
    return SdfSampleSet(sequence_id, np.concatenate(rows), meta)


def _sample_near(grid: VoxelGrid, n: int, band: float, rng, max_oversampling: int):
    if n == 0:
        return np.zeros((0, 3)), 0
    spacing = grid.spacing
    reach = band + 0.5 * float(np.linalg.norm(spacing))
    cand = np.flatnonzero(np.abs(grid.values).ravel() < reach)
    if cand.size == 0:
        return np.zeros((0, 3)), n
    lo = grid.domain.lo
    dims = grid.dims
    accepted = []
    have = 0
    drawn = 0
    budget = max_oversampling * n
    while have < n and drawn < budget:
        m = min(max(4 * (n - have), 1024), budget - drawn)
        idx = np.stack(np.unravel_index(rng.choice(cand, size=m), dims), axis=1)
        pts = lo + (idx + rng.uniform(0.0, 1.0, size=(m, 3))) * spacing
        ok = np.abs(trilinear(grid, pts)) < band
        accepted.append(pts[ok])
        have += int(ok.sum())
        drawn += m
    pts = np.concatenate(accepted)[:n]
    return pts, n - pts.shape[0]


def write_samples(path, sample_set: SdfSampleSet) -> None:
    path = Path(path)
    data = np.ascontiguousarray(sample_set.samples, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_SAMPLE_HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, sample_set.sequence_id, data.shape[0]))
        fh.write(data.tobytes())


def read_samples(path) -> SdfSampleSet:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _SAMPLE_HEADER.size:
        raise ValueError(f"{path}: truncated sample file")
    magic, version, seq_id, count = _SAMPLE_HEADER.unpack_from(raw)
    if magic != SAMPLE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != SAMPLE_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    expected = _SAMPLE_HEADER.size + count * 20
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_SAMPLE_HEADER.size).reshape(count, 5)
    return SdfSampleSet(int(seq_id), data.astype(np.float32))


def write_grid(path, grid: VoxelGrid, dtype: str | None = None) -> Path:
    """Write a JSON header at ``path`` and the raw payload beside it (``.raw``).

    The payload is little-endian, x-fastest (Fortran order over ``[ix, iy, iz]``).
    """
    path = Path(path)
    if dtype is None:
        dtype = "u8" if grid.values.dtype == bool or np.issubdtype(grid.values.dtype, np.integer) else "f32"
    payload = path.with_suffix(".raw")
    header = {
        "dims": list(grid.dims),
        "voxel_size_nm": list(grid.voxel_size_nm),
        "time_index": grid.time_index,
        "dtype": dtype,
        "order": "x-fastest",
        "domain": grid.domain.to_dict(),
        "payload": payload.name,
    }
    values = np.asarray(grid.values).astype(MASK_DTYPES[dtype])
    path.write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")
    payload.write_bytes(values.tobytes(order="F"))
    return payload


def read_grid(path) -> VoxelGrid:
    path = Path(path)
    header = json.loads(path.read_text())
    for key in ("dims", "voxel_size_nm", "time_index", "dtype", "order"):
        if key not in header:
            raise ValueError(f"{path}: header missing {key!r}")
    if header["order"] != "x-fastest":
        raise ValueError(f"{path}: unsupported order {header['order']!r}")
    if header["dtype"] not in MASK_DTYPES:
        raise ValueError(f"{path}: unsupported dtype {header['dtype']!r}")
    dims = tuple(int(n) for n in header["dims"])
    payload = path.parent / header.get("payload", path.with_suffix(".raw").name)
    raw = payload.read_bytes()
    dt = MASK_DTYPES[header["dtype"]]
    if len(raw) != int(np.prod(dims)) * dt.itemsize:
        raise ValueError(f"{payload}: payload size does not match dims {dims}")
    values = np.frombuffer(raw, dtype=dt).reshape(dims, order="F")
    values = values.astype(np.uint8 if header["dtype"] == "u8" else np.float64)
    domain = Domain.from_dict(header["domain"]) if "domain" in header else Domain()
    return VoxelGrid(values, domain, int(header["time_index"]), tuple(header["voxel_size_nm"]))
