"""Jaccard index, shape descriptors and descriptor-distribution comparison."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .meshing import marching_cubes, mesh_surface_area
from .sdf_core import VoxelGrid


class EmptyShapeError(ValueError):
    pass


@dataclass
class DescriptorRow:
    sequence: int
    frame: int
    volume_um3: float
    area_um2: float
    sphericity: float


@dataclass
class KsResult:
    statistic: float
    p_value: float
    n: int
    m: int

    def to_dict(self) -> dict:
        return asdict(self)


def _occupied(a) -> np.ndarray:
    if isinstance(a, VoxelGrid):
        a = a.values
    a = np.asarray(a)
    return a if a.dtype == bool else a != 0


def jaccard(a, b) -> float:
    """Intersection over union of two occupancy grids; 1 when both are empty."""
    a = _occupied(a)
    b = _occupied(b)
    if a.shape != b.shape:
        raise ValueError(f"grid dims differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def descriptors(sdf_grid: VoxelGrid, voxel_size_nm=None, sequence: int = 0, frame: int | None = None) -> DescriptorRow:
    """Volume (um^3), mesh surface area (um^2) and sphericity of the shape ``sdf < 0``.

    Sphericity is the surface area divided by that of the sphere with the
    same volume, so a perfect sphere scores 1.
    """
    if voxel_size_nm is not None:
        sdf_grid = VoxelGrid(sdf_grid.values, sdf_grid.domain, sdf_grid.time_index, voxel_size_nm)
    inside = np.count_nonzero(sdf_grid.occupancy())
    if inside == 0:
        raise EmptyShapeError("empty shape")
    voxel_nm = np.asarray(sdf_grid.voxel_size_nm, dtype=float)
    # sphericity is measured with voxel sizes relative to the largest one, so a
    # uniform change of physical scale leaves it bit-for-bit unchanged
    scale = float(voxel_nm.max())
    rel_voxel = voxel_nm / scale
    rel = VoxelGrid(sdf_grid.values, sdf_grid.domain, sdf_grid.time_index, tuple(1000.0 * rel_voxel))
    rel_area = mesh_surface_area(marching_cubes(rel, 0.0, units="um"))
    rel_volume = inside * float(np.prod(rel_voxel))
    sphericity = rel_area / (36.0 * math.pi * rel_volume**2) ** (1.0 / 3.0)
    um = scale / 1000.0
    volume = rel_volume * um**3
    area = rel_area * um**2
    return DescriptorRow(sequence, sdf_grid.time_index if frame is None else frame, volume, area, sphericity)


def write_descriptor_csv(path, rows: Iterable[DescriptorRow]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "frame", "volume_um3", "area_um2", "sphericity"])
        for r in rows:
            w.writerow([r.sequence, r.frame, repr(r.volume_um3), repr(r.area_um2), repr(r.sphericity)])


def read_descriptor_csv(path) -> list[DescriptorRow]:
    with open(Path(path), newline="") as fh:
        return [
            DescriptorRow(int(r["sequence"]), int(r["frame"]), float(r["volume_um3"]), float(r["area_um2"]), float(r["sphericity"]))
            for r in csv.DictReader(fh)
        ]


def ks_statistic(xs, ys) -> float:
    xs = np.sort(np.asarray(xs, dtype=float))
    ys = np.sort(np.asarray(ys, dtype=float))
    pooled = np.concatenate([xs, ys])
    cdf_x = np.searchsorted(xs, pooled, side="right") / len(xs)
    cdf_y = np.searchsorted(ys, pooled, side="right") / len(ys)
    return float(np.max(np.abs(cdf_x - cdf_y)))


def kolmogorov_sf(lam: float, tol: float = 1e-12, max_terms: int = 100) -> float:
    """Survival function of the Kolmogorov distribution by its alternating series.

    Returns 1 when the series does not settle (tiny ``lam``).
    """
    if lam <= 0:
        return 1.0
    total = 0.0
    sign = 1.0
    for k in range(1, max_terms + 1):
        term = 2.0 * sign * math.exp(-2.0 * k * k * lam * lam)
        total += term
        if abs(term) < tol:
            return min(1.0, max(0.0, total))
        sign = -sign
    return 1.0


def ks_two_sample(xs, ys) -> KsResult:
    """Two-sided two-sample KS test with the asymptotic p-value.

    The effective size ``nm / (n + m)`` enters through the usual
    ``sqrt(ne) + 0.12 + 0.11 / sqrt(ne)`` small-sample correction.
    """
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if xs.size == 0 or ys.size == 0:
        raise ValueError("KS test needs non-empty samples")
    d = ks_statistic(xs, ys)
    n, m = xs.size, ys.size
    ne = n * m / (n + m)
    lam = (math.sqrt(ne) + 0.12 + 0.11 / math.sqrt(ne)) * d
    return KsResult(d, kolmogorov_sf(lam), n, m)


def empirical_quantile(values, p) -> np.ndarray:
    """Quantile at plotting position ``p`` using ``h = p (n + 1)`` with linear interpolation."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise ValueError("empty sample")
    h = np.clip(np.asarray(p, dtype=float) * (v.size + 1), 1.0, v.size) - 1.0
    lo = np.floor(h).astype(int)
    hi = np.minimum(lo + 1, v.size - 1)
    return v[lo] + (h - lo) * (v[hi] - v[lo])


def qq_pairs(xs, ys) -> np.ndarray:
    """Matched quantiles at ``k / (N + 1)``, ``k = 1..N``, ``N = min(n, m)``; shape (N, 2)."""
    n = min(np.size(xs), np.size(ys))
    if n == 0:
        raise ValueError("QQ pairs need non-empty samples")
    p = np.arange(1, n + 1) / (n + 1)
    return np.column_stack([empirical_quantile(xs, p), empirical_quantile(ys, p)])


def mean_std(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std())


def format_mean_std(values: Sequence[float], digits: int = 3) -> str:
    mean, std = mean_std(values)
    return f"{mean:.{digits}f}±{std:.{digits}f}"
