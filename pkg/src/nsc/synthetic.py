"""Analytic 3D+time shape sequences: growth, mitotic division, protrusion growth.

Growth sequences are exact SDFs. Mitosis and protrusion sequences combine
exact primitives with a smooth minimum, which keeps the zero set exact in
topology but only approximates true distances away from it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .sdf_core import Domain, SdfSampleSet, frame_times, sample_sdf_points, voxelize_sdf
from .seeding import derive_seed

KINDS = ("growth", "mitosis", "protrusions")


class ShapeEscapesDomain(ValueError):
    pass


@dataclass
class SequenceSpec:
    kind: str = "growth"
    frames: int = 30
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 0.3
    growth_rate: float = 0.1
    # mitosis: half-distance between daughter centers reached at t = +1
    separation: float = 0.4
    axis: tuple[float, float, float] = (1.0, 0.0, 0.0)
    protrusion_count: int = 0
    protrusion_length: float = 0.3
    protrusion_width: float = 0.05
    smoothing: float = 0.02
    rng_seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown sequence kind {self.kind!r}")
        if self.frames < 2:
            raise ValueError("frames must be >= 2")
        if self.radius <= 0 or self.protrusion_width <= 0:
            raise ValueError("radii must be positive")
        if self.protrusion_count < 0:
            raise ValueError("protrusion_count must be >= 0")
        if self.smoothing < 0:
            raise ValueError("smoothing must be >= 0")
        self.center = tuple(float(c) for c in self.center)
        self.axis = tuple(float(c) for c in self.axis)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["center"] = list(self.center)
        d["axis"] = list(self.axis)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SequenceSpec":
        return cls(**d)


def smooth_min(a, b, k: float):
    """Log-sum-exp minimum ``-k ln(exp(-a/k) + exp(-b/k))``; hard min at k = 0."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    m = np.minimum(a, b)
    if k == 0:
        return m
    return m - k * np.log1p(np.exp(-np.abs(a - b) / k))


def capsule_sdf(points: np.ndarray, p0: np.ndarray, p1: np.ndarray, radius: float) -> np.ndarray:
    seg = p1 - p0
    denom = float(seg @ seg)
    rel = points - p0
    if denom == 0.0:
        h = np.zeros(points.shape[0])
    else:
        h = np.clip(rel @ seg / denom, 0.0, 1.0)
    return np.linalg.norm(rel - h[:, None] * seg, axis=1) - radius


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise ValueError("axis must be non-zero")
    return v / n


@dataclass
class ShapeSequence:
    """Continuous evaluator ``(x, y, z, t) -> sdf`` built from a ``SequenceSpec``."""

    spec: SequenceSpec
    directions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        s = self.spec
        rng = np.random.default_rng(derive_seed(s.rng_seed, "synthetic"))
        d = rng.normal(size=(s.protrusion_count, 3))
        self.directions = d / np.linalg.norm(d, axis=1, keepdims=True) if len(d) else d

    def radius(self, t: float) -> float:
        return self.spec.radius + self.spec.growth_rate * (t + 1.0) / 2.0

    def _capsules(self, t: float):
        s = self.spec
        c = np.asarray(s.center)
        r = self.radius(t)
        length = s.protrusion_length * (t + 1.0) / 2.0
        return [(c + 0.5 * r * d, c + (r + length) * d) for d in self.directions]

    def _daughters(self, t: float):
        c = np.asarray(self.spec.center)
        offset = self.spec.separation * (t + 1.0) / 2.0 * _unit(self.spec.axis)
        return c - offset, c + offset

    def at(self, t: float):
        """Spatial evaluator for a fixed time."""
        return lambda pts: self.evaluate(pts, t)

    def evaluate(self, xyz: np.ndarray, t: float) -> np.ndarray:
        s = self.spec
        pts = np.atleast_2d(np.asarray(xyz, dtype=float))[:, :3]
        r = self.radius(t)
        if s.kind == "mitosis":
            c0, c1 = self._daughters(t)
            return smooth_min(
                np.linalg.norm(pts - c0, axis=1) - r,
                np.linalg.norm(pts - c1, axis=1) - r,
                s.smoothing,
            )
        out = np.linalg.norm(pts - np.asarray(s.center), axis=1) - r
        if s.kind == "protrusions":
            for p0, p1 in self._capsules(t):
                out = smooth_min(out, capsule_sdf(pts, p0, p1, s.protrusion_width), s.smoothing)
        return out

    def __call__(self, points: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.empty(p.shape[0])
        for t in np.unique(p[:, 3]):
            sel = p[:, 3] == t
            out[sel] = self.evaluate(p[sel, :3], float(t))
        return out

    def extent(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounds of the (hard-union) shape at time ``t``."""
        s = self.spec
        r = self.radius(t)
        if s.kind == "mitosis":
            cs = np.array(self._daughters(t))
            return cs.min(axis=0) - r, cs.max(axis=0) + r
        c = np.asarray(s.center)
        lo, hi = c - r, c + r
        for p0, p1 in self._capsules(t):
            w = s.protrusion_width
            lo = np.minimum(lo, np.minimum(p0, p1) - w)
            hi = np.maximum(hi, np.maximum(p0, p1) + w)
        return lo, hi


def make_sequence(spec: SequenceSpec, domain: Domain | None = None) -> ShapeSequence:
    domain = domain or Domain()
    seq = ShapeSequence(spec)
    for t in frame_times(spec.frames, domain.time_lo, domain.time_hi):
        if seq.radius(t) <= 0:
            raise ValueError(f"radius becomes non-positive at t={t:g}")
        lo, hi = seq.extent(float(t))
        if np.any(lo <= domain.lo) or np.any(hi >= domain.hi):
            raise ShapeEscapesDomain("shape escapes domain")
    return seq


def voxelize_sequence(
    spec: SequenceSpec,
    grid_dims: Sequence[int],
    frames: int | None = None,
    domain: Domain | None = None,
    voxel_size_nm=(125.0, 125.0, 125.0),
):
    domain = domain or Domain()
    frames = frames or spec.frames
    spec_f = SequenceSpec(**{**spec.to_dict(), "frames": frames})
    seq = make_sequence(spec_f, domain)
    times = frame_times(frames, domain.time_lo, domain.time_hi)
    return [
        voxelize_sdf(seq.at(float(t)), grid_dims, domain, time_index=k, voxel_size_nm=voxel_size_nm)
        for k, t in enumerate(times)
    ]


def build_dataset(
    specs: Sequence[SequenceSpec],
    grid_dims: Sequence[int] = (64, 64, 64),
    frames: int | None = None,
    sample_count: int = 20000,
    seed: int = 0,
    near_fraction: float = 0.7,
    band: float = 0.03,
    domain: Domain | None = None,
    keep_frames: Sequence[int] | None = None,
) -> list[SdfSampleSet]:
    """Voxelize and sample every spec; ``keep_frames`` selects a subset of frames to sample from.

    Frame times stay those of the full sequence, so keeping every other frame
    gives a half-framerate version of the same data.
    """
    if not specs:
        raise ValueError("no sequence specs given")
    out = []
    for i, spec in enumerate(specs):
        grids = voxelize_sequence(spec, grid_dims, frames, domain)
        times = frame_times(len(grids), grids[0].domain.time_lo, grids[0].domain.time_hi)
        if keep_frames is not None:
            grids = [grids[k] for k in keep_frames]
            times = times[list(keep_frames)]
        out.append(
            sample_sdf_points(
                grids,
                sample_count,
                near_fraction=near_fraction,
                band=band,
                rng_seed=derive_seed(seed, "data", i),
                sequence_id=i,
                times=times,
            )
        )
    return out


def desk_specs(count: int = 8, frames: int = 10, seed: int = 0) -> list[SequenceSpec]:
    """A mixed growth / mitosis / protrusion population of ``count`` sequences."""
    rng = np.random.default_rng(derive_seed(seed, "synthetic", count))
    specs = []
    for i in range(count):
        kind = KINDS[i % 3]
        center = tuple(rng.uniform(-0.08, 0.08, size=3))
        if kind == "growth":
            spec = SequenceSpec(kind, frames, center, radius=rng.uniform(0.25, 0.35), growth_rate=rng.uniform(0.05, 0.15))
        elif kind == "mitosis":
            axis = tuple(rng.normal(size=3))
            spec = SequenceSpec(
                kind, frames, center, radius=rng.uniform(0.22, 0.27), growth_rate=0.0,
                separation=rng.uniform(0.3, 0.4), axis=axis,
            )
        else:
            spec = SequenceSpec(
                kind, frames, center, radius=rng.uniform(0.28, 0.34), growth_rate=0.02,
                protrusion_count=int(rng.integers(2, 5)), protrusion_length=rng.uniform(0.2, 0.3),
                protrusion_width=0.06, rng_seed=int(rng.integers(2**31)),
            )
        specs.append(spec)
    return specs
