"""Reconstruction, sampling and temporal super-resolution from a trained auto-decoder."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodecoder import AutoDecoderParams, NetworkConfig, forward_batch
from .sdf_core import Domain, VoxelGrid, frame_times, voxel_centers
from .seeding import derive_seed

MODES = ("reconstruct", "sample_new", "perturb_existing")
DEFAULT_STDDEV = {"sample_new": 0.1, "perturb_existing": 0.01}
_CHUNK = 1 << 16


def sample_latent(dim: int, stddev: float = 0.1, seed: int = 0) -> np.ndarray:
    if stddev < 0:
        raise ValueError("stddev must be >= 0")
    return np.random.default_rng(seed).normal(0.0, 1.0, size=dim) * stddev


def perturb_latent(code, stddev: float = 0.01, seed: int = 0) -> np.ndarray:
    code = np.asarray(code, dtype=float)
    return code + sample_latent(code.size, stddev, seed).reshape(code.shape)


def evaluate_grid(params, config, code, dims, t: float, domain: Domain | None = None) -> np.ndarray:
    """Network values on the voxel centers of a ``dims`` grid at time ``t``."""
    domain = domain or Domain()
    axes = [voxel_centers(n, lo, hi) for n, lo, hi in zip(dims, domain.spatial_lo, domain.spatial_hi)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    dtype = params.weights[0].dtype
    out = np.empty(pts.shape[0])
    code = np.asarray(code, dtype=dtype)
    for s in range(0, pts.shape[0], _CHUNK):
        chunk = pts[s : s + _CHUNK]
        coords = np.column_stack([chunk, np.full(len(chunk), t)])
        out[s : s + _CHUNK] = forward_batch(params, config, coords, code)
    return out.reshape(tuple(dims))


def generate_sequence(
    params: AutoDecoderParams,
    config: NetworkConfig,
    z,
    grid_dims: Sequence[int],
    frames: int,
    tau_range: tuple[float, float] = (-1.0, 1.0),
    domain: Domain | None = None,
    voxel_size_nm=(125.0, 125.0, 125.0),
) -> list[VoxelGrid]:
    """Evaluate ``frames`` SDF grids at evenly spaced times spanning ``tau_range``."""
    dims = tuple(int(n) for n in grid_dims)
    if len(dims) != 3 or min(dims) < 2:
        raise ValueError("grid dims must be three integers >= 2")
    if frames < 1:
        raise ValueError("frames must be >= 1")
    domain = domain or Domain()
    times = frame_times(frames, *tau_range)
    return [
        VoxelGrid(evaluate_grid(params, config, z, dims, float(t), domain), domain, k, voxel_size_nm)
        for k, t in enumerate(times)
    ]


def temporal_superresolve(
    params: AutoDecoderParams,
    config: NetworkConfig,
    z,
    grid_dims: Sequence[int],
    out_frames: int,
    **kwargs,
) -> list[VoxelGrid]:
    """Same model, denser time sampling; nothing is retrained."""
    if out_frames < 2:
        raise ValueError("out_frames must be >= 2")
    return generate_sequence(params, config, z, grid_dims, out_frames, **kwargs)


@dataclass
class GenerationRequest:
    mode: str = "reconstruct"
    sequence_ids: list[int] = field(default_factory=lambda: [0])
    count: int = 1
    seed: int = 0
    stddev: float | None = None
    grid_dims: tuple[int, int, int] = (64, 64, 64)
    frames: int = 30
    tau_range: tuple[float, float] = (-1.0, 1.0)
    name: str = "seq"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.grid_dims = tuple(int(n) for n in self.grid_dims)
        self.tau_range = tuple(float(t) for t in self.tau_range)
        if min(self.grid_dims) < 2 or self.frames < 1:
            raise ValueError("grid dims must be >= 2 and frames >= 1")
        if self.stddev is None:
            self.stddev = DEFAULT_STDDEV.get(self.mode, 0.0)
        if self.stddev < 0:
            raise ValueError("stddev must be >= 0")


def request_codes(params: AutoDecoderParams, request: GenerationRequest) -> list[tuple[str, np.ndarray]]:
    """Named latent codes for a request; raises ``KeyError`` for unknown sequence ids."""
    known = range(params.num_sequences)
    if request.mode == "sample_new":
        dim = params.latent_codes.shape[1]
        return [
            (f"{request.name}{i:03d}", sample_latent(dim, request.stddev, derive_seed(request.seed, "generate", i)))
            for i in range(request.count)
        ]
    missing = [i for i in request.sequence_ids if i not in known]
    if missing:
        raise KeyError(f"unknown sequence ids {missing}; known ids are 0..{params.num_sequences - 1}")
    out = []
    for j, i in enumerate(request.sequence_ids):
        code = params.latent_codes[i].astype(float)
        if request.mode == "perturb_existing":
            code = perturb_latent(code, request.stddev, derive_seed(request.seed, "generate", j))
        out.append((f"{request.name}{i:03d}", code))
    return out
