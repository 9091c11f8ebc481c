import numpy as np
import pytest

from nsc.autodecoder import NetworkConfig, init_params


def random_net(seed, activation="sine", hidden_layers=3, width=6, latent_dim=4, omega=3.0, injection=(1, 3), scale=0.6):
    """Small float64 network with random weights and biases (not the init distribution)."""
    cfg = NetworkConfig(hidden_layers, width, latent_dim, activation, omega, injection, dtype="float64")
    params = init_params(cfg, 3, seed)
    rng = np.random.default_rng(seed + 1000)
    for w in params.weights:
        w[...] = rng.normal(size=w.shape) * scale
    for b in params.biases:
        b[...] = rng.normal(size=b.shape) * scale
    params.latent_codes[...] = rng.normal(size=params.latent_codes.shape) * 0.5
    return cfg, params


def brute_force_sdf(mask, spacing):
    """Nearest opposite-phase voxel center by exhaustive pairwise scan, minus half a voxel."""
    idx = np.argwhere(np.ones(mask.shape, dtype=bool))
    pos = idx * spacing
    inside = mask[tuple(idx.T)].astype(bool)
    out = np.empty(len(idx))
    half = 0.5 * spacing.min()
    for sel, other in ((inside, ~inside), (~inside, inside)):
        a, b = pos[sel], pos[other]
        best = np.full(len(a), np.inf)
        for s in range(0, len(b), 512):
            d = np.sqrt(((a[:, None, :] - b[None, s : s + 512, :]) ** 2).sum(-1))
            best = np.minimum(best, d.min(axis=1))
        out[sel] = (best - half) * np.where(inside[sel], -1.0, 1.0)
    return out.reshape(mask.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def tiny_run_config(run_dir) -> dict:
    """A complete pipeline configuration small enough to run in seconds."""
    return {
        "seed": 3,
        "run_dir": str(run_dir),
        "data": {"desk": {"count": 3, "frames": 3}, "grid_dims": [16, 16, 16], "sample_count": 600},
        "network": {"hidden_layers": 2, "hidden_width": 16, "latent_dim": 4, "latent_injection_layers": [1]},
        "train": {"epochs": 3, "batch_points": 200, "lr": 1e-3},
        "generate": {"grid_dims": [16, 16, 16]},
    }


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.append(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
