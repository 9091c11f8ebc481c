"""Conditional MLP ``f(x, y, z, t; code)`` with sine or ReLU activations.

Hidden layer ``l`` (1-based) receives the concatenation
``[h_{l-1} | x, y, z, t | code]``: the previous activations (absent for
layer 1), the four coordinates (always for layer 1, for deeper layers when
``coords_to_all_layers``), and the latent code when ``l`` is an injection
layer. Weight matrices are stored ``(fan_in, fan_out)`` with rows in that
order. The output layer is linear and reads only ``h_L``.

Forward and backward are written out by hand; the backward pass is exact
for the value returned by :func:`loss`.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

ACTIVATIONS = ("sine", "relu")


@dataclass
class NetworkConfig:
    hidden_layers: int = 9
    hidden_width: int = 128
    latent_dim: int = 192
    activation: str = "sine"
    omega: float = 30.0
    latent_injection_layers: tuple[int, ...] = (1, 5, 8)
    coords_to_all_layers: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        self.latent_injection_layers = tuple(sorted({int(l) for l in self.latent_injection_layers}))
        if self.hidden_layers < 1 or self.hidden_width < 1 or self.latent_dim < 0:
            raise ValueError("hidden_layers and hidden_width must be >= 1, latent_dim >= 0")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if self.omega <= 0:
            raise ValueError("omega must be positive")
        bad = [l for l in self.latent_injection_layers if not 1 <= l <= self.hidden_layers]
        if bad:
            raise ValueError(f"injection layers {bad} outside [1, {self.hidden_layers}]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def layer_blocks(self, layer: int) -> tuple[int, int, int]:
        """Widths of the (hidden, coords, latent) input blocks of hidden layer ``layer``."""
        hidden = self.hidden_width if layer > 1 else 0
        coords = 4 if (layer == 1 or self.coords_to_all_layers) else 0
        latent = self.latent_dim if layer in self.latent_injection_layers else 0
        return hidden, coords, latent

    def layer_shapes(self) -> list[tuple[int, int]]:
        shapes = [(sum(self.layer_blocks(l)), self.hidden_width) for l in range(1, self.hidden_layers + 1)]
        shapes.append((self.hidden_width, 1))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["latent_injection_layers"] = list(self.latent_injection_layers)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class LossConfig:
    sigma: float = 0.1
    # optional clamp applied to both prediction and target
    clamp: float | None = None

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.clamp is not None and self.clamp <= 0:
            raise ValueError("clamp must be positive")

    @property
    def code_weight(self) -> float:
        return 1.0 / self.sigma**2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AutoDecoderParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    latent_codes: np.ndarray

    @property
    def num_sequences(self) -> int:
        return self.latent_codes.shape[0]

    def tensors(self) -> dict[str, np.ndarray]:
        """Every trainable array by name, in checkpoint order."""
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w
            out[f"b{i}"] = b
        out["latent_codes"] = self.latent_codes
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "AutoDecoderParams":
        n = sum(1 for k in tensors if k.startswith("W"))
        return cls(
            [tensors[f"W{i}"] for i in range(n)],
            [tensors[f"b{i}"] for i in range(n)],
            tensors["latent_codes"],
        )

    def copy(self) -> "AutoDecoderParams":
        return AutoDecoderParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], self.latent_codes.copy()
        )


@dataclass
class LossResult:
    value: float
    recon: float
    code: float
    grads: dict[str, np.ndarray] = field(repr=False)
    # gradient w.r.t. the latent code of the batch's sequence
    grad_code: np.ndarray = field(repr=False)


def init_params(config: NetworkConfig, num_sequences: int, seed: int = 0) -> AutoDecoderParams:
    if num_sequences < 1:
        raise ValueError("num_sequences must be >= 1")
    rng = np.random.default_rng(seed)
    dtype = np.dtype(config.dtype)
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(config.layer_shapes()):
        if config.activation == "sine":
            bound = 1.0 / fan_in if i == 0 else np.sqrt(6.0 / fan_in) / config.omega
        else:
            bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    codes = rng.normal(0.0, 0.1, size=(num_sequences, config.latent_dim)).astype(dtype)
    return AutoDecoderParams(weights, biases, codes)


class _Tape:
    __slots__ = ("hidden_in", "pre")

    def __init__(self):
        self.hidden_in = []
        self.pre = []


def _dot_code(code: np.ndarray, w: np.ndarray) -> np.ndarray:
    # shared code -> one row, broadcast over the batch
    return code @ w


def _forward(params, config, coords, code, tape=None):
    omega = config.omega
    sine = config.activation == "sine"
    h = None
    for l in range(1, config.hidden_layers + 1):
        w = params.weights[l - 1]
        nh, nc, nz = config.layer_blocks(l)
        a = params.biases[l - 1] + 0.0
        if nh:
            a = a + h @ w[:nh]
        if nc:
            a = a + coords @ w[nh : nh + nc]
        if nz:
            a = a + _dot_code(code, w[nh + nc :])
        if tape is not None:
            tape.hidden_in.append(h)
            tape.pre.append(a)
        h = np.sin(omega * a) if sine else np.maximum(a, 0.0)
    out = h @ params.weights[-1] + params.biases[-1]
    if tape is not None:
        tape.hidden_in.append(h)
    return out[:, 0]


def _backward(params, config, coords, code, tape, d_out, want_params=True, want_coords=False):
    """Backpropagate ``d_out`` (B,) through the recorded forward pass."""
    omega = config.omega
    sine = config.activation == "sine"
    L = config.hidden_layers
    shared = code.ndim == 1
    grads = {}
    g = d_out[:, None]
    h_last = tape.hidden_in[L]
    if want_params:
        grads[f"W{L}"] = h_last.T @ g
        grads[f"b{L}"] = g.sum(axis=0)
    dh = g @ params.weights[L].T
    d_coords = np.zeros_like(coords) if want_coords else None
    d_code = np.zeros(code.shape, dtype=np.result_type(code, dh))
    for l in range(L, 0, -1):
        w = params.weights[l - 1]
        a = tape.pre[l - 1]
        nh, nc, nz = config.layer_blocks(l)
        da = dh * (omega * np.cos(omega * a)) if sine else dh * (a > 0)
        da_sum = da.sum(axis=0)
        if want_params:
            gw = np.empty_like(w, dtype=da.dtype)
            if nh:
                gw[:nh] = tape.hidden_in[l - 1].T @ da
            if nc:
                gw[nh : nh + nc] = coords.T @ da
            if nz:
                gw[nh + nc :] = np.outer(code, da_sum) if shared else code.T @ da
            grads[f"W{l - 1}"] = gw
            grads[f"b{l - 1}"] = da_sum
        if nz:
            wz = w[nh + nc :]
            d_code += wz @ da_sum if shared else da @ wz.T
        if want_coords and nc:
            d_coords += da @ w[nh : nh + nc].T
        if nh:
            dh = da @ w[:nh].T
    return grads, d_code, d_coords


def _check_inputs(coords, code):
    if not (np.all(np.isfinite(coords)) and np.all(np.isfinite(code))):
        raise ValueError("non-finite network input")


def _as_batch(params, coords, code):
    dtype = params.weights[0].dtype
    coords = np.asarray(coords, dtype=dtype)
    coords = coords.reshape(-1, 4)
    code = np.asarray(code, dtype=dtype)
    _check_inputs(coords, code)
    return coords, code


def forward_batch(params: AutoDecoderParams, config: NetworkConfig, coords, code) -> np.ndarray:
    """Evaluate the network on (B, 4) coordinates ``x, y, z, t``.

    ``code`` is either one latent vector shared by the batch or a (B, D) array.
    """
    coords, code = _as_batch(params, coords, code)
    return _forward(params, config, coords, code)


def forward(params: AutoDecoderParams, config: NetworkConfig, x, t: float, z) -> float:
    coords = np.concatenate([np.asarray(x, dtype=float).reshape(3), [float(t)]])
    return float(forward_batch(params, config, coords[None, :], z)[0])


def loss(
    params: AutoDecoderParams,
    config: NetworkConfig,
    loss_config: LossConfig,
    batch,
    sequence_id: int,
) -> LossResult:
    """Mean L1 reconstruction error plus ``||z||^2 / sigma^2``, with exact gradients.

    ``batch`` is an (B, 5) array of ``x, y, z, t, sdf`` rows or an
    ``SdfSampleSet``. Gradients cover every weight and bias; the code
    gradient is returned separately for ``sequence_id``.
    """
    rows = getattr(batch, "samples", batch)
    rows = np.asarray(rows)
    if rows.ndim != 2 or rows.shape[0] == 0 or rows.shape[1] != 5:
        raise ValueError("batch must be a non-empty (B, 5) array")
    if not 0 <= sequence_id < params.num_sequences:
        raise KeyError(f"unknown sequence_id {sequence_id}")
    dtype = params.weights[0].dtype
    coords = np.ascontiguousarray(rows[:, :4], dtype=dtype)
    target = rows[:, 4].astype(dtype)
    code = params.latent_codes[sequence_id]
    _check_inputs(coords, code)

    tape = _Tape()
    pred = _forward(params, config, coords, code, tape)
    if loss_config.clamp is not None:
        c = loss_config.clamp
        residual = np.clip(pred, -c, c) - np.clip(target, -c, c)
        d_pred = np.sign(residual) * (np.abs(pred) < c)
    else:
        residual = pred - target
        d_pred = np.sign(residual)
    n = rows.shape[0]
    recon = float(np.abs(residual).sum() / n)
    code_term = float(loss_config.code_weight * (code @ code))
    grads, d_code, _ = _backward(params, config, coords, code, tape, (d_pred / n).astype(dtype))
    d_code = d_code + 2.0 * loss_config.code_weight * code
    return LossResult(recon + code_term, recon, code_term, grads, d_code)


def spatial_gradient(params: AutoDecoderParams, config: NetworkConfig, x, t, z) -> np.ndarray:
    """Exact d f / d(x, y, z). Accepts a single point or (B, 3) points with (B,) times."""
    xyz = np.atleast_2d(np.asarray(x, dtype=float))
    tt = np.broadcast_to(np.asarray(t, dtype=float), (xyz.shape[0],))
    coords, code = _as_batch(params, np.column_stack([xyz, tt]), z)
    tape = _Tape()
    _forward(params, config, coords, code, tape)
    ones = np.ones(coords.shape[0], dtype=coords.dtype)
    _, _, d_coords = _backward(params, config, coords, code, tape, ones, want_params=False, want_coords=True)
    g = d_coords[:, :3]
    return g[0] if np.ndim(x) == 1 else g
