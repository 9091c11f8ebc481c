"""Joint optimization of network weights and per-sequence latent codes."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodecoder import AutoDecoderParams, LossConfig, NetworkConfig, init_params, loss
from .sdf_core import SdfSampleSet
from .seeding import derive_seed, rng_for

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NSCK"
CHECKPOINT_VERSION = 1
_CK_HEADER = struct.Struct("<4sIQ")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass
class TrainConfig:
    epochs: int = 1250
    lr: float = 1e-4
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 100
    batch_points: int = 4096
    # sequences whose batches are summed into one optimizer step
    sequences_per_step: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.lr_decay_every < 1 or self.batch_points < 1 or self.sequences_per_step < 1:
            raise ValueError("lr_decay_every, batch_points and sequences_per_step must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class OptimizerState:
    """Adam moments for the shared weights and, row by row, for the latent codes."""

    net: AdamState
    code_m: np.ndarray
    code_v: np.ndarray
    code_steps: np.ndarray

    @classmethod
    def zeros(cls, params: AutoDecoderParams) -> "OptimizerState":
        net = AdamState()
        for name, arr in params.tensors().items():
            if name != "latent_codes":
                net.m[name] = np.zeros_like(arr)
                net.v[name] = np.zeros_like(arr)
        codes = params.latent_codes
        return cls(net, np.zeros_like(codes), np.zeros_like(codes), np.zeros(codes.shape[0], dtype=np.int64))


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update, in place, of every array named in ``grads``.

    Returns ``(params, state)`` for convenience.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in {name}")
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {params[name].shape}")
    b1, b2 = betas
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
    return params, state


def _code_step(params, state, seq, grad, lr, config: TrainConfig):
    row = AdamState({"z": state.code_m[seq]}, {"z": state.code_v[seq]}, int(state.code_steps[seq]))
    adam_step({"z": params.latent_codes[seq]}, {"z": grad}, row, lr, (config.beta1, config.beta2), config.eps)
    state.code_steps[seq] = row.step


def _clip(grads: dict, max_norm: float | None):
    if max_norm is None:
        return
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total


def epoch_batches(dataset: Sequence[SdfSampleSet], config: TrainConfig, epoch: int):
    """Shuffled ``(sequence index, row indices)`` pairs covering every sample once."""
    rng = rng_for(config.seed, "train", epoch)
    pairs = []
    for i, ds in enumerate(dataset):
        perm = rng.permutation(len(ds))
        for start in range(0, len(ds), config.batch_points):
            pairs.append((i, perm[start : start + config.batch_points]))
    order = rng.permutation(len(pairs))
    return [pairs[k] for k in order]


@dataclass
class TrainResult:
    params: AutoDecoderParams
    state: OptimizerState
    history: list[dict]
    epoch: int


def train(
    dataset: Sequence[SdfSampleSet],
    net_config: NetworkConfig,
    loss_config: LossConfig,
    train_config: TrainConfig,
    checkpoint_sink: Callable[[TrainResult], None] | None = None,
    resume: TrainResult | None = None,
) -> TrainResult:
    """Train from scratch, or continue ``resume`` up to ``train_config.epochs``.

    Each epoch shuffles all (sequence, batch) pairs; one step per group of
    ``sequences_per_step`` pairs updates the shared weights and the codes of
    the sequences in that group.
    """
    if not dataset:
        raise ValueError("empty dataset")
    ids = [ds.sequence_id for ds in dataset]
    if sorted(ids) != list(range(len(dataset))):
        raise ValueError("sequence ids must be 0..N-1")
    dataset = sorted(dataset, key=lambda d: d.sequence_id)
    dtype = np.dtype(net_config.dtype)
    rows = [np.asarray(ds.samples, dtype=dtype) for ds in dataset]

    if resume is None:
        params = init_params(net_config, len(dataset), derive_seed(train_config.seed, "init"))
        result = TrainResult(params, OptimizerState.zeros(params), [], 0)
    else:
        if resume.params.num_sequences != len(dataset):
            raise ValueError("resume state has a different number of latent codes")
        result = resume
    params, state = result.params, result.state
    tensors = params.tensors()
    betas = (train_config.beta1, train_config.beta2)
    last_good = None

    for epoch in range(result.epoch, train_config.epochs):
        lr = lr_at_epoch(train_config, epoch)
        batches = epoch_batches(dataset, train_config, epoch)
        k = train_config.sequences_per_step
        totals = np.zeros(3)
        steps = 0
        for g0 in range(0, len(batches), k):
            group = batches[g0 : g0 + k]
            net_grads = None
            code_grads = {}
            value = recon = code = 0.0
            for seq, idx in group:
                r = loss(params, net_config, loss_config, rows[seq][idx], seq)
                value += r.value
                recon += r.recon
                code += r.code
                if net_grads is None:
                    net_grads = r.grads
                else:
                    for name, g in r.grads.items():
                        net_grads[name] += g
                code_grads[seq] = code_grads.get(seq, 0.0) + r.grad_code
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}", last_good)
            _clip(net_grads, train_config.grad_clip)
            try:
                adam_step(tensors, net_grads, state.net, lr, betas, train_config.eps)
                for seq, g in code_grads.items():
                    _code_step(params, state, seq, g, lr, train_config)
            except FloatingPointError as exc:
                raise TrainingDiverged(str(exc), last_good) from exc
            totals += (value, recon, code)
            steps += 1
        mean = totals / max(steps, 1)
        result.history.append(
            {"epoch": epoch, "lr": lr, "mean_loss": float(mean[0]), "recon_term": float(mean[1]), "code_term": float(mean[2])}
        )
        result.epoch = epoch + 1
        if not all(math.isfinite(v) for v in mean):
            raise TrainingDiverged(f"non-finite epoch loss at epoch {epoch}", last_good)
        log.debug("epoch %d lr %.3g loss %.6f", epoch, lr, mean[0])
        if checkpoint_sink is not None and train_config.checkpoint_every and result.epoch % train_config.checkpoint_every == 0:
            checkpoint_sink(result)
        last_good = (result.epoch, params.copy())
    return result


def fit_latent(
    params: AutoDecoderParams,
    net_config: NetworkConfig,
    loss_config: LossConfig,
    sample_set: SdfSampleSet,
    train_config: TrainConfig,
) -> np.ndarray:
    """Optimize a fresh code (starting at zero) for ``sample_set`` with weights frozen."""
    dtype = np.dtype(net_config.dtype)
    frozen = AutoDecoderParams(params.weights, params.biases, np.zeros((1, net_config.latent_dim), dtype=dtype))
    ds = SdfSampleSet(0, sample_set.samples)
    rows = np.asarray(ds.samples, dtype=dtype)
    state = AdamState()
    code = {"z": frozen.latent_codes[0]}
    betas = (train_config.beta1, train_config.beta2)
    for epoch in range(train_config.epochs):
        lr = lr_at_epoch(train_config, epoch)
        for _, idx in epoch_batches([ds], train_config, epoch):
            r = loss(frozen, net_config, loss_config, rows[idx], 0)
            if not math.isfinite(r.value):
                raise TrainingDiverged(f"latent fit diverged at epoch {epoch}")
            adam_step(code, {"z": r.grad_code}, state, lr, betas, train_config.eps)
    return frozen.latent_codes[0].copy()


def save_checkpoint(
    path,
    result: TrainResult,
    net_config: NetworkConfig,
    loss_config: LossConfig,
    train_config: TrainConfig | None = None,
    meta: dict | None = None,
) -> None:
    """Write a checkpoint: magic, u32 version, u64 header length, JSON header, raw tensors.

    Tensors are little-endian in the network dtype, concatenated in header
    order: ``W0, b0, ..., latent_codes`` followed by the Adam moments
    ``adam.m.*`` / ``adam.v.*`` (the code moments as full matrices).
    """
    dtype = np.dtype(net_config.dtype).newbyteorder("<")
    arrays = dict(result.params.tensors())
    for name in result.state.net.m:
        arrays[f"adam.m.{name}"] = result.state.net.m[name]
        arrays[f"adam.v.{name}"] = result.state.net.v[name]
    arrays["adam.m.latent_codes"] = result.state.code_m
    arrays["adam.v.latent_codes"] = result.state.code_v
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = {
        "version": CHECKPOINT_VERSION,
        "network": net_config.to_dict(),
        "loss": loss_config.to_dict(),
        "train": train_config.to_dict() if train_config else None,
        "epoch": result.epoch,
        "history": result.history,
        "dtype": dtype.str,
        "adam_net_step": result.state.net.step,
        "adam_code_steps": [int(s) for s in result.state.code_steps],
        "tensors": entries,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(Path(path), "wb") as fh:
        fh.write(_CK_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


@dataclass
class Checkpoint:
    result: TrainResult
    net_config: NetworkConfig
    loss_config: LossConfig
    train_config: TrainConfig | None
    header: dict


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    magic, version, hlen = _CK_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = _CK_HEADER.size
    header = json.loads(raw[start : start + hlen])
    base = start + hlen
    dtype = np.dtype(header["dtype"])
    arrays = {}
    for e in header["tensors"]:
        buf = raw[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=dtype).reshape(e["shape"]).astype(dtype.newbyteorder("="))
    net_config = NetworkConfig.from_dict(header["network"])
    loss_config = LossConfig(**header["loss"])
    train_config = TrainConfig(**header["train"]) if header.get("train") else None
    params = AutoDecoderParams.from_tensors({k: v for k, v in arrays.items() if not k.startswith("adam.")})
    net = AdamState(step=int(header["adam_net_step"]))
    for name in params.tensors():
        if name != "latent_codes":
            net.m[name] = arrays[f"adam.m.{name}"]
            net.v[name] = arrays[f"adam.v.{name}"]
    state = OptimizerState(
        net, arrays["adam.m.latent_codes"], arrays["adam.v.latent_codes"],
        np.asarray(header["adam_code_steps"], dtype=np.int64),
    )
    result = TrainResult(params, state, header["history"], int(header["epoch"]))
    return Checkpoint(result, net_config, loss_config, train_config, header)


def write_history_csv(path, history: list[dict]) -> None:
    lines = ["epoch,lr,mean_loss,recon_term,code_term"]
    for h in history:
        lines.append(f"{h['epoch']},{h['lr']!r},{h['mean_loss']!r},{h['recon_term']!r},{h['code_term']!r}")
    Path(path).write_text("\n".join(lines) + "\n")
