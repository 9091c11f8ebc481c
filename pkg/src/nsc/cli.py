"""Command-line entry point: ``nsc <command> --config run.json [--set key=value ...]``.

Run-directory layout (all relative to ``run_dir``)::

    data/seqNNN.sdf4, data/specs.json       prepare
    truth/seqNNN/frameKKK.json (+ .raw)     prepare (ground-truth SDF grids)
    model/checkpoint.nsck, model/loss.csv   train
    reconstruct/ generate/ interpolate/     grids per sequence and frame
    evaluate/                               metrics
    mesh/                                   OBJ files

Every command also writes ``manifest.json`` into its output directory.
Exit codes: 0 success, 2 validation error, 3 numerical failure, 4 IO error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load_config, loss_config, network_config, train_config
from .generation import GenerationRequest, generate_sequence, request_codes
from .meshing import export_obj, marching_cubes, write_mesh_binary
from .metrics import (
    descriptors,
    format_mean_std,
    jaccard,
    ks_two_sample,
    mean_std,
    qq_pairs,
    write_descriptor_csv,
)
from .sdf_core import (
    VoxelGrid,
    read_grid,
    read_samples,
    sample_sdf_points,
    signed_distance_transform,
    write_grid,
    write_samples,
)
from .seeding import derive_seed
from .synthetic import SequenceSpec, desk_specs, voxelize_sequence
from .training import (
    TrainingDiverged,
    load_checkpoint,
    save_checkpoint,
    train,
    write_history_csv,
)

log = logging.getLogger("nsc")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class Run:
    """Tracks inputs, outputs and timings of one command for its manifest."""

    def __init__(self, command: str, cfg: dict, out_dir: Path):
        self.command = command
        self.cfg = cfg
        self.out_dir = out_dir
        self.inputs: list[Path] = []
        self.outputs: list[Path] = []
        self.timings: dict[str, float] = {}
        self._t0 = time.perf_counter()
        out_dir.mkdir(parents=True, exist_ok=True)

    def output(self, path: Path) -> Path:
        self.outputs.append(Path(path))
        return Path(path)

    def phase(self, name: str, start: float) -> None:
        self.timings[name] = round(time.perf_counter() - start, 6)

    def write_manifest(self) -> Path:
        root = Path(self.cfg["run_dir"])

        def rel(p: Path) -> str:
            try:
                return str(p.resolve().relative_to(root.resolve()))
            except ValueError:
                return str(p)

        self.timings["total"] = round(time.perf_counter() - self._t0, 6)
        manifest = {
            "command": self.command,
            "version": f"v{__version__}",
            "config": self.cfg,
            "seeds": {
                "root": self.cfg["seed"],
                **{name: derive_seed(self.cfg["seed"], name) for name in ("data", "init", "train", "generate")},
            },
            "inputs": {rel(p): sha256(p) for p in sorted(set(self.inputs))},
            "outputs": {rel(p): sha256(p) for p in sorted(set(self.outputs))},
            "timings": self.timings,
        }
        path = self.out_dir / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return path


def _run_dir(cfg) -> Path:
    return Path(cfg["run_dir"])


def _resolve_specs(cfg) -> list[SequenceSpec]:
    data = cfg["data"]
    if data["specs"]:
        return [SequenceSpec.from_dict(d) for d in data["specs"]]
    desk = data["desk"]
    return desk_specs(int(desk["count"]), int(desk.get("frames", 10)), cfg["seed"])


def _write_grid_sequence(run: Run, seq_dir: Path, grids, meshes: bool = False) -> None:
    seq_dir.mkdir(parents=True, exist_ok=True)
    for k, g in enumerate(grids):
        head = seq_dir / f"frame{k:03d}.json"
        payload = write_grid(head, g, "f32")
        run.output(head)
        run.output(payload)
        if meshes:
            obj = seq_dir / f"frame{k:03d}.obj"
            export_obj(marching_cubes(g), obj)
            run.output(obj)


def _read_mask_sequence(seq_dir: Path, errors: list[str]) -> list[VoxelGrid]:
    grids = []
    heads = sorted(seq_dir.glob("*.json"))
    if not heads:
        errors.append(f"{seq_dir}: no mask headers found")
    for head in heads:
        try:
            grids.append(read_grid(head))
        except (ValueError, KeyError, OSError) as exc:
            errors.append(f"{head}: {exc}")
    dims = {g.dims for g in grids}
    if len(dims) > 1:
        errors.append(f"{seq_dir}: mixed dims across frames {sorted(dims)}")
    return grids


def cmd_prepare(cfg) -> Run:
    root = _run_dir(cfg)
    data = cfg["data"]
    run = Run("prepare", cfg, root / "data")
    t0 = time.perf_counter()
    dims = tuple(data["grid_dims"])
    seqs: list[list[VoxelGrid]] = []
    if data["source"] == "synthetic":
        specs = _resolve_specs(cfg)
        if not specs:
            raise ConfigError("no sequence specs configured")
        spec_path = run.output(run.out_dir / "specs.json")
        frames = data["frames"]
        spec_path.write_text(json.dumps([s.to_dict() for s in specs], indent=1, sort_keys=True) + "\n")
        for s in specs:
            seqs.append(voxelize_sequence(s, dims, frames, voxel_size_nm=tuple(data["voxel_size_nm"])))
    elif data["source"] == "masks":
        errors: list[str] = []
        for d in data["mask_dirs"]:
            d = Path(d)
            masks = _read_mask_sequence(d, errors)
            run.inputs += sorted(d.glob("*.json")) + sorted(d.glob("*.raw"))
            try:
                seqs.append([signed_distance_transform(m) for m in masks])
            except ValueError as exc:
                errors.append(f"{d}: {exc}")
        if not data["mask_dirs"]:
            errors.append("data.mask_dirs is empty")
        if errors:
            for e in errors:
                log.error(e)
            raise ConfigError(f"{len(errors)} malformed mask input(s)")
    else:
        raise ConfigError(f"unknown data.source {data['source']!r}")

    for i, grids in enumerate(seqs):
        ss = sample_sdf_points(
            grids, int(data["sample_count"]), float(data["near_fraction"]), float(data["band"]),
            derive_seed(cfg["seed"], "data", i), sequence_id=i,
        )
        write_samples(run.output(run.out_dir / f"seq{i:03d}.sdf4"), ss)
        if data["write_truth"]:
            _write_grid_sequence(run, root / "truth" / f"seq{i:03d}", grids)
    run.phase("prepare", t0)
    log.info("prepared %d sequences in %s", len(seqs), run.out_dir)
    return run


def _load_dataset(run: Run, data_dir: Path):
    files = sorted(data_dir.glob("seq*.sdf4"))
    if not files:
        raise FileNotFoundError(f"no .sdf4 files in {data_dir}")
    run.inputs += files
    return [read_samples(f) for f in files]


def cmd_train(cfg) -> Run:
    root = _run_dir(cfg)
    run = Run("train", cfg, root / "model")
    dataset = _load_dataset(run, root / "data")
    net, lcfg, tcfg = network_config(cfg), loss_config(cfg), train_config(cfg)
    frames = len(np.unique(dataset[0].samples[:, 3]))
    meta = {"frames": frames, "sequences": len(dataset)}

    resume = None
    if cfg["train"].get("resume"):
        path = Path(cfg["train"]["resume"])
        run.inputs.append(path)
        ck = load_checkpoint(path)
        if ck.net_config != net:
            raise ConfigError("resume checkpoint was trained with a different network config")
        resume = ck.result

    def sink(result):
        path = run.output(run.out_dir / f"checkpoint_e{result.epoch:05d}.nsck")
        save_checkpoint(path, result, net, lcfg, tcfg, meta)

    t0 = time.perf_counter()
    try:
        result = train(dataset, net, lcfg, tcfg, sink, resume)
    finally:
        run.phase("train", t0)
    save_checkpoint(run.output(run.out_dir / "checkpoint.nsck"), result, net, lcfg, tcfg, meta)
    write_history_csv(run.output(run.out_dir / "loss.csv"), result.history)
    if result.history:
        log.info("trained %d epochs, final loss %.6g", result.epoch, result.history[-1]["mean_loss"])
    return run


def _checkpoint_path(cfg) -> Path:
    gen = cfg["generate"]
    return Path(gen["checkpoint"]) if gen["checkpoint"] else _run_dir(cfg) / "model" / "checkpoint.nsck"


def _generate(cfg, command: str, mode: str, frames_fn) -> Run:
    gen = cfg["generate"]
    root = _run_dir(cfg)
    run = Run(command, cfg, root / command)
    ck_path = _checkpoint_path(cfg)
    run.inputs.append(ck_path)
    ck = load_checkpoint(ck_path)
    params, net = ck.result.params, ck.net_config
    train_frames = int(ck.header.get("meta", {}).get("frames", 30))
    n_seq = params.num_sequences
    ids = gen["sequence_ids"] if gen["sequence_ids"] is not None else list(range(n_seq))
    req = GenerationRequest(
        mode=mode,
        sequence_ids=[int(i) for i in ids],
        count=int(gen["count"] if gen["count"] is not None else n_seq),
        seed=derive_seed(cfg["seed"], "generate"),
        stddev=gen["stddev"],
        grid_dims=tuple(gen["grid_dims"]),
        frames=int(frames_fn(gen, train_frames)),
        tau_range=tuple(gen["tau_range"]),
        name=gen["name"],
    )
    voxel = tuple(cfg["data"]["voxel_size_nm"])
    t0 = time.perf_counter()
    codes = request_codes(params, req)
    for name, code in codes:
        grids = generate_sequence(params, net, code, req.grid_dims, req.frames, req.tau_range, voxel_size_nm=voxel)
        if gen["write_grids"] or gen["write_meshes"]:
            _write_grid_sequence(run, run.out_dir / name, grids, meshes=gen["write_meshes"])
    codes_path = run.output(run.out_dir / "codes.json")
    codes_path.write_text(json.dumps({n: [float(v) for v in c] for n, c in codes}, sort_keys=True) + "\n")
    run.phase(command, t0)
    log.info("%s: %d sequences x %d frames", command, len(codes), req.frames)
    return run


def cmd_reconstruct(cfg) -> Run:
    return _generate(cfg, "reconstruct", "reconstruct", lambda g, f: g["frames"] or f)


def cmd_generate(cfg) -> Run:
    mode = cfg["generate"]["mode"] or "sample_new"
    if mode == "reconstruct":
        raise ConfigError("use the reconstruct command for mode=reconstruct")
    return _generate(cfg, "generate", mode, lambda g, f: g["frames"] or f)


def cmd_interpolate(cfg) -> Run:
    factor = int(cfg["generate"]["factor"])
    if factor < 1:
        raise ConfigError("generate.factor must be >= 1")
    return _generate(cfg, "interpolate", "reconstruct", lambda g, f: factor * (g["frames"] or f))


def _grid_index(directory: Path) -> dict[str, Path]:
    return {str(p.relative_to(directory)): p for p in sorted(directory.rglob("frame*.json"))}


def _seq_name(key: str) -> str:
    """Sequence directory of a grid key such as ``seq001/frame004.json``."""
    parent = Path(key).parent
    return str(parent) if str(parent) != "." else ""


def _as_sdf(grid: VoxelGrid, is_mask: bool) -> VoxelGrid:
    return signed_distance_transform(grid) if is_mask else grid


def _is_mask(path: Path) -> bool:
    return json.loads(path.read_text())["dtype"] == "u8"


def cmd_evaluate(cfg) -> Run:
    ev = cfg["evaluate"]
    root = _run_dir(cfg)
    ref_dir = Path(ev["reference"]) if ev["reference"] else root / "truth"
    cand_dir = Path(ev["candidate"]) if ev["candidate"] else root / "reconstruct"
    out_dir = Path(ev["out_dir"]) if ev["out_dir"] else root / "evaluate"
    run = Run("evaluate", cfg, out_dir)
    ref, cand = _grid_index(ref_dir), _grid_index(cand_dir)
    if not ref or not cand:
        raise FileNotFoundError(f"no grids found under {ref_dir if not ref else cand_dir}")
    run.inputs += list(ref.values()) + list(cand.values())
    t0 = time.perf_counter()

    grids = {}
    for tag, index in (("reference", ref), ("candidate", cand)):
        grids[tag] = {k: _as_sdf(read_grid(p), _is_mask(p)) for k, p in index.items()}

    summary: dict = {"reference": str(ref_dir), "candidate": str(cand_dir)}
    shared = sorted(set(ref) & set(cand))
    if shared:
        lines = ["sequence,frame,jaccard"]
        values = []
        for key in shared:
            a, b = grids["reference"][key], grids["candidate"][key]
            if a.dims != b.dims:
                raise ValueError(f"dim mismatch between {ref_dir / key} {a.dims} and {cand_dir / key} {b.dims}")
            ji = jaccard(a.occupancy(), b.occupancy())
            values.append(ji)
            lines.append(f"{_seq_name(key)},{b.time_index},{ji!r}")
        run.output(out_dir / "jaccard.csv").write_text("\n".join(lines) + "\n")
        mean, std = mean_std(values)
        summary["jaccard"] = {"mean": mean, "std": std, "n": len(values), "formatted": format_mean_std(values)}
        log.info("JI: %s", format_mean_std(values))

    tables = {}
    for tag in ("reference", "candidate"):
        names = sorted({_seq_name(k) for k in grids[tag]})
        seq_ids = {name: i for i, name in enumerate(names)}
        rows = []
        for key, g in grids[tag].items():
            rows.append(descriptors(g, sequence=seq_ids[_seq_name(key)]))
        write_descriptor_csv(run.output(out_dir / f"descriptors_{tag}.csv"), rows)
        tables[tag] = rows

    ks, qq = {}, {}
    for field_name in ("volume_um3", "area_um2", "sphericity"):
        xs = [getattr(r, field_name) for r in tables["reference"]]
        ys = [getattr(r, field_name) for r in tables["candidate"]]
        ks[field_name] = ks_two_sample(xs, ys).to_dict()
        qq[field_name] = qq_pairs(xs, ys).tolist()
        summary[field_name] = {"reference": format_mean_std(xs, 2), "candidate": format_mean_std(ys, 2)}
    run.output(out_dir / "ks.json").write_text(json.dumps(ks, indent=1, sort_keys=True) + "\n")
    run.output(out_dir / "qq.json").write_text(json.dumps(qq, sort_keys=True) + "\n")
    run.output(out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    run.phase("evaluate", t0)
    return run


def cmd_mesh(cfg) -> Run:
    m = cfg["mesh"]
    root = _run_dir(cfg)
    grid_dir = Path(m["grid_dir"]) if m["grid_dir"] else root / "reconstruct"
    run = Run("mesh", cfg, root / "mesh")
    index = _grid_index(grid_dir)
    if not index:
        raise FileNotFoundError(f"no grids found under {grid_dir}")
    t0 = time.perf_counter()
    for key, path in index.items():
        run.inputs.append(path)
        grid = _as_sdf(read_grid(path), _is_mask(path))
        mesh = marching_cubes(grid, float(m["iso"]), units=m["units"])
        target = run.out_dir / Path(key).with_suffix(".msh" if m["binary"] else ".obj")
        target.parent.mkdir(parents=True, exist_ok=True)
        (write_mesh_binary if m["binary"] else export_obj)(mesh, target)
        run.output(target)
    run.phase("mesh", t0)
    return run


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "generate": cmd_generate,
    "reconstruct": cmd_reconstruct,
    "interpolate": cmd_interpolate,
    "evaluate": cmd_evaluate,
    "mesh": cmd_mesh,
}


def _thread_limit(threads):
    if threads is None:
        env = os.environ.get("NSC_THREADS")
        threads = int(env) if env else None
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(threads))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsc", description="Spatio-temporal SDF auto-decoder pipeline.")
    p.add_argument("--version", action="version", version=f"nsc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", "-c", type=Path, help="JSON run configuration")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field by dotted path (repeatable)")
        s.add_argument("--run-dir", type=Path, help="shortcut for --set run_dir=...")
        s.add_argument("--threads", type=int, help="worker threads (falls back to NSC_THREADS)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.run_dir is not None:
            cfg["run_dir"] = str(args.run_dir)
        with _thread_limit(args.threads):
            run = COMMANDS[args.command](cfg)
        run.write_manifest()
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_NUMERICAL
    except FloatingPointError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("%s", exc)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
