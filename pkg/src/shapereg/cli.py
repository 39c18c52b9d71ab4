"""Command-line runner: generate | pretrain | train | eval | uncertainty | sweep-rho."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from . import pipeline, storage
from .phantom import PhantomSample
from .prob import DvfGaussian, entropy_map

log = logging.getLogger("shapereg")

DATASET_FORMAT = "shapereg-dataset/1"
EXIT_DIVERGED = 3


# ---------------------------------------------------------------- dataset files

def write_dataset(cfg: config_mod.ExperimentConfig, out_dir) -> Path:
    """Generate ``cfg.dataset.count`` phantoms into ``out_dir`` with a manifest."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise SystemExit(f"cannot create dataset directory {out_dir}: {exc}")
    pp = cfg.preprocess
    samples = pipeline.make_phantoms(cfg.phantom, cfg.dataset.count, pp.margin, pp.target_hw, pp.target_depth)
    entries = []
    for i, s in enumerate(samples):
        d = out_dir / f"sample_{i:03d}"
        d.mkdir(exist_ok=True)
        storage.write_tensor(d / "volumes.cmk", s.volumes.astype(np.float32))
        storage.write_tensor(d / "masks.cmk", s.masks.astype(np.uint8))
        storage.write_tensor(d / "true_dvfs.cmk", s.true_dvfs.astype(np.float32))
        entries.append({
            "id": i, "path": d.name, "ed_index": s.ed_index, "es_index": s.es_index,
            "spacing": [float(v) for v in s.spacing], "spec": s.meta.get("spec"),
        })
    splits = pipeline.split_indices(cfg.dataset.count, cfg.dataset.split)
    storage.write_json(out_dir / "manifest.json", {
        "format": DATASET_FORMAT, "count": len(entries), "samples": entries, "splits": splits,
        "phantom": cfg.phantom.to_dict(), "preprocess": dataclasses.asdict(pp),
    })
    return out_dir


def read_dataset(data_dir) -> tuple[pipeline.SequenceSet, dict]:
    data_dir = Path(data_dir)
    path = data_dir / "manifest.json"
    if not path.exists():
        raise SystemExit(f"no dataset manifest at {path}; run 'generate' first")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != DATASET_FORMAT:
        raise SystemExit(f"unsupported dataset format {manifest.get('format')!r}")
    samples = []
    for e in manifest["samples"]:
        d = data_dir / e["path"]
        samples.append(PhantomSample(
            volumes=storage.read_tensor(d / "volumes.cmk"),
            masks=storage.read_tensor(d / "masks.cmk"),
            true_dvfs=storage.read_tensor(d / "true_dvfs.cmk"),
            ed_index=e["ed_index"], es_index=e["es_index"], spacing=tuple(e["spacing"]), meta={},
        ))
    return pipeline.SequenceSet.from_samples(samples, [e["id"] for e in manifest["samples"]]), manifest


def split(data: pipeline.SequenceSet, manifest: dict, name: str) -> pipeline.SequenceSet:
    if name not in manifest["splits"]:
        raise SystemExit(f"unknown split {name!r}; have {sorted(manifest['splits'])}")
    return data.subset(manifest["splits"][name])


def latest_checkpoint(run_dir) -> Path:
    found = sorted(Path(run_dir).glob("epoch_*/manifest.json"))
    if not found:
        raise SystemExit(f"no checkpoints under {run_dir}")
    return found[-1].parent


# ---------------------------------------------------------------- commands

def _dump_divergence(out: Path, exc: pipeline.TrainingDiverged) -> int:
    out.mkdir(parents=True, exist_ok=True)
    storage.write_json(out / "divergence.json", {"step": exc.step, "batch": exc.batch, "report": exc.report})
    log.error("%s", exc)
    return EXIT_DIVERGED


def cmd_generate(cfg, args) -> int:
    out = write_dataset(cfg, Path(args.out) / "dataset")
    print(out)
    return 0


def cmd_pretrain(cfg, args) -> int:
    data, manifest = read_dataset(args.data or Path(args.out) / "dataset")
    tc = cfg.train_config(1, seed=args.seed)
    out = Path(args.out) / "pretrain"
    try:
        result = pipeline.pretrain_segnet(
            split(data, manifest, "train"), tc, out_dir=out, val=split(data, manifest, "val"),
            model_cfg=cfg.model, resume=args.resume,
        )
    except pipeline.TrainingDiverged as exc:
        return _dump_divergence(out, exc)
    print(result.checkpoints[-1] if result.checkpoints else out)
    return 0


def cmd_train(cfg, args) -> int:
    data, manifest = read_dataset(args.data or Path(args.out) / "dataset")
    use_rvae, use_seg = pipeline.ABLATIONS[args.ablation]
    tc = cfg.train_config(2, seed=args.seed, use_rvae=use_rvae, use_segnet_guidance=use_seg)
    segnet_ckpt = Path(args.segnet) if args.segnet else latest_checkpoint(Path(args.out) / "pretrain")
    out = Path(args.out) / f"train_config{args.ablation}"
    try:
        result = pipeline.train_full(
            split(data, manifest, "train"), segnet_ckpt, tc, out_dir=out,
            model_cfg=cfg.model, resume=args.resume,
        )
    except pipeline.TrainingDiverged as exc:
        return _dump_divergence(out, exc)
    except storage.FormatError as exc:
        raise SystemExit(f"incompatible checkpoint: {exc}")
    print(result.checkpoints[-1] if result.checkpoints else out)
    return 0


def _named(spec: str) -> tuple[str, Path]:
    name, sep, path = spec.partition("=")
    return (name, Path(path)) if sep else (Path(spec).parent.name or Path(spec).name, Path(spec))


def _override_spacing(data: pipeline.SequenceSet, spacing) -> pipeline.SequenceSet:
    if spacing is None:
        return data
    return dataclasses.replace(data, spacing=np.tile(np.asarray(spacing, dtype=np.float64), (len(data), 1)))


def run_eval(cfg, data_dir, checkpoints: list[tuple[str, Path]], identity: bool, out_dir, split_name=None) -> list:
    data, manifest = read_dataset(data_dir)
    subset = _override_spacing(split(data, manifest, split_name or cfg.eval.split), cfg.eval.spacing)
    evals = []
    if identity:
        evals.append(pipeline.evaluate(None, subset, "identity"))
    for name, ckpt in checkpoints:
        model, extra = pipeline.load_model(ckpt)
        evals.append(pipeline.evaluate(model, subset, name, use_rvae=extra.get("use_rvae", True),
                                       use_segnet=extra.get("use_segnet_guidance", True)))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    storage.write_csv(out_dir / "metrics.csv", [r for e in evals for r in e.table()], pipeline.TABLE_FIELDS)
    storage.write_csv(out_dir / "samples.csv", [r for e in evals for r in e.rows], pipeline.EVAL_FIELDS)
    storage.write_csv(out_dir / "njd.csv", [{"config": e.config, "sample": s, "njd": n}
                                            for e in evals for s, n in sorted(e.njd.items())],
                      ("config", "sample", "njd"))
    storage.write_csv(out_dir / "uncertainty.csv", [r for e in evals for r in e.uncertainty],
                      pipeline.UNCERTAINTY_FIELDS)
    tests = []
    for other in evals[1:]:
        for region, res in pipeline.compare(evals[0], other).items():
            tests.append({"a": evals[0].config, "b": other.config, "phase": "ES", "region": region,
                          "metric": "dsc", "t": res.t, "dof": res.dof, "p": res.p, "degenerate": int(res.degenerate)})
    storage.write_csv(out_dir / "ttest.csv", tests,
                      ("a", "b", "phase", "region", "metric", "t", "dof", "p", "degenerate"))
    return evals


def cmd_eval(cfg, args) -> int:
    checkpoints = [_named(c) for c in args.checkpoint]
    if not checkpoints and not args.identity:
        raise SystemExit("give at least one --checkpoint or --identity")
    run_eval(cfg, args.data or Path(args.out) / "dataset", checkpoints, args.identity,
             Path(args.out) / "eval", args.split)
    print(Path(args.out) / "eval")
    return 0


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM after min-max scaling (a constant image maps to 0)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-D image")
    lo, hi = img.min(), img.max()
    scaled = np.zeros(img.shape) if hi <= lo else (img - lo) / (hi - lo) * 255.0
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def export_uncertainty(model, extra: dict, volumes: torch.Tensor, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    r = pipeline.rollout(volumes, model, use_rvae=extra.get("use_rvae", True),
                         use_segnet=extra.get("use_segnet_guidance", True))
    mid = volumes.shape[-1] // 2
    for t in range(r.frames):
        storage.write_tensor(out_dir / f"entropy_t{t:02d}.cmk", r.entropy[t].numpy().astype(np.float32))
        for name in ("mu", "sigma2", "v"):
            storage.write_tensor(out_dir / f"dvf_{name}_t{t:02d}.cmk", getattr(r.dvf, name)[t].numpy().astype(np.float32))
        write_pgm(out_dir / f"volume_t{t:02d}.pgm", volumes[t, 0, :, :, mid].numpy())
        write_pgm(out_dir / f"entropy_t{t:02d}.pgm", r.entropy[t, 0, :, :, mid].numpy())
    return out_dir


def recompute_entropy(out_dir, t: int) -> torch.Tensor:
    """Entropy of frame ``t`` from the exported DVF distribution parameters."""
    out_dir = Path(out_dir)
    q = DvfGaussian(*[torch.from_numpy(storage.read_tensor(out_dir / f"dvf_{n}_t{t:02d}.cmk").copy())
                      for n in ("mu", "sigma2", "v")])
    return entropy_map(q)


def cmd_uncertainty(cfg, args) -> int:
    data, manifest = read_dataset(args.data or Path(args.out) / "dataset")
    if args.sample not in data.ids:
        raise SystemExit(f"sample {args.sample} not in dataset")
    model, extra = pipeline.load_model(args.checkpoint)
    out = export_uncertainty(model, extra, data.volumes[data.ids.index(args.sample)],
                             Path(args.out) / "uncertainty" / f"sample_{args.sample:03d}")
    print(out)
    return 0


def cmd_sweep_rho(cfg, args) -> int:
    data, manifest = read_dataset(args.data or Path(args.out) / "dataset")
    segnet_ckpt = Path(args.segnet) if args.segnet else latest_checkpoint(Path(args.out) / "pretrain")
    train = split(data, manifest, "train")
    val = _override_spacing(split(data, manifest, "val"), cfg.eval.spacing)
    rows = []
    for rho in cfg.sweep.rho:
        tc = cfg.train_config(2, seed=args.seed, epochs=cfg.sweep.epochs)
        tc.weights = dataclasses.replace(tc.weights, rho=float(rho))
        out = Path(args.out) / "sweep" / f"rho_{rho:g}"
        try:
            result = pipeline.train_full(train, segnet_ckpt, tc, out_dir=out, model_cfg=cfg.model)
        except pipeline.TrainingDiverged as exc:
            return _dump_divergence(out, exc)
        ev = pipeline.evaluate(result.model, val, f"rho={rho:g}")
        for row in ev.table():
            rows.append({"rho": float(rho), **row})
    storage.write_csv(Path(args.out) / "sweep" / "sweep.csv", rows, ("rho",) + pipeline.TABLE_FIELDS)
    print(Path(args.out) / "sweep" / "sweep.csv")
    return 0


COMMANDS = {
    "generate": cmd_generate, "pretrain": cmd_pretrain, "train": cmd_train,
    "eval": cmd_eval, "uncertainty": cmd_uncertainty, "sweep-rho": cmd_sweep_rho,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapereg", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, help="output directory (default: config 'output')")
    common.add_argument("--threads", type=int, help="torch intra-op threads")
    common.add_argument("--data", type=Path, help="dataset directory (default: OUT/dataset)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate", parents=[common], help="write the phantom dataset")
    p = sub.add_parser("pretrain", parents=[common], help="phase 1: SegNet only")
    p.add_argument("--resume", type=Path, help="checkpoint directory to resume from")
    p = sub.add_parser("train", parents=[common], help="phase 2: full framework")
    p.add_argument("--segnet", type=Path, help="phase-1 checkpoint (default: latest under OUT/pretrain)")
    p.add_argument("--ablation", type=int, choices=sorted(pipeline.ABLATIONS), default=1,
                   help="1: all on, 2: no SegNet, 3: no RVAE, 4: neither")
    p.add_argument("--resume", type=Path, help="checkpoint directory to resume from")
    p = sub.add_parser("eval", parents=[common], help="metrics over a dataset split")
    p.add_argument("--checkpoint", action="append", default=[], help="[NAME=]PATH, repeatable")
    p.add_argument("--identity", action="store_true", help="include the zero-DVF baseline")
    p.add_argument("--split", help="train | val | test (default from config)")
    p = sub.add_parser("uncertainty", parents=[common], help="export entropy maps for one sequence")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--sample", type=int, default=0, help="dataset sample id")
    p = sub.add_parser("sweep-rho", parents=[common], help="phase 2 over a grid of smoothness weights")
    p.add_argument("--segnet", type=Path, help="phase-1 checkpoint (default: latest under OUT/pretrain)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config) if args.config else config_mod.ExperimentConfig()
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None and args.command == "generate":
        cfg.phantom = dataclasses.replace(cfg.phantom, seed=args.seed)
    if args.out is None:
        args.out = Path(cfg.output)
    pipeline.configure_torch(args.threads)
    return COMMANDS[args.command](cfg, args)


if __name__ == "__main__":
    sys.exit(main())
