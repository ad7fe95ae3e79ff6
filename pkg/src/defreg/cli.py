"""Command-line surface: synthesize, train, evaluate, register.

Exit codes: 0 success, 1 runtime/I-O failure, 2 usage error. Every command
writes a manifest.json into its output directory before touching anything else;
the end-of-run timestamp goes into a separate completed.json marker so the
manifest itself is write-once.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import __version__
from .data import (ElasticDeformConfig, dataset_checksum, default_elastic_config,
                   generate_shapes_dataset, load_dataset, random_elastic_field,
                   save_dataset, save_png16, synthesize_modality)
from .grids import DeformationField, ImageGrid, warp
from .metrics import aggregate, evaluate_pair, write_report
from .training import (TrainConfig, TrainingDiverged, fit, load_checkpoint,
                       make_variant, restore_networks)


class UsageError(Exception):
    """Bad arguments or inconsistent inputs: exit code 2."""


def runs_root() -> Path:
    return Path(os.environ.get("DEFREG_RUNS_DIR", "runs"))


def _write_manifest(out_dir: Path, command: str, seed, config_path=None, data_checksum=None):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": str(config_path) if config_path else None,
        "dataset_checksum": data_checksum,
        "seed": seed,
        "code_version": __version__,
        "start_timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    os.replace(tmp, out_dir / "manifest.json")


def _mark_completed(out_dir: Path):
    (out_dir / "completed.json").write_text(json.dumps(
        {"end_timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())}, indent=2))


def _elastic_from_args(args, size: int) -> ElasticDeformConfig:
    base = default_elastic_config(size)
    return ElasticDeformConfig(
        control_grid_spacing=args.grid_spacing if args.grid_spacing is not None
        else base.control_grid_spacing,
        max_displacement=args.max_displacement if args.max_displacement is not None
        else base.max_displacement,
        smoothing_sigma=args.smoothing_sigma if args.smoothing_sigma is not None
        else base.smoothing_sigma,
    )


def cmd_synthesize(args) -> int:
    out = Path(args.out)
    _write_manifest(out, "synthesize", args.seed)
    if args.shapes:
        elastic = _elastic_from_args(args, args.size)
        counts = {"train": args.pairs, "val": args.val_pairs, "test": args.test_pairs}
        for split, n in counts.items():
            if n <= 0:
                continue
            ds = generate_shapes_dataset(n, size=args.size, elastic=elastic,
                                         seed=args.seed, split=split)
            save_dataset(ds, out)
            print(f"wrote {n} pairs to {out / split}")
    elif args.input:
        src_root = Path(args.input)
        wrote_any = False
        for split in ("train", "val", "test"):
            if not (src_root / split).is_dir():
                continue
            ds = load_dataset(src_root, split=split)
            elastic = _elastic_from_args(args, ds[0].source.height)
            for i, rec in enumerate(ds):
                rng = np.random.default_rng(np.random.SeedSequence((args.seed, split_index(split), i)))
                eight_bit = (rec.source.data + 1.0) * 127.5
                gt = random_elastic_field(elastic, eight_bit.shape, rng=rng)
                rec.target = synthesize_modality(ImageGrid(eight_bit, rec.source.modality_tag),
                                                 rec.source_mask, deformation=gt)
                if rec.source_mask is not None:
                    rec.target_mask = warp(rec.source_mask, gt, interpolation="nearest")
                rec.gt_field = gt
            save_dataset(ds, out)
            print(f"re-synthesized {len(ds)} pairs to {out / split}")
            wrote_any = True
        if not wrote_any:
            raise UsageError(f"no train/val/test splits found under {src_root}")
    else:
        raise UsageError("pass --shapes or --input DIR")
    _mark_completed(out)
    return 0


def split_index(split: str) -> int:
    return ("train", "val", "test").index(split)


def _resolve_config(args) -> TrainConfig:
    """Precedence: CLI flags > config file > defaults."""
    base = TrainConfig().to_dict()
    if args.config:
        file_cfg = json.loads(Path(args.config).read_text())
        for k, v in file_cfg.items():
            if isinstance(v, dict) and isinstance(base.get(k), dict):
                base[k].update(v)
            else:
                base[k] = v
    overrides = {
        "epochs": args.epochs, "lr": args.lr, "seed": args.seed,
        "batch_size": args.batch_size, "checkpoint_interval": args.checkpoint_interval,
        "decay_start_epoch": args.decay_start_epoch, "ngf": args.ngf,
        "embed_dim": args.embed_dim, "hidden_dim": args.hidden_dim,
    }
    for k, v in overrides.items():
        if v is not None:
            base[k] = v
    if args.num_locations is not None:
        base["nce"]["num_locations"] = args.num_locations
    if args.lambda_s is not None:
        base["weights"]["lambda_s"] = args.lambda_s
    config = TrainConfig.from_dict(base)
    return make_variant(config, args.variant)


def cmd_train(args) -> int:
    data_root = Path(args.data)
    if not data_root.is_dir():
        raise UsageError(f"dataset directory {data_root} does not exist")
    config = _resolve_config(args)
    run_dir = runs_root() / args.name
    if (run_dir / "history.csv").exists() and not args.resume:
        raise UsageError(f"{run_dir} already holds a run; pass --resume or a new --name")
    _write_manifest(run_dir, "train", config.seed, config_path=args.config,
                    data_checksum=dataset_checksum(data_root))
    train_ds = load_dataset(data_root, split="train")
    try:
        val_ds = load_dataset(data_root, split="val")
    except FileNotFoundError:
        val_ds = None
    try:
        result = fit(train_ds, val_ds, config, run_dir, resume=args.resume, quiet=args.quiet)
    except TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 1
    _mark_completed(run_dir)
    print(f"best checkpoint: {result.best_checkpoint} (val DSC {result.best_val_dsc:.4f})")
    print(f"last checkpoint: {result.last_checkpoint}")
    return 0


def cmd_evaluate(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    nets, _ = restore_networks(payload)
    nets.eval()
    ds = load_dataset(args.data, split=args.split)
    run_name = args.name or Path(args.checkpoint).resolve().parent.parent.name
    out_dir = Path(args.out) if args.out else Path("eval") / run_name
    _write_manifest(out_dir, "evaluate", payload["config"].get("seed"),
                    data_checksum=dataset_checksum(args.data))
    reports, names = [], []
    units = "px"
    for rec in ds:
        if rec.source_mask is None or rec.target_mask is None:
            print(f"skipping {rec.name}: missing masks", file=sys.stderr)
            continue
        x = torch.from_numpy(rec.source.data.astype(np.float32))[None, None]
        y = torch.from_numpy(rec.target.data.astype(np.float32))[None, None]
        with torch.no_grad():
            flow = nets.registration(x, y)
        spacing = float(rec.meta.get("spacing_mm", 1.0))
        if "spacing_mm" in rec.meta:
            units = "mm"
        reports.append(evaluate_pair(rec.source_mask, rec.target_mask,
                                     DeformationField(flow[0].numpy()), spacing=spacing))
        names.append(rec.name)
    if not reports:
        print("no evaluable pairs (all missing masks)", file=sys.stderr)
        return 1
    report = aggregate(reports, units=units)
    write_report(report, out_dir, pair_names=names)
    _mark_completed(out_dir)
    hd_txt = ("n/a" if report.hd95_mean is None
              else f"{report.hd95_mean:.3f} ({report.hd95_std:.3f}) {report.units}")
    print(f"pairs evaluated: {len(reports)}")
    print(f"DSC:  {report.dsc_mean:.4f} ({report.dsc_std:.4f})")
    print(f"HD95: {hd_txt}")
    print(f"report: {out_dir / 'report.json'}")
    return 0


def _load_input_image(path) -> np.ndarray:
    arr = np.asarray(Image.open(path)).astype(np.float64)
    if arr.ndim == 3:
        arr = arr.mean(axis=2)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr, dtype=np.float32) - 1.0
    return (2.0 * (arr - lo) / (hi - lo) - 1.0).astype(np.float32)


def _hsv_field_image(flow: np.ndarray) -> Image.Image:
    mag = np.sqrt((flow ** 2).sum(axis=0))
    angle = np.arctan2(flow[0], flow[1])
    hue = ((angle + np.pi) / (2 * np.pi) * 255).astype(np.uint8)
    sat = np.full_like(hue, 255)
    peak = mag.max()
    val = (mag / peak * 255).astype(np.uint8) if peak > 0 else np.zeros_like(hue)
    hsv = np.stack([hue, sat, val], axis=2)
    return Image.fromarray(hsv, mode="HSV").convert("RGB")


def _grid_overlay_image(flow: np.ndarray, step: int = 8) -> Image.Image:
    h, w = flow.shape[1:]
    pattern = np.zeros((h, w), dtype=np.float32)
    pattern[::step, :] = 1.0
    pattern[:, ::step] = 1.0
    warped = warp(ImageGrid(pattern), DeformationField(flow), interpolation="bilinear")
    return Image.fromarray((np.clip(warped.data, 0, 1) * 255).astype(np.uint8), mode="L")


def cmd_register(args) -> int:
    out_dir = Path(args.out)
    payload = load_checkpoint(args.checkpoint)
    nets, _ = restore_networks(payload)
    nets.eval()
    src = _load_input_image(args.source)
    tgt = _load_input_image(args.target)
    if src.shape != tgt.shape:
        raise UsageError(f"source {src.shape} and target {tgt.shape} differ in shape")
    _write_manifest(out_dir, "register", payload["config"].get("seed"))
    x = torch.from_numpy(src)[None, None]
    y = torch.from_numpy(tgt)[None, None]
    with torch.no_grad():
        flow_t = nets.registration(x, y)
    flow = flow_t[0].numpy()
    np.save(out_dir / "field.npy", flow)
    warped = warp(ImageGrid(src), DeformationField(flow), interpolation="bilinear")
    save_png16(out_dir / "warped.png",
               np.round((np.clip(warped.data, -1, 1) + 1) / 2 * 65535).astype(np.uint16))
    _grid_overlay_image(flow).save(out_dir / "grid_overlay.png")
    _hsv_field_image(flow).save(out_dir / "field_hsv.png")
    _mark_completed(out_dir)
    mean_mag = float(np.sqrt((flow ** 2).sum(axis=0)).mean())
    print(f"mean |displacement|: {mean_mag:.4f} px")
    print(f"outputs in {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defreg",
                                     description="Translation-based unsupervised deformable registration")
    sub = parser.add_subparsers(dest="command", required=True)

    p_syn = sub.add_parser("synthesize", help="generate or re-synthesize a paired dataset")
    p_syn.add_argument("--shapes", action="store_true", help="generate the random-shapes dataset")
    p_syn.add_argument("--input", default=None, help="existing dataset to re-synthesize targets for")
    p_syn.add_argument("--pairs", type=int, default=20)
    p_syn.add_argument("--val-pairs", type=int, default=0)
    p_syn.add_argument("--test-pairs", type=int, default=0)
    p_syn.add_argument("--size", type=int, default=64)
    p_syn.add_argument("--seed", type=int, default=0)
    p_syn.add_argument("--out", required=True)
    p_syn.add_argument("--grid-spacing", type=float, default=None)
    p_syn.add_argument("--max-displacement", type=float, default=None)
    p_syn.add_argument("--smoothing-sigma", type=float, default=None)

    p_tr = sub.add_parser("train", help="train a model on a prepared dataset")
    p_tr.add_argument("--data", required=True)
    p_tr.add_argument("--name", default="run")
    p_tr.add_argument("--config", default=None, help="JSON config file (CLI flags win)")
    p_tr.add_argument("--variant", default="full",
                      choices=["full", "no_local", "no_global", "no_local_global"])
    p_tr.add_argument("--epochs", type=int, default=None)
    p_tr.add_argument("--lr", type=float, default=None)
    p_tr.add_argument("--seed", type=int, default=None)
    p_tr.add_argument("--batch-size", type=int, default=None)
    p_tr.add_argument("--checkpoint-interval", type=int, default=None)
    p_tr.add_argument("--decay-start-epoch", type=int, default=None)
    p_tr.add_argument("--ngf", type=int, default=None)
    p_tr.add_argument("--embed-dim", type=int, default=None)
    p_tr.add_argument("--hidden-dim", type=int, default=None)
    p_tr.add_argument("--num-locations", type=int, default=None)
    p_tr.add_argument("--lambda-s", type=float, default=None)
    p_tr.add_argument("--resume", default=None, help="checkpoint to continue from")
    p_tr.add_argument("--quiet", action="store_true")

    p_ev = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p_ev.add_argument("--data", required=True)
    p_ev.add_argument("--checkpoint", required=True)
    p_ev.add_argument("--split", default="test", choices=["train", "val", "test"])
    p_ev.add_argument("--out", default=None)
    p_ev.add_argument("--name", default=None)

    p_rg = sub.add_parser("register", help="register one image pair with a trained model")
    p_rg.add_argument("--checkpoint", required=True)
    p_rg.add_argument("--source", required=True)
    p_rg.add_argument("--target", required=True)
    p_rg.add_argument("--out", required=True)
    return parser


_HANDLERS = {
    "synthesize": cmd_synthesize,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "register": cmd_register,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return _HANDLERS[args.command](args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
