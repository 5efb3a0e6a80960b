"""Command-line entry point: ``segmate {train,finetune,infer,eval,analyze,phantom}``."""

from __future__ import annotations

import argparse
import glob
import json
import logging
import math
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from . import smv
from .cost import analyze
from .data import phantom_generate
from .errors import ConfigError, DataError, SegMateError
from .metrics import as_mask, evaluate_case
from .model import build
from .train import FineTuneConfig, TrainConfig, config_from_flat, config_to_flat, fine_tune, format_record, infer, train
from .volume import MaskVolume, Volume

VOL_SUFFIX = ".vol.smv"
MASK_SUFFIX = ".mask.smv"


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(type(o).__name__)


def _clean(o):
    # NaN is not valid JSON
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, dict):
        return {k: _clean(v) for k, v in o.items()}
    if isinstance(o, list):
        return [_clean(v) for v in o]
    return o


def _emit_json(obj, path: str | None) -> None:
    if path:
        with open(path, "w") as fh:
            json.dump(_clean(obj), fh, indent=2, default=_json_default)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_flat(path: str | None, overrides: list[str]) -> dict:
    flat: dict = {}
    if path:
        with open(path) as fh:
            flat = json.load(fh)
        if not isinstance(flat, dict):
            raise ConfigError("config", "top level must be a JSON object")
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "overrides take the form key=value")
        flat[key.strip()] = _parse_value(value)
    return flat


def load_dataset(directory: str) -> list[tuple[Volume, MaskVolume]]:
    """Pairs ``<id>.vol.smv`` / ``<id>.mask.smv`` in name order."""
    vols = sorted(glob.glob(os.path.join(directory, "*" + VOL_SUFFIX)))
    if not vols:
        raise DataError(f"no *{VOL_SUFFIX} files in {directory}")
    out = []
    for vp in vols:
        mp = vp[: -len(VOL_SUFFIX)] + MASK_SUFFIX
        if not os.path.exists(mp):
            raise DataError(f"missing mask {mp}")
        vol, mask = smv.read_smv(vp), smv.read_smv(mp)
        if not isinstance(vol, Volume) or not isinstance(mask, MaskVolume):
            raise DataError(f"{vp}: expected an HU volume and a mask")
        if vol.shape != mask.shape:
            raise DataError(f"{vp}: volume {vol.shape} and mask {mask.shape} differ")
        out.append((vol, mask))
    return out


# -- subcommands -------------------------------------------------------------


def cmd_train(args) -> int:
    flat = _load_flat(args.config, args.set)
    for key in ("epochs", "lr", "batch_size", "seed"):
        if getattr(args, key) is not None:
            flat[key] = getattr(args, key)
    flat["checkpoint_dir"] = args.out
    cfg = config_from_flat(flat, TrainConfig)
    res = train(cfg, load_dataset(args.data), on_epoch=lambda r: print(format_record(r), flush=True))
    summary = {"checkpoint": res.checkpoint_path, "best_epoch": res.best_epoch, "best_val_dice": res.best_val_dice,
               "config": config_to_flat(cfg)}
    print(format_record({"kind": "done", "checkpoint": res.checkpoint_path, "best_epoch": res.best_epoch,
                         "best_val_dice": res.best_val_dice}))
    _emit_json({"summary": summary, "log": res.log}, args.json)
    return 0


def cmd_finetune(args) -> int:
    flat = _load_flat(args.config, args.set)
    for key in ("epochs", "frozen_epochs", "lr", "batch_size", "seed"):
        if getattr(args, key) is not None:
            flat[key] = getattr(args, key)
    flat["base_checkpoint"] = args.checkpoint
    flat["checkpoint_dir"] = args.out
    cfg = config_from_flat(flat, FineTuneConfig)
    res = fine_tune(cfg, load_dataset(args.data), on_epoch=lambda r: print(format_record(r), flush=True))
    print(format_record({"kind": "done", "checkpoint": res.checkpoint_path, "best_epoch": res.best_epoch,
                         "best_val_dice": res.best_val_dice}))
    _emit_json({"log": res.log}, args.json)
    return 0


def cmd_infer(args) -> int:
    net, _ = ckpt.load_model(args.checkpoint)
    vol = smv.read_smv(args.input)
    if not isinstance(vol, Volume):
        raise DataError(f"{args.input} holds a mask, expected an HU volume")
    pred = infer(net, vol, args.gate, args.z_mode)
    smv.write_smv(args.output, as_mask(pred, net.config.num_classes, vol.patient_id))
    print(format_record({"kind": "infer", "input": args.input, "output": args.output,
                         "slices": vol.shape[0], "gate": args.gate}))
    return 0


def cmd_eval(args) -> int:
    pred, gt = smv.read_smv(args.pred), smv.read_smv(args.gt)
    for path, obj in ((args.pred, pred), (args.gt, gt)):
        if not isinstance(obj, MaskVolume):
            raise DataError(f"{path} is not a mask file")
    if pred.shape != gt.shape:
        raise DataError(f"grids differ: {pred.shape} vs {gt.shape}")
    k = max(pred.num_classes, gt.num_classes)
    names = args.names.split(",") if args.names else None
    gt = MaskVolume(gt.labels, k, gt.spacing, gt.patient_id)
    report = evaluate_case(pred, gt, names, gt.spacing)
    print(report.to_text())
    _emit_json(report.to_dict(), args.json)
    return 0


def cmd_analyze(args) -> int:
    flat = _load_flat(args.config, args.set)
    presets = ["segmate", "vanilla"] if args.preset == "both" else [args.preset]
    results = {}
    for name in presets:
        cfg = config_from_flat({**flat, "preset": name}, TrainConfig).model
        net = build(cfg, 0)
        h, w = cfg.input_size
        rep = analyze(net, (args.batch, cfg.in_slices, h, w))
        print(f"## {name}")
        print(rep.to_text(args.slices, per_layer=not args.summary))
        results[name] = rep.to_dict(args.slices)
    if len(results) == 2:
        s, v = results["segmate"], results["vanilla"]
        cmp = {
            "flops_reduction": 1 - s["total_flops"] / v["total_flops"],
            "peak_bytes_reduction": 1 - s["peak_activation_bytes"] / v["peak_activation_bytes"],
        }
        print(format_record({"kind": "compare", **cmp}))
        results["compare"] = cmp
    _emit_json(results, args.json)
    return 0


def cmd_phantom(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    grid = tuple(args.grid)
    items = phantom_generate(args.seed, args.count, grid, args.classes, tuple(args.spacing))
    for vol, mask in items:
        smv.write_smv(os.path.join(args.out, vol.patient_id + VOL_SUFFIX), vol)
        smv.write_smv(os.path.join(args.out, mask.patient_id + MASK_SUFFIX), mask)
    print(format_record({"kind": "phantom", "count": len(items), "grid": "x".join(map(str, grid)),
                         "classes": args.classes, "out": args.out}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segmate", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log every optimisation step")
    sub = p.add_subparsers(dest="command", required=True)

    def common_config(sp):
        sp.add_argument("--config", help="flat JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field (value parsed as JSON when possible)")
        sp.add_argument("--json", help="also write the result as JSON to this path")

    sp = sub.add_parser("train", help="train a network from scratch")
    common_config(sp)
    sp.add_argument("--data", required=True, help="directory of .vol.smv/.mask.smv pairs")
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("finetune", help="fine-tune a checkpoint with a frozen-encoder warm-up")
    common_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--frozen-epochs", dest="frozen_epochs", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("infer", help="segment an HU volume")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--output", required=True)
    sp.add_argument("--gate", type=float, default=None, help="presence gating threshold (off by default)")
    sp.add_argument("--z-mode", dest="z_mode", choices=("index", "physical"), default="index")
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("eval", help="per-organ Dice and HD95 of a prediction")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--names", help="comma-separated organ names for classes 1..K-1")
    sp.add_argument("--json")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("analyze", help="FLOPs, parameters and peak activation memory")
    common_config(sp)
    sp.add_argument("--preset", choices=("segmate", "vanilla", "both"), default="both")
    sp.add_argument("--slices", type=int, default=162, help="slices per volume for GFLOPs/volume")
    sp.add_argument("--batch", type=int, default=1)
    sp.add_argument("--summary", action="store_true", help="totals only, no per-layer table")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("phantom", help="generate synthetic CT volumes and masks")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--count", type=int, default=40)
    sp.add_argument("--grid", type=int, nargs=3, default=(24, 48, 48), metavar=("Z", "H", "W"))
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0), metavar=("SZ", "SY", "SX"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_phantom)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (SegMateError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
