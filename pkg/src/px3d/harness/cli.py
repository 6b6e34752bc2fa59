"""Command-line entry point.

Subcommands: gen-data, train-recon, train-cls, train-seg, eval, render.
Every run writes a resolved-config JSON next to its outputs.  Exit codes:
0 success, 1 usage error, 2 runtime error.  The PX3D_SEED environment
variable overrides any configured seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .. import fusion as fusion_mod
from .. import metrics as qmetrics
from .. import pgr as pgr_mod
from ..errors import Px3dError
from . import config as hconfig
from . import io as hio
from . import render as hrender
from .data import SampleStore


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="px3d", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a phantom sample dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True, help="number of phantoms")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dims", choices=("desk", "full"), default="desk")
    g.add_argument("--lesion-prob", type=float, default=0.5)
    g.add_argument("--tooth-count", type=int, default=None)
    g.add_argument("--splits", default=None,
                   help="train,val,test as counts (e.g. 100,0,50) or fractions")

    r = sub.add_parser("train-recon", help="train the reconstruction backbone")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--alpha-schedule", choices=("paper", "reversed"), default="paper")
    r.add_argument("--dims", choices=("auto", "desk", "full"), default="auto",
                   help="informational; dims are inferred from the manifest")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--steps", type=int, default=2000)
    r.add_argument("--batch", type=int, default=8)
    r.add_argument("--lr", type=float, default=4e-4)
    r.add_argument("--split", default="train")
    r.add_argument("--ckpt-every", type=int, default=0)
    r.add_argument("--resume", default=None)

    def add_joint_args(q, task_choices=None):
        q.add_argument("--manifest", required=True)
        q.add_argument("--out", required=True)
        q.add_argument("--recon", default="gt",
                       help="'gt' or a PGR checkpoint path for the 3D inputs")
        q.add_argument("--tau", type=float, default=0.1)
        q.add_argument("--lambda", dest="lam", type=float, default=0.1)
        q.add_argument("--cma-mode", choices=("literal", "inclusive"), default="literal")
        q.add_argument("--cma-tap", default=None)
        q.add_argument("--fusion", choices=("bidi", "none"), default="bidi")
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--steps", type=int, default=200)
        q.add_argument("--batch", type=int, default=8)
        q.add_argument("--lr", type=float, default=1e-4)
        q.add_argument("--split", default="train")
        q.add_argument("--ckpt-every", type=int, default=0)
        q.add_argument("--resume", default=None)

    c = sub.add_parser("train-cls", help="train misalignment classification")
    c.add_argument("--classes", type=int, choices=(2, 5), required=True)
    c.add_argument("--t-max", type=int, default=200, help="cosine annealing T_max")
    add_joint_args(c)

    s = sub.add_parser("train-seg", help="train lesion segmentation")
    add_joint_args(s)

    e = sub.add_parser("eval", help="evaluate a checkpoint (or fixed predictions)")
    e.add_argument("--task", choices=("recon", "cls2", "cls5", "seg"), required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--predictions", default=None,
                   help="JSON {sample_id: class_id} instead of a checkpoint")
    e.add_argument("--recon", default="gt")
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)

    v = sub.add_parser("render", help="render a volume to a PNG image")
    v.add_argument("--volume", required=True)
    v.add_argument("--mode", choices=("mip", "threshold"), default="mip")
    v.add_argument("--axis", choices=("depth", "height", "width"), default="depth")
    v.add_argument("--out", required=True)
    return p


def _env_seed(seed: int) -> int:
    env = os.environ.get("PX3D_SEED")
    return int(env) if env is not None else seed


def format_table(report: dict, title: str = "") -> str:
    rows = []
    for key, value in report.items():
        if key == "per_class":
            continue
        rows.append((key, f"{value:.6g}" if isinstance(value, float) else str(value)))
    width = max(len(k) for k, _ in rows)
    lines = [title] if title else []
    lines += [f"{k:<{width}}  {v}" for k, v in rows]
    for entry in report.get("per_class", []):
        lines.append(
            f"  class {entry['class']}: precision {entry['precision']:.4f} "
            f"recall {entry['recall']:.4f} f1 {entry['f1']:.4f} "
            f"support {entry['support']}")
    return "\n".join(lines)


def _write_report(report: dict, out_dir: Path, name: str, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    hio.atomic_write_bytes(out_dir / f"{name}.json",
                           json.dumps(report, indent=2, sort_keys=True).encode())
    hio.atomic_write_bytes(out_dir / f"{name}.txt",
                           (format_table(report, title=name) + "\n").encode())
    hio.atomic_write_bytes(out_dir / "config.json",
                           json.dumps(resolved, indent=2, sort_keys=True).encode())


def _eval_recon(args) -> dict:
    store = SampleStore(args.manifest, split=args.split)
    model, _ = pgr_mod.load_pgr(args.checkpoint)
    psnrs, ssims, dscs = [], [], []
    for px, gt in zip(store.px, store.unfolded):
        recon = pgr_mod.reconstruct(model, px)
        psnrs.append(qmetrics.psnr(recon, gt))
        ssims.append(qmetrics.ssim(recon, gt, win_size=7))
        dscs.append(qmetrics.dsc_volumes(recon, gt))
    return {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims)),
            "dsc": float(np.mean(dscs)), "count": len(store)}


def _eval_cls_predictions(args, num_classes: int) -> dict:
    store = SampleStore(args.manifest, split=args.split)
    with open(args.predictions) as f:
        pred_map = json.load(f)
    try:
        preds = [int(pred_map[sid]) for sid in store.ids]
    except KeyError as e:
        raise Px3dError(f"predictions file missing sample id {e}") from e
    labels = store.binary_labels if num_classes == 2 else store.class_ids
    return qmetrics.classification_report(np.asarray(preds), labels, num_classes)


def _run_eval(args) -> dict:
    if args.task == "recon":
        if not args.checkpoint:
            raise UsageError("eval --task recon requires --checkpoint")
        return _eval_recon(args)
    if args.task in ("cls2", "cls5"):
        if args.predictions:
            return _eval_cls_predictions(args, 2 if args.task == "cls2" else 5)
    if not args.checkpoint:
        raise UsageError(f"eval --task {args.task} requires --checkpoint or --predictions")
    model, _ = fusion_mod.load_joint(args.checkpoint)
    store = SampleStore(args.manifest, split=args.split,
                        require_mask=args.task == "seg")
    return fusion_mod.eval_joint(model, store, args.task, recon=args.recon)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"px3d: {e}", file=sys.stderr)
        return 1
    try:
        if args.command == "gen-data":
            splits = None
            if args.splits:
                parts = [float(x) if "." in x else int(x) for x in args.splits.split(",")]
                splits = tuple(parts)
            manifest = hconfig.generate_sample_dataset(
                args.out, args.count, _env_seed(args.seed), dims=args.dims,
                lesion_probability=args.lesion_prob, tooth_count=args.tooth_count,
                splits=splits)
            print(f"wrote {manifest}")
        elif args.command == "train-recon":
            cfg = pgr_mod.TrainReconConfig(
                out_dir=args.out, steps=args.steps, batch_size=args.batch,
                lr=args.lr, seed=_env_seed(args.seed),
                alpha_schedule=args.alpha_schedule, split=args.split,
                ckpt_every=args.ckpt_every, resume=args.resume)
            ckpt, log = pgr_mod.train_pgr(args.manifest, cfg)
            tail = f"final loss {log[-1]['loss']:.6g}; " if log else ""
            print(f"{tail}checkpoint {ckpt}")
        elif args.command in ("train-cls", "train-seg"):
            task = "seg" if args.command == "train-seg" else f"cls{args.classes}"
            cfg = fusion_mod.TrainJointConfig(
                out_dir=args.out, task=task, steps=args.steps,
                batch_size=args.batch, lr=args.lr,
                cosine_t_max=getattr(args, "t_max", 200),
                tau=args.tau, lam=args.lam, cma_mode=args.cma_mode,
                recon=args.recon, fusion=args.fusion == "bidi",
                cma_tap=args.cma_tap, seed=_env_seed(args.seed),
                split=args.split, ckpt_every=args.ckpt_every, resume=args.resume)
            ckpt, log = fusion_mod.train_joint(args.manifest, cfg)
            tail = f"final loss {log[-1]['loss']:.6g}; " if log else ""
            print(f"{tail}checkpoint {ckpt}")
        elif args.command == "eval":
            report = _run_eval(args)
            resolved = {"kind": "eval", "task": args.task, "manifest": args.manifest,
                        "checkpoint": args.checkpoint, "predictions": args.predictions,
                        "split": args.split, "recon": args.recon}
            _write_report(report, Path(args.out), f"metrics_{args.task}", resolved)
            print(format_table(report, title=f"eval {args.task} [{args.split}]"))
        elif args.command == "render":
            vol = hio.read_volume(args.volume)
            img = (hrender.render_mip(vol, axis=args.axis) if args.mode == "mip"
                   else hrender.render_threshold(vol))
            hio.write_png16(img, args.out, kind="render")
            resolved = {"kind": "render", "volume": args.volume, "mode": args.mode,
                        "axis": args.axis}
            hio.atomic_write_bytes(
                Path(args.out).with_suffix(".config.json"),
                json.dumps(resolved, indent=2, sort_keys=True).encode())
            print(f"wrote {args.out}")
    except UsageError as e:
        print(f"px3d: {e}", file=sys.stderr)
        return 1
    except (Px3dError, OSError, json.JSONDecodeError) as e:
        print(f"px3d: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
