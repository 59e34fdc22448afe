"""Command-line workflow: data generation, training, retargeting, probing, evaluation.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage error.
"""
from __future__ import annotations

import os

# thread caps must be in place before numpy loads its BLAS
if os.environ.get("VIA_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["VIA_THREADS"])

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import evaluation as ev
from . import skeleton as sk
from .losses import LossConfig
from .sampler import fit_dataset
from .trainer import ProbeConfig, TrainConfig, Trainer, load_model


class UsageError(Exception):
    pass


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _write_run_config(path: Path, command: str, resolved: dict) -> None:
    doc = {"command": command, **resolved}
    _atomic_text(path, json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise UsageError(f"--set expects key=value, got {text!r}")
    k, v = text.split("=", 1)
    try:
        return k, json.loads(v)
    except json.JSONDecodeError:
        return k, v


def _read_dataset(path) -> sk.SkeletonDataset:
    p = Path(path)
    if not (p / "manifest.json").exists() and not p.is_file():
        raise FileNotFoundError(f"no manifest at {p}")
    return sk.read_dataset(p)


def _load_checkpoint(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    model = load_model(path)
    cfg = TrainConfig.from_dict(ckpt.load_config(path))
    return model, cfg


# ---------------------------------------------------------------- subcommands


def cmd_generate_data(args) -> int:
    if args.frames % 8:
        raise UsageError(f"--frames {args.frames} must be divisible by 8 (three stride-2 encoder stages)")
    if args.dim not in (2, 3):
        raise UsageError(f"--dim must be 2 or 3, got {args.dim}")
    if args.joints != len(sk.JOINT_NAMES):
        raise UsageError(f"--joints must be {len(sk.JOINT_NAMES)} for the synthetic skeleton")
    if args.motions < 2 or args.characters < 2:
        raise UsageError("--motions and --characters must be at least 2")
    ds = sk.generate_dataset(args.motions, args.characters, args.frames, args.joints, args.dim,
                             args.seed, yaw_range_deg=args.yaw_range)
    if args.clusters < 2:
        raise UsageError("--clusters must be at least 2")
    ds.clusters = fit_dataset(ds.frames, min(args.clusters, len(ds)), args.seed).assignments
    out = Path(args.out)
    manifest = sk.write_dataset(ds, out)
    _write_run_config(out / "run_config.json", "generate-data", {**ds.params, "clusters": args.clusters})
    print(f"wrote {len(ds)} sequences to {out} (dataset {ds.dataset_id[:12]})")
    print(manifest)
    return 0


def _train_config(args) -> TrainConfig:
    d = TrainConfig().to_dict()
    if args.config:
        user = json.loads(Path(args.config).read_text())
        if not isinstance(user, dict):
            raise UsageError("config file must hold a JSON object")
        for k, v in user.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k].update(v)
            else:
                d[k] = v
    for text in args.set or []:
        k, v = _parse_override(text)
        _set_dotted(d, k, v)
    for flag, key in (("seed", "seed"), ("steps", "max_steps"), ("lr", "lr"), ("batch_size", "batch_size")):
        if getattr(args, flag) is not None:
            d[key] = getattr(args, flag)
    if args.losses:
        weights = {k: d["loss"][k] for k in ("margin", "velocity_weight") if k in d["loss"]}
        d["loss"] = asdict(LossConfig.ablation(args.losses, **weights))
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid training config: {e}") from e


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds = _read_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_config(out / "config.json", "train", {"data": str(args.data), **cfg.to_dict()})
    existing = out / "checkpoint.viac"
    if args.resume and existing.exists():
        tr = Trainer.resume(existing, ds, cfg)
        print(f"resuming at step {tr.step_count}")
    else:
        init = None
        if args.init:
            init, _ = _load_checkpoint(args.init)
            if init.config != cfg.model:
                raise UsageError("--init checkpoint has a different model config")
        tr = Trainer(ds, cfg, model=init)
    tr.run(out_dir=out)
    last = tr.metrics[-1] if tr.metrics else {}
    print(f"trained {tr.step_count} steps; final loss {last.get('l_total', float('nan')):.6f}")
    print(existing)
    return 0


def _parse_magnitudes(text: str, K: int) -> np.ndarray:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError as e:
        raise UsageError(f"--magnitudes must be comma-separated numbers: {e}") from e
    if len(vals) != K:
        raise UsageError(f"--magnitudes needs K={K} values, got {len(vals)}")
    return np.array(vals)


def cmd_retarget(args) -> int:
    model, cfg = _load_checkpoint(args.checkpoint)
    driving = sk.root_center(sk.read_sequence(args.driving).frames)
    if args.magnitudes is not None:
        mags = _parse_magnitudes(args.magnitudes, cfg.model.K)
        out = model.with_magnitudes(driving[None], mags[None])[0]
    else:
        if args.source is None:
            raise UsageError("retarget needs --source or --magnitudes")
        source = sk.root_center(sk.read_sequence(args.source).frames)
        if source.shape != driving.shape:
            raise UsageError(f"driving {driving.shape} and source {source.shape} shapes differ")
        out = model.retarget(driving[None], source[None])[0]
    sk.write_sequence(args.out, out.astype(np.float32))
    _write_run_config(Path(str(args.out) + ".config.json"), "retarget", vars(args))
    print(args.out)
    return 0


def cmd_probe(args) -> int:
    model, _ = _load_checkpoint(args.checkpoint)
    ds = _read_dataset(args.data)
    pc = ProbeConfig(mode=args.mode, steps=args.steps, seed=args.seed)
    rep = ev.eval_probe(model, ds, args.split, pc)
    print(f"{args.split} probe ({args.mode}): top-1 {rep.accuracy:.4f}  mean-per-class {rep.mean_per_class:.4f}")
    if args.out:
        doc = {"protocol": rep.protocol, "mode": args.mode, "accuracy": rep.accuracy,
               "per_class": {str(k): v for k, v in rep.per_class.items()}}
        _atomic_text(Path(args.out), json.dumps(doc, indent=1, sort_keys=True) + "\n")
        _write_run_config(Path(args.out + ".config.json"), "probe", vars(args))
    return 0


def cmd_eval(args) -> int:
    model, cfg = _load_checkpoint(args.checkpoint)
    ds = _read_dataset(args.data)
    if args.report == "retarget":
        rep = ev.eval_retargeting(model, ds, cfg.holdout_per_motion, seed=args.seed)
        print(f"retarget MSE {rep.mean:.6g}  copy-source baseline {rep.baseline_mean:.6g}  "
              f"ratio {rep.mean / rep.baseline_mean:.4f}  pairs {len(rep.mse)}")
        text = rep.to_csv()
    elif args.report == "cv-probe":
        rep = ev.eval_probe(model, ds, "cv", ProbeConfig(seed=args.seed))
        print(f"cv probe top-1 {rep.accuracy:.4f}  mean-per-class {rep.mean_per_class:.4f}")
        text = "class,accuracy\n" + "".join(f"{k},{v!r}\n" for k, v in rep.per_class.items())
        text += f"mean,{rep.accuracy!r}\n"
    else:
        inv = ev.motion_invariance(model, ds, ev.heldout_indices(ds, cfg.holdout_per_motion))
        print(f"median same-motion {inv.median_same:.4f}  median cross-motion {inv.median_cross:.4f}  "
              f"gap {inv.gap:.4f}  same pairs {len(inv.same_motion)}")
        text = ("statistic,value\n"
                f"median_same,{inv.median_same!r}\nmedian_cross,{inv.median_cross!r}\n"
                f"gap,{inv.gap!r}\nn_same,{len(inv.same_motion)}\nn_cross,{len(inv.cross_motion)}\n")
    if args.out:
        _atomic_text(Path(args.out), text)
        _write_run_config(Path(args.out + ".config.json"), "eval", vars(args))
    return 0


def cmd_export_embeddings(args) -> int:
    model, _ = _load_checkpoint(args.checkpoint)
    ds = _read_dataset(args.data)
    path = ev.export_embeddings(model, ds, args.out)
    _write_run_config(Path(str(args.out) + ".config.json"), "export-embeddings", vars(args))
    print(path)
    return 0


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"via: usage error: {message}", file=sys.stderr)
        sys.exit(2)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="via", description="View-invariant skeleton autoencoder toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-data", help="render the synthetic motion x character dataset")
    g.add_argument("--motions", type=int, default=8)
    g.add_argument("--characters", type=int, default=12)
    g.add_argument("--frames", type=int, default=64)
    g.add_argument("--joints", type=int, default=13)
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--seed", type=int, default=7)
    g.add_argument("--yaw-range", type=float, default=180.0, help="view angles span +/- this many degrees")
    g.add_argument("--clusters", type=int, default=10, help="k for the manifest's K-Means assignment")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_generate_data)

    t = sub.add_parser("train", help="pre-training (supervised retargeting or self-supervised)")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON training config")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override max_steps")
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override, e.g. loss.velocity_weight=0.1")
    t.add_argument("--losses", choices=["L0", "L1", "L2", "L3", "L4"],
                   help="ablation row: L0 supervised retargeting, L1..L4 self-supervised")
    t.add_argument("--init", metavar="CHECKPOINT", help="start from the weights of a trained model")
    t.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.viac")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("retarget", help="transfer the source character onto the driving motion")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--driving", required=True)
    r.add_argument("--source")
    r.add_argument("--magnitudes", help="K comma-separated character magnitudes (replaces --source)")
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_retarget)

    pr = sub.add_parser("probe", help="train and test an action probe on a frozen or fine-tuned encoder")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--split", choices=("cv", "cs"), default="cv")
    pr.add_argument("--mode", choices=("linear", "finetune"), default="linear")
    pr.add_argument("--steps", type=int, default=300)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", help="JSON report path")
    pr.set_defaults(fn=cmd_probe)

    e = sub.add_parser("eval", help="evaluation reports")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", choices=("retarget", "cv-probe", "invariance"), required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", help="CSV report path")
    e.set_defaults(fn=cmd_eval)

    x = sub.add_parser("export-embeddings", help="CSV of motion codes and character magnitudes")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(fn=cmd_export_embeddings)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"via: usage error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, ckpt.CheckpointError, sk.SequenceFormatError, RuntimeError) as e:
        print(f"via: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
