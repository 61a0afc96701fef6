"""Command-line entry point: ``ergoseg <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import shlex
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import reba
from .data import (DatasetError, SynthConfig, assign_splits, generate_synthetic, load_dataset,
                   read_sequence, save_dataset, write_sequence)
from .graph import TopologyError, canonical_topology, load_topology
from .model import load_checkpoint
from .training import (ConfigError, DivergenceError, TrainConfig, apply_env, evaluate, fit,
                       parse_config, predict)

log = logging.getLogger("ergoseg")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4, 5


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(","))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ergoseg", description=__doc__)
    p.add_argument("--json-summary", action="store_true",
                   help="print a one-line JSON run summary on stdout")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset and manifest")
    s.add_argument("--out", required=True)
    s.add_argument("--classes", type=int, default=5)
    s.add_argument("--videos", type=int, default=8)
    s.add_argument("--segments", type=int, default=None)
    s.add_argument("--t-min", type=int, default=120)
    s.add_argument("--t-max", type=int, default=200)
    s.add_argument("--noise", type=float, default=0.01)
    s.add_argument("--smoothing", type=float, default=reba.DEFAULT_SMOOTHING)
    s.add_argument("--val", type=int, default=None, help="validation videos (default: a quarter)")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("reba", help="fill raw and smoothed REBA columns of skeleton files")
    s.add_argument("files", nargs="*")
    s.add_argument("--manifest", help="take class contexts and smoothing from this manifest")
    s.add_argument("--smoothing", type=float, default=None)
    s.add_argument("--topology")

    s = sub.add_parser("train", help="learning-rate sweep with early stopping")
    s.add_argument("--manifest")
    s.add_argument("--config", help="key = value file; flags override it")
    s.add_argument("--variant", choices=["stl-as", "stl-pa", "mtl-base", "mtl-emb"])
    s.add_argument("--lr", type=_floats, help="comma-separated learning rates")
    s.add_argument("--epochs", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="checkpoint directory")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")

    s = sub.add_parser("eval", help="write a metrics report for one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="val", help="split name or 'all'")
    s.add_argument("--out", required=True)

    s = sub.add_parser("predict", help="per-frame labels and risk for sequences")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("files", nargs="*")
    s.add_argument("--manifest")
    s.add_argument("--out", required=True)

    s = sub.add_parser("report", help="render ribbon reports (SVG + CSV)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="val", help="split name or 'all'")
    s.add_argument("--video", action="append", default=[], help="restrict to these video ids")
    s.add_argument("--out", required=True)
    return p


def _cmd_synth(args) -> dict:
    cfg = SynthConfig(classes=args.classes, videos=args.videos, segments=args.segments,
                      t_min=args.t_min, t_max=args.t_max, noise=args.noise,
                      smoothing=args.smoothing)
    ds = generate_synthetic(cfg, args.seed)
    ds.splits = assign_splits([s.video_id for s in ds.sequences], args.val, args.seed)
    manifest = save_dataset(args.out, ds)
    return {"manifest": str(manifest), "videos": len(ds.sequences), "classes": ds.num_classes,
            "frames": int(sum(s.length for s in ds.sequences))}


def _cmd_reba(args) -> dict:
    topology = load_topology(args.topology) if args.topology else canonical_topology()
    contexts, smoothing, files = None, reba.DEFAULT_SMOOTHING, [Path(f) for f in args.files]
    if args.manifest:
        ds = load_dataset(args.manifest, compute_missing=False)
        topology, smoothing = ds.topology, ds.smoothing
        contexts = [c.context for c in ds.classes]
        if not files:
            base = Path(args.manifest).parent
            files = [base / ln.split()[2] for ln in Path(args.manifest).read_text().splitlines()
                     if ln.split()[:1] == ["video"]]
    if args.smoothing is not None:
        smoothing = args.smoothing
    if not files:
        raise ConfigError("no skeleton files given")
    for path in files:
        seq = read_sequence(path, topology)
        ctx = [contexts[c] for c in seq.labels] if contexts else None
        seq.reba_raw = reba.score_frames(seq.joints, topology, ctx)
        seq.reba_smooth = reba.smooth_scores(seq.reba_raw, smoothing)
        write_sequence(path, seq, topology)
    return {"files": len(files), "smoothing": smoothing}


def _train_config(args) -> TrainConfig:
    cfg = parse_config(Path(args.config).read_text()) if args.config else TrainConfig()
    cfg = apply_env(cfg)
    if args.set:
        cfg = parse_config("\n".join(args.set), cfg)
    flags = {"variant": args.variant, "learning_rates": args.lr, "max_epochs": args.epochs,
             "patience": args.patience, "batch_size": args.batch_size, "seed": args.seed,
             "checkpoint_dir": args.out, "manifest": args.manifest}
    try:
        return replace(cfg, **{k: v for k, v in flags.items() if v is not None})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _cmd_train(args) -> dict:
    cfg = _train_config(args)
    if cfg.manifest is None:
        raise ConfigError("train needs --manifest (or manifest = ... in the config)")

    def progress(lr, rec):
        log.info("lr=%g epoch %d train=%.4g val=%.4g", lr, rec["epoch"],
                 rec["train_loss_total"], rec["val_loss_total"])

    result = fit(cfg, epoch_callback=progress)
    return {"checkpoint": str(result.checkpoint), "best_lr": result.best_lr,
            "runs": [{"lr": r.lr, "status": r.status, "best_epoch": r.best_epoch,
                      "best_loss": r.best_loss, "epochs": len(r.history)} for r in result.runs]}


def _split(name: str):
    return None if name == "all" else name


def _cmd_eval(args) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.manifest)
    rep = evaluate(ckpt, ds, _split(args.split))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(rep.to_text())
    return {"report": args.out, "videos": len(rep.videos),
            "mean": {k: v[0] for k, v in rep.aggregate().items()}}


def _cmd_predict(args) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    names = ckpt.metadata.get("classes")
    if args.manifest:
        ds = load_dataset(args.manifest, compute_missing=False)
        seqs = ds.sequences
    else:
        seqs = [read_sequence(f, ckpt.model.topology) for f in args.files]
    if not seqs:
        raise ConfigError("no sequences to predict")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in predict(ckpt.model, seqs):
        cols, header = [np.arange(len(p.risk if p.risk is not None else p.labels))], ["frame"]
        if p.labels is not None:
            cols.append(p.labels)
            header.append("label")
            if names:
                header.append("class")
                cols.append(np.array([names[c] for c in p.labels]))
        if p.risk is not None:
            cols.append(p.risk)
            header.append("risk")
        lines = [",".join(header)]
        for row in zip(*cols):
            lines.append(",".join(repr(float(v)) if isinstance(v, np.floating) else str(v)
                                  for v in row))
        (out / f"{p.video_id}.pred.csv").write_text("\n".join(lines) + "\n")
    return {"videos": len(seqs), "out": str(out)}


def _cmd_report(args) -> dict:
    from .report import RibbonReport

    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.manifest)
    if ckpt.model.topology.hash != ds.topology.hash:
        raise DatasetError([f"topology mismatch: checkpoint {ckpt.model.topology.hash}, "
                            f"dataset {ds.topology.hash}"])
    seqs = ds.sequences if _split(args.split) is None else ds.split(args.split)
    if args.video:
        seqs = [s for s in ds.sequences if s.video_id in set(args.video)]
    if not seqs:
        raise ConfigError("no videos selected")
    written = []
    for seq, p in zip(seqs, predict(ckpt.model, seqs)):
        rep = RibbonReport(seq.video_id, seq.labels, p.labels, seq.reba_smooth, p.risk,
                           [c.name for c in ds.classes])
        written.extend(str(x) for x in rep.save(args.out))
    return {"files": written}


COMMANDS = {"synth": _cmd_synth, "reba": _cmd_reba, "train": _cmd_train, "eval": _cmd_eval,
            "predict": _cmd_predict, "report": _cmd_report}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=args.log_level.upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("invocation: ergoseg %s", shlex.join(argv))
    start = time.time()
    code, summary = EXIT_OK, {}
    try:
        summary = COMMANDS[args.command](args)
    except ConfigError as exc:
        code, summary = EXIT_CONFIG, {"error": str(exc)}
    except DivergenceError as exc:
        code, summary = EXIT_DIVERGED, {"error": str(exc)}
    except DatasetError as exc:
        code, summary = EXIT_DATA, {"error": str(exc), "problems": exc.problems}
    except (TopologyError, ValueError, FileNotFoundError) as exc:
        code, summary = EXIT_DATA, {"error": str(exc)}
    if code:
        log.error("%s failed: %s", args.command, summary["error"])
    if args.json_summary:
        print(json.dumps({"command": args.command, "exit": code, "argv": argv,
                          "seconds": round(time.time() - start, 3), **summary},
                         sort_keys=True, default=str))
    return code


def main() -> None:
    sys.exit(run())
