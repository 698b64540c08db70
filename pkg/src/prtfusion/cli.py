"""Command line entry points: gen, track, train, eval, headroom.

Exit status: 0 success, 2 usage error, 3 data error (unreadable archive, malformed
config or labels), 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .archive import ArchiveError, read_checkpoint, read_sequence, write_checkpoint, write_sequence
from .config import ConfigError, format_depth_table, load_config, write_key_values
from .encoders.model import FusionModel
from .encoders.train import TrainingDiverged, train
from .headroom import enhanced_depth_report, frame_key, headroom_report
from .kitti import KittiFormatError
from .metrics import depth_metrics
from .pipeline import HEAD_CONFIGS, SampleCache, build_samples, tracklets_for
from .scenesim import generate_sequence
from .tracking import CovarianceError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
HEAD_ALIASES = {"rgb-temporal": "rgb-t"}

log = logging.getLogger("prtfusion")


class UsageError(Exception):
    pass


def _head(name: str) -> str:
    name = HEAD_ALIASES.get(name, name)
    if name not in HEAD_CONFIGS:
        raise UsageError(f"unknown head {name!r}; expected one of {sorted(HEAD_CONFIGS) + sorted(HEAD_ALIASES)}")
    return name


def _load_sequences(paths):
    if not paths:
        raise UsageError("no input archives given")
    return [read_sequence(p) for p in paths]


def cmd_gen(args, cfg) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        seed = args.seed + i
        path = out / f"seq_{seed:06d}.prtseq"
        write_sequence(generate_sequence(cfg.sim, seed), path)
        print(path)


def cmd_track(args, cfg) -> None:
    result = {}
    for path in args.data:
        seq = read_sequence(path)
        tracks = tracklets_for(seq, args.association, cfg.tracker)
        result[str(path)] = [
            {
                "id": t.id,
                "entries": [
                    {"frame": e.frame_index, "label": e.payload, "bbox": [e.bbox2d.x1, e.bbox2d.y1, e.bbox2d.x2, e.bbox2d.y2]}
                    for e in t.entries
                ],
            }
            for t in tracks
        ]
        print(f"{path}: {len(tracks)} tracklets")
    write_key_values(args.out, result)


def cmd_train(args, cfg) -> None:
    head = _head(args.head)
    seqs = _load_sequences(args.data)
    bench = cfg.benchmark()
    mcfg = bench.model_config(head, args.seed)
    data, _ = build_samples(seqs, mcfg, "gt", cfg.tracker)
    out = Path(args.out)
    train_cfg = replace(cfg.train, seed=args.seed)
    if args.epochs is not None:
        train_cfg = replace(train_cfg, epochs=args.epochs)
    model, history = train(FusionModel(mcfg), data, train_cfg, checkpoint_dir=out / "epochs" if args.keep_epochs else None)
    out.mkdir(parents=True, exist_ok=True)
    write_checkpoint(model, out / f"{head}.ckpt")
    write_key_values(out / f"{head}_history.json", {"head": head, "seed": args.seed, "samples": len(data), "loss": history})
    print(f"{head}: {len(data)} samples, final loss {history[-1]:.6f} -> {out / f'{head}.ckpt'}")


def _evaluate(models: dict[str, FusionModel], seqs, association: str, tracker):
    cache = SampleCache()
    rows, preds = {}, {}
    for name, model in models.items():
        data, refs = build_samples(seqs, model.config, association, tracker, cache)
        pred = model.predict_depth(data)
        rows[name] = depth_metrics(pred, np.exp(data.log_depth))
        preds[name] = (pred, refs)
    return rows, preds


def cmd_eval(args, cfg) -> None:
    seqs = _load_sequences(args.data)
    models = {Path(p).stem: read_checkpoint(p) for p in args.checkpoint}
    associations = ("gt", "predicted") if args.association == "both" else (args.association,)
    report = {}
    for assoc in associations:
        rows, _ = _evaluate(models, seqs, assoc, cfg.tracker)
        print(format_depth_table(rows, title=f"association: {assoc}"))
        print()
        report[assoc] = {k: m.as_dict() for k, m in rows.items()}
    if args.out:
        write_key_values(args.out, report)


def cmd_headroom(args, cfg) -> None:
    seqs = _load_sequences(args.data)
    profile = replace(cfg.profile, seed=args.seed)
    report = headroom_report(seqs, profile)
    print(report.table())
    out = Path(args.out)
    report.write(out, "headroom")
    if args.checkpoint:
        model = read_checkpoint(args.checkpoint)
        _, preds = _evaluate({"model": model}, seqs, "predicted", cfg.tracker)
        pred, refs = preds["model"]
        depths = {(frame_key(r.sequence, r.frame), r.object_id): float(z) for r, z in zip(refs, pred)}
        enhanced = enhanced_depth_report(seqs, depths, profile)
        print()
        print(enhanced.table())
        enhanced.write(out, "enhanced_depth")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prtfusion", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="simulate sequences and write archives")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("track", help="form 2D tracklets from archive labels")
    t.add_argument("data", nargs="+")
    t.add_argument("--association", choices=("gt", "predicted"), default="predicted")
    t.add_argument("--out", required=True, help="output JSON file")

    tr = sub.add_parser("train", help="train one fusion head")
    tr.add_argument("data", nargs="+")
    tr.add_argument("--head", required=True)
    tr.add_argument("--seed", type=int, required=True)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--keep-epochs", action="store_true", help="also write a checkpoint after every epoch")
    tr.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("eval", help="per-object depth metrics of trained heads")
    e.add_argument("data", nargs="+")
    e.add_argument("--checkpoint", nargs="+", required=True)
    e.add_argument("--association", choices=("gt", "predicted", "both"), default="both")
    e.add_argument("--out", help="output JSON file")

    h = sub.add_parser("headroom", help="attribute headroom analysis and enhanced-depth swap")
    h.add_argument("data", nargs="+")
    h.add_argument("--seed", type=int, required=True)
    h.add_argument("--checkpoint", help="trained model for the enhanced-depth comparison")
    h.add_argument("--out", required=True, help="output directory")
    return p


COMMANDS = {"gen": cmd_gen, "track": cmd_track, "train": cmd_train, "eval": cmd_eval, "headroom": cmd_headroom}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, CovarianceError, FloatingPointError) as err:
        print(f"numeric divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ArchiveError, ConfigError, KittiFormatError, FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
