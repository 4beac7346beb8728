"""Command-line front end.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from mild import checkpoint
from mild.dataio import SynthConfig, first_frames, load_dataset, synth_interactions, window_stack, write_dataset
from mild.errors import (
    ClassMismatch,
    CorruptChecksum,
    DimensionMismatch,
    EmptyClass,
    EmptyDataset,
    InsufficientData,
    IoFailure,
    NonFiniteLoss,
    NotPositiveDefinite,
    ParseError,
    SingularMatrix,
    UnknownClass,
    VersionMismatch,
    WindowTooLong,
)
from mild.evaluate import evaluate
from mild.pipeline import ConditionStream, TrainConfig, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

DATA_ERRORS = (
    ParseError,
    EmptyDataset,
    EmptyClass,
    UnknownClass,
    ClassMismatch,
    IoFailure,
    CorruptChecksum,
    VersionMismatch,
    DimensionMismatch,
    WindowTooLong,
    InsufficientData,
    FileNotFoundError,
)
NUMERIC_ERRORS = (NonFiniteLoss, NotPositiveDefinite, SingularMatrix, FloatingPointError)

# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "components": "components",
    "latent_dim": "latent_dim",
    "window": "window",
    "epochs": "epochs",
    "seed": "seed",
    "kl_scale": "kl_scale",
    "samples": "n_samples",
    "lr": "lr",
    "weight_decay": "weight_decay",
    "em_max_iters": "em_max_iters",
    "early_stopping": "early_stopping",
    "share_weights": "share_weights",
}
SYNTH_FLAGS = ("classes", "modes", "demos", "T", "sigma", "seed", "dim", "frame_rate")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"config {path} is not valid JSON: {exc.msg}", line=exc.lineno) from exc


def train_config(args) -> TrainConfig:
    """Config file first, then any flag given on the command line."""
    data = _read_json(args.config) if args.config else {}
    if "samples" in data:
        data["n_samples"] = data.pop("samples")
    for flag, key in TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            data[key] = value
    try:
        return TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad training config: {exc}") from exc


def cmd_train(args) -> int:
    config = train_config(args)
    demos = load_dataset(args.data, args.reference_columns)
    labels = sorted({d.class_label for d in demos})
    if args.classes is not None and args.classes != len(labels):
        raise ClassMismatch(f"--classes {args.classes} but the dataset holds {len(labels)}: {', '.join(labels)}")
    windows = [window_stack(d, config.window) for d in demos]
    model, tlog = train(windows, config)
    checkpoint.save(model, args.out)
    tlog.to_csv(args.log or f"{args.out}.log.csv")
    print(f"wrote {args.out} ({len(labels)} classes, {len(tlog.records) // len(labels)} epochs)")
    return EXIT_OK


def _parse_rows(lines, width: int, source: str):
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        try:
            row = np.array([float(v) for v in text.split()])
        except ValueError as exc:
            raise ParseError(f"{source}: non-numeric value", line=n) from exc
        if row.size != width:
            raise ParseError(f"{source}: expected {width} numbers, got {row.size}", line=n)
        yield row


def _fmt(row) -> str:
    return " ".join(repr(float(v)) for v in row)


def condition_inputs(model, args):
    """Agent-1 windows from ``--data`` (one demo) or from rows of ``--input``."""
    w = model.config.window
    d1 = model.frame_dims[0]
    if args.data:
        demos = load_dataset(args.data, args.reference_columns)
        if not 0 <= args.demo < len(demos):
            raise EmptyDataset(f"demo index {args.demo} out of range (dataset has {len(demos)})")
        yield from window_stack(demos[args.demo], w).agent1
        return
    fh = sys.stdin if args.input in (None, "-") else open(args.input, encoding="utf-8")
    try:
        if args.frames:
            buf: list[np.ndarray] = []
            for frame in _parse_rows(fh, d1, "input"):
                buf.append(frame)
                if len(buf) == w:
                    yield np.concatenate(buf)
                    buf.pop(0)
        else:
            yield from _parse_rows(fh, w * d1, "input")
    finally:
        if fh is not sys.stdin:
            fh.close()


def cmd_condition(args) -> int:
    model = checkpoint.load(args.checkpoint)
    stream = ConditionStream(model, args.label)
    d2 = model.frame_dims[1]
    out = sys.stdout if args.output in (None, "-") else open(args.output, "w", encoding="utf-8")
    preds = []
    try:
        for x in condition_inputs(model, args):
            pred = stream.step(x)[0]
            preds.append(pred)
            out.write(_fmt(pred) + "\n")
            if args.stream:
                out.flush()
    finally:
        if out is not sys.stdout:
            out.close()
    if args.trajectory:
        traj = first_frames(np.array(preds).reshape(len(preds), -1), d2) if preds else np.zeros((0, d2))
        Path(args.trajectory).write_text("".join(_fmt(r) + "\n" for r in traj), encoding="utf-8")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = checkpoint.load(args.checkpoint)
    demos = load_dataset(args.data, args.reference_columns)
    report = evaluate(model, demos, args.joint_size, args.units)
    stem = args.out or "eval"
    report.write(f"{stem}_curve.csv", f"{stem}_summary.csv")
    sys.stdout.write(report.summary_csv())
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = SynthConfig.from_file(args.config) if args.config else SynthConfig()
    overrides = {k: getattr(args, k) for k in SYNTH_FLAGS if getattr(args, k) is not None}
    demos, _ = synth_interactions(cfg, **overrides)
    write_dataset(args.out, demos)
    print(f"wrote {args.out} ({len(demos)} demos)")
    return EXIT_OK


def inspect_dict(model) -> dict:
    return {
        "config": model.config.to_dict(),
        "frame_dims": list(model.frame_dims),
        "classes": {label: model.hsmms[label].summary() for label in model.classes},
    }


def cmd_inspect(args) -> int:
    model = checkpoint.load(args.checkpoint)
    print(json.dumps(inspect_dict(model), indent=2, sort_keys=True))
    return EXIT_OK


def _columns(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError("expected comma-separated column indices") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mild", description="Two-agent interaction models: train, condition, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="fit VAEs and per-class HSMMs")
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="JSON training config; flags override its values")
    t.add_argument("--classes", type=int, help="expected number of classes (checked)")
    t.add_argument("--components", type=int)
    t.add_argument("--latent-dim", type=int)
    t.add_argument("--window", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--kl-scale", type=float)
    t.add_argument("--samples", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--em-max-iters", type=int)
    t.add_argument("--early-stopping", action="store_const", const=True)
    t.add_argument("--share-weights", action="store_const", const=True)
    t.add_argument("--reference-columns", type=_columns)
    t.add_argument("--out", default="model.ckpt")
    t.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("condition", help="predict agent-2 windows from agent-1 observations")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--class", dest="label", required=True)
    src = c.add_mutually_exclusive_group()
    src.add_argument("--data", help="dataset file; conditions on the agent-1 part of --demo")
    src.add_argument("--input", help="rows of agent-1 windows (or frames with --frames); '-' for stdin")
    c.add_argument("--demo", type=int, default=0)
    c.add_argument("--frames", action="store_true", help="input rows are single frames, windowed on the fly")
    c.add_argument("--stream", action="store_true", help="flush each prediction as soon as it is computed")
    c.add_argument("--reference-columns", type=_columns)
    c.add_argument("--output", help="predicted windows, one per line (default: stdout)")
    c.add_argument("--trajectory", help="first-frame agent-2 trajectory file")
    c.set_defaults(func=cmd_condition)

    e = sub.add_parser("eval", help="per-timestep MSE on a test dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--joint-size", type=int, help="coordinates per joint for the per-joint aggregation")
    e.add_argument("--units", default="raw", help="input unit name, written to the CSVs")
    e.add_argument("--reference-columns", type=_columns)
    e.add_argument("--out", help="output stem; writes <stem>_curve.csv and <stem>_summary.csv")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic two-agent dataset")
    s.add_argument("--config", help="JSON with keys modes, T, demos, classes, sigma, seed, dim, frame_rate")
    s.add_argument("--classes", type=int)
    s.add_argument("--modes", type=int)
    s.add_argument("--demos", type=int)
    s.add_argument("--T", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--dim", type=int)
    s.add_argument("--frame-rate", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    i = sub.add_parser("inspect", help="print checkpoint config and HSMM summaries")
    i.add_argument("--checkpoint", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
