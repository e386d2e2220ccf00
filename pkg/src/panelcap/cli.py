"""``panelcap`` command line: synth, train, infer, eval-cap, eval-det.

Exit codes (all commands):
  0  success with no skipped records and no warnings
  1  finished, but records were skipped or warnings were raised
  2  usage error (bad flags, missing input files, stage order violated)
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import warnings
from pathlib import Path

import torch

from . import training
from .datagen import format_stats, load_split, make_dataset, read_jsonl
from .detection import compute_map, convert_bbox_2d, detections_from_json
from .eval_protocol import evaluate_captions
from .pipeline import gt_annotations, infer

log = logging.getLogger("panelcap")

# flag -> (type, help); names follow the published hyper-parameter keys
TRAIN_FLAGS = {
    "lambda-text-ce": (float, "weight of the caption loss in stages 3-4"),
    "lambda-det": (float, "weight of the detection loss in stages 3-4"),
    "lambda-rl": (float, "weight of the SCST loss in stage 4"),
    "rl-w-bert": (float, "weight of the semantic reward"),
    "rl-w-clip": (float, "weight of the crop-alignment reward"),
    "top-p": (float, "nucleus mass for stage 4 sampling"),
    "temperature": (float, "sampling temperature for stage 4"),
    "max-new-tokens-rl": (int, "generation budget for stage 4 samples"),
    "lr": (float, "peak learning rate"),
    "steps": (int, "optimizer updates"),
    "batch-size": (int, "figures per micro-batch"),
    "gradient-accumulation": (int, "micro-batches per update"),
    "weight-decay": (float, "AdamW weight decay"),
    "grad-clip": (float, "global gradient-norm clip (0 disables)"),
    "warmup": (int, "linear warmup updates"),
}


class UsageError(Exception):
    pass


class _Counter(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.count = 0

    def emit(self, record):
        self.count += 1


def _echo(config: dict) -> None:
    print("config: " + json.dumps(config, sort_keys=True, default=str), file=sys.stderr)


def _need(path: str | Path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {p}")
    return p


def _emit(report: dict, fmt: str, out: str | None, csv_text: str | None = None) -> None:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n" if fmt == "json" else csv_text
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    _echo({"command": "synth", "out": args.out, "train": args.train, "val": args.val, "test": args.test,
           "seed": args.seed, "hard": args.hard})
    try:
        stats = make_dataset(args.out, args.train, args.val, args.test, seed=args.seed, hard=args.hard)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if args.format == "json":
        print(json.dumps(stats, indent=2, sort_keys=True))
    else:
        print(format_stats(stats, "synthetic-hard" if args.hard else "synthetic"))
    return 0


def _stage_config(args) -> training.StageConfig:
    values: dict = {}
    if args.config:
        values.update(json.loads(_need(args.config).read_text()))
    values.update(training.desk_schedule(args.stage, values))
    for flag in TRAIN_FLAGS:
        v = getattr(args, flag.replace("-", "_"))
        if v is not None:
            values[flag] = v
    values["seed"] = args.seed if args.seed is not None else values.get("seed", 42)
    try:
        return training.StageConfig.from_mapping(args.stage, values)
    except (KeyError, ValueError) as e:
        raise UsageError(str(e)) from e


def cmd_train(args) -> int:
    cfg = _stage_config(args)
    _echo({"command": "train", "data": args.data, "out": args.out, **cfg.to_dict()})
    data = load_split(_need(args.data))
    torch.manual_seed(cfg.seed)  # fresh stage-1 weights come from the seed too
    try:
        model = training.load_stage_start(args.out, args.stage)
    except training.StageOrderError as e:
        raise UsageError(str(e)) from e
    log_path = Path(args.out) / f"stage{args.stage}.metrics.jsonl"
    Path(args.out).mkdir(parents=True, exist_ok=True)
    log_path.write_text("")
    state = training.run_stage(cfg, model, data, log_path=log_path)
    path = training.save_stage(args.out, cfg, state, {"data": str(args.data), "metrics": log_path.name})
    last = state.history[-1] if state.history else {}
    print(json.dumps({"checkpoint": str(path), "steps": state.step, "final": last}, sort_keys=True))
    return 0


def cmd_infer(args) -> int:
    _echo({"command": "infer", "ckpt": args.ckpt, "data": args.data, "out": args.out, "gate": not args.no_gate,
           "batch_size": args.batch_size})
    model = training.load_model(_need(args.ckpt))
    records = load_split(_need(args.data))
    preds = infer(model, records, args.batch_size, gate=not args.no_gate)
    with open(args.out, "w") as fh:
        for p in preds:
            fh.write(json.dumps(p, sort_keys=True) + "\n")
    missing = sum(not p["det_found"] for p in preds)
    print(json.dumps({"figures": len(preds), "det_missing": missing}))
    if missing:
        log.warning("%d outputs ended without [DET]", missing)
    return 0


def _gt_rows(path) -> tuple[dict, int]:
    rows, bad = read_jsonl(_need(path))
    gt = {}
    for r in rows:
        try:
            gt[r["figure_id"]] = r["panels"]
        except (KeyError, TypeError):
            bad += 1
    return gt, bad


def cmd_eval_cap(args) -> int:
    _echo({"command": "eval-cap", "gt": args.gt, "pred": args.pred, "format": args.format})
    gt_rows, skipped = _gt_rows(args.gt)
    rows, bad = read_jsonl(_need(args.pred))
    skipped += bad
    preds = {}
    for r in rows:
        if not isinstance(r, dict) or not isinstance(r.get("raw_output"), str) or "figure_id" not in r:
            skipped += 1
            continue
        preds[r["figure_id"]] = r["raw_output"]
    try:
        gt = {fid: [(p["label"], p["caption"]) for p in panels] for fid, panels in gt_rows.items()}
    except (KeyError, TypeError) as e:
        raise UsageError(f"malformed ground truth: {e}") from e
    report = evaluate_captions(gt, preds)
    skipped += report.skipped
    out = report.to_json()
    out["skipped"] = skipped
    _emit(out, args.format, args.out, report.to_csv())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 1 if skipped else 0


def cmd_eval_det(args) -> int:
    _echo({"command": "eval-det", "gt": args.gt, "pred": args.pred, "format": args.format,
           "bbox_2d": args.bbox_2d})
    gt_rows, skipped = _gt_rows(args.gt)
    rows, bad = read_jsonl(_need(args.pred))
    skipped += bad
    preds = {}
    for r in rows:
        try:
            dets = r["detections"]
            if args.bbox_2d:
                dets = convert_bbox_2d(dets)
            preds[r["figure_id"]] = detections_from_json(dets)
        except (KeyError, TypeError, ValueError):
            skipped += 1
    ids = sorted(gt_rows)
    gts = [gt_annotations(_Panels(gt_rows[i])) for i in ids]
    m, m50 = compute_map([preds.get(i, []) for i in ids], gts)
    report = {"map": m, "map50": m50, "figures": len(ids), "skipped": skipped}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["figures", "map", "map50"])
    w.writerow([len(ids), repr(m), repr(m50)])
    _emit(report, args.format, args.out, buf.getvalue())
    return 1 if skipped else 0


class _Panels:
    """Just enough of a DatasetRecord for ``gt_annotations``."""

    def __init__(self, panels):
        self.panels = panels


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="panelcap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic compound-figure dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--train", type=int, default=800)
    s.add_argument("--val", type=int, default=100)
    s.add_argument("--test", type=int, default=100)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--hard", action="store_true", help="distractor textures and near-synonym captions")
    s.add_argument("--format", choices=("json", "csv"), default="csv")
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2, 3, 4), required=True)
    t.add_argument("--data", required=True, help="train JSONL")
    t.add_argument("--out", required=True, help="checkpoint directory (stageN.ckpt + manifest.json)")
    t.add_argument("--config", help="JSON file of hyphenated config keys")
    t.add_argument("--seed", type=int, default=None, help="default 42")
    for flag, (typ, help_) in TRAIN_FLAGS.items():
        t.add_argument(f"--{flag}", type=typ, default=None, help=help_)
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="caption then detect every figure")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True, help="predictions JSONL")
    i.add_argument("--batch-size", type=int, default=50)
    i.add_argument("--no-gate", action="store_true", help="disable gated query modulation")
    i.set_defaults(fn=cmd_infer)

    for name, fn, help_ in (("eval-cap", cmd_eval_cap, "caption metrics"), ("eval-det", cmd_eval_det, "mAP")):
        e = sub.add_parser(name, help=help_)
        e.add_argument("--gt", required=True)
        e.add_argument("--pred", required=True)
        e.add_argument("--format", choices=("json", "csv"), default="json")
        e.add_argument("--out", help="write the report here instead of stdout")
        if name == "eval-cap":
            e.add_argument("--csv", help="also write the CSV summary here")
        else:
            e.add_argument("--bbox-2d", action="store_true",
                           help="detections use the prompt convention (class 0-25, bbox_2d in 0-1000)")
        e.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    counter = _Counter()
    logging.getLogger().addHandler(counter)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                code = args.fn(args)
            except UsageError as e:
                print(f"panelcap {args.command}: error: {e}", file=sys.stderr)
                return 2
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        if caught or counter.count:
            code = max(code, 1)
        return code
    finally:
        logging.getLogger().removeHandler(counter)


if __name__ == "__main__":
    sys.exit(main())
