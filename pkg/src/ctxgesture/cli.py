"""Command-line entry point: ``ctxgesture <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import datetime
import glob
import json
import logging
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import documented_keys, resolve_config
from .errors import ConfigTypeError, GestureError, UnknownKey

log = logging.getLogger("ctxgesture")

EXIT_OK, EXIT_ISSUES, EXIT_USAGE, EXIT_INTERNAL = 0, 1, 2, 3
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".webp"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _keys_epilog():
    lines = ["config keys (set with --config FILE or --set key=value):"]
    lines += [f"  {k:<28} {v}" for k, v in documented_keys().items()]
    lines.append(f"\nenvironment: CTXGESTURE_WEIGHTS_DIR holds <family>.pth pretrained backbone weights")
    return "\n".join(lines)


def build_parser():
    p = _Parser(
        prog="ctxgesture",
        description="Two-stream (person crop + context) gesture classification toolkit.",
        epilog=_keys_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=__version__)
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML/JSON config file or a run manifest")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--log-level", default="WARNING")
    common.add_argument("--weights-dir", help="directory with pretrained backbone weights")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    s = sub.add_parser("validate-data", parents=[common], help="check annotations and images")
    s.add_argument("--annotations")
    s.add_argument("--images-root")

    s = sub.add_parser("train", parents=[common], help="train one or several seeds")
    s.add_argument("--annotations")
    s.add_argument("--images-root")
    s.add_argument("--out-dir")
    s.add_argument("--seeds", help="comma-separated seeds for a multi-seed run")

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--annotations")
    s.add_argument("--images-root")
    s.add_argument("--split")
    s.add_argument("--variant", choices=["with_context", "without_context"])
    s.add_argument("--out", help="write a report JSON here")

    s = sub.add_parser("infer", parents=[common], help="classify detected persons")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--images", required=True, help="image directory")
    s.add_argument("--detections", help="COCO results JSON")
    s.add_argument("--adapter")
    s.add_argument("--score-threshold", type=float)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=["json", "csv"], default="json")

    s = sub.add_parser("report", parents=[common], help="render report JSONs as a table")
    s.add_argument("--inputs", required=True, help="glob of report JSON files")
    s.add_argument("--format", choices=["markdown", "json"], default="markdown")
    s.add_argument("--out")

    s = sub.add_parser("class-dist", parents=[common], help="per-class counts of a split as CSV")
    s.add_argument("--annotations")
    s.add_argument("--images-root")
    s.add_argument("--split")
    s.add_argument("--out")
    s.add_argument("--include-background", action="store_true")
    return p


_FLAG_KEYS = {
    "annotations": "data.annotations",
    "images_root": "data.images_root",
    "out_dir": "train.out_dir",
    "seeds": "train.seeds",
    "split": "eval.split",
    "variant": "eval.variant",
    "adapter": "infer.adapter",
    "score_threshold": "infer.score_threshold",
}


def config_from_args(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigTypeError(f"--set {item!r} is not key=value")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for attr, key in _FLAG_KEYS.items():
        val = getattr(args, attr, None)
        if val is not None:
            overrides[key] = val
    return resolve_config(args.config, overrides)


def write_run_manifest(path, command, cfg, outputs):
    doc = {
        "command": command,
        "config": cfg.flat(),
        "version": __version__,
        "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat(),
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return path


def _manifest(cfg, label_map=None):
    from .data import parse_annotations

    if not cfg.data.annotations:
        raise _UsageError("no annotation file: pass --annotations or set data.annotations")
    return parse_annotations(
        cfg.data.annotations,
        label_map=label_map,
        images_root=cfg.data.images_root or None,
        default_split=cfg.data.default_split,
        include_background=cfg.data.include_background,
        background_name=cfg.data.background_name,
    )


# ---------------------------------------------------------------- commands

def cmd_validate(args, cfg):
    from .data import validate_manifest

    try:
        manifest = _manifest(cfg)
    except GestureError as e:
        print(f"annotations: {e}", file=sys.stderr)
        return EXIT_ISSUES
    issues = validate_manifest(manifest, check_files=True)
    for issue in issues:
        print(issue, file=sys.stderr)
    if not issues:
        print(f"ok: {len(manifest.images)} images, {len(manifest.instances)} instances, {len(manifest.labels)} classes")
    return EXIT_ISSUES if issues else EXIT_OK


def _summary_json(rows):
    from .evaluation import render_report

    return render_report(rows, "json")


def cmd_train(args, cfg):
    """Train once per seed in ``train.seeds``; one seed writes straight into out_dir."""
    from .data import validate_manifest
    from .evaluation import evaluate_split, summarize_reports
    from .model import model_from_config
    from .training import run_multi_seed, seed_everything, train

    manifest = _manifest(cfg)
    issues = validate_manifest(manifest, check_files=True)
    if issues:
        for issue in issues:
            print(issue, file=sys.stderr)
        return EXIT_ISSUES
    out = Path(cfg.train.out_dir)
    write_run_manifest(out / "run_manifest.json", "train", cfg, {"out_dir": out})
    C = len(manifest.labels)

    def factory():
        return model_from_config(cfg.model, C, manifest.labels)

    variant = "with_context" if cfg.model.use_context else "without_context"
    seeds = list(cfg.train.seeds)
    if not seeds:
        raise _UsageError("train.seeds is empty")
    if len(seeds) > 1:
        states = run_multi_seed(cfg.train, seeds, factory, manifest, out_dir=out, test_split=cfg.eval.split)
    else:
        tcfg = replace(cfg.train, seed=seeds[0])
        seed_everything(tcfg.seed)
        model = factory()
        state = train(model, manifest, tcfg, out_dir=out)
        if manifest.splits.get(cfg.eval.split):
            state.test_report = evaluate_split(model, manifest, cfg.eval.split, cfg=tcfg, seed=tcfg.seed)
        states = [state]
    reports = [s.test_report for s in states if s.test_report is not None]
    for s in states:
        line = f"seed {s.seed}: best val macro-F1 {s.best_val_macro_f1:.4f} at epoch {s.best_epoch}"
        if s.test_report is not None:
            line += f", {cfg.eval.split} macro-F1 {s.test_report.macro_f1:.4f}"
        print(line)
    if reports:
        row = summarize_reports(cfg.model.backbone, variant, reports, cfg.eval.average)
        (out / "summary.json").write_text(_summary_json([row]), encoding="utf-8")
        print(f"{cfg.eval.split} F1: {row.mean_f1:.1f} ± {row.std_f1:.1f} over {row.n_runs} run(s)")
    return EXIT_OK


def cmd_evaluate(args, cfg):
    from .evaluation import evaluate_split, render_report, summarize_reports
    from .model import load_checkpoint, read_checkpoint_header

    model = load_checkpoint(args.checkpoint)
    header, _ = read_checkpoint_header(args.checkpoint)
    seed = (header.get("extra") or {}).get("seed")
    if args.out:
        write_run_manifest(Path(args.out).with_suffix(".run.json"), "evaluate", cfg,
                           {"report": args.out, "checkpoint": args.checkpoint})
    manifest = _manifest(cfg, label_map=model.labels)
    variant = cfg.eval.variant or None
    report = evaluate_split(model, manifest, cfg.eval.split, variant=variant, seed=seed, batch_size=cfg.eval.batch_size)
    row = summarize_reports(model.crop_spec.family, report.variant, [report], cfg.eval.average)
    if args.out:
        Path(args.out).write_text(_summary_json([row]), encoding="utf-8")
    print(f"{cfg.eval.split} {cfg.eval.average}-F1: {row.mean_f1:.2f}")
    print(render_report([row]), end="")
    return EXIT_OK


def _image_files(root):
    out = {}
    for p in sorted(Path(root).iterdir()):
        if p.suffix.lower() in IMAGE_SUFFIXES:
            out.setdefault(p.stem, p)
            out.setdefault(p.name, p)
    return out


def cmd_infer(args, cfg):
    from .data import load_image
    from .inference import export_predictions, get_adapter, load_detections, predict, run_adapter
    from .model import load_checkpoint

    write_run_manifest(Path(args.out).with_suffix(".run.json"), "infer", cfg,
                       {"predictions": args.out, "checkpoint": args.checkpoint})
    model = load_checkpoint(args.checkpoint)
    files = _image_files(args.images)
    if cfg.infer.adapter == "replay":
        if not args.detections:
            raise _UsageError("the replay adapter needs --detections")
        dets = load_detections(args.detections, cfg.infer.score_threshold)
        adapter = get_adapter("replay", detection_set=dets)
        image_ids = sorted(dets.detections)
    else:
        adapter = get_adapter(cfg.infer.adapter)
        image_ids = sorted({p.stem for p in files.values()})
    preds = []
    for image_id in image_ids:
        if image_id not in files:
            log.warning("no image file for image_id %s in %s", image_id, args.images)
            continue
        image = load_image(str(files[image_id]))
        detections = [d for d in run_adapter(adapter, image, image_id) if d.score >= cfg.infer.score_threshold]
        preds.extend(predict(model, image, detections, image_id=image_id, batch_size=cfg.infer.batch_size))
    names = model.labels.names if model.labels is not None else None
    export_predictions(preds, args.out, args.format, class_names=names)
    print(f"{len(preds)} predictions -> {args.out}")
    return EXIT_OK


def cmd_report(args, cfg):
    from .evaluation import merge_summaries, parse_report_json, render_report

    paths = sorted(glob.glob(args.inputs))
    if not paths:
        raise _UsageError(f"no files match {args.inputs!r}")
    rows = []
    for p in paths:
        doc = json.loads(Path(p).read_text(encoding="utf-8"))
        if isinstance(doc, dict) and "command" in doc and "config" in doc:
            continue  # a run manifest next to its report
        rows.extend(parse_report_json(json.dumps(doc)))
    text = render_report(merge_summaries(rows), args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    return EXIT_OK


def cmd_class_dist(args, cfg):
    from .data import class_distribution

    manifest = _manifest(cfg)
    exclude = () if args.include_background else (cfg.data.background_name,)
    dist = class_distribution(manifest, cfg.eval.split if args.split is None else args.split, exclude=exclude)
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        wr = csv.writer(fh)
        wr.writerow(["class", "count"])
        for name, n in dist.items():
            wr.writerow([name, n])
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


COMMANDS = {
    "validate-data": cmd_validate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "infer": cmd_infer,
    "report": cmd_report,
    "class-dist": cmd_class_dist,
}


def dispatch(command, args, cfg) -> int:
    try:
        return COMMANDS[command](args, cfg)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except GestureError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ISSUES
    except Exception:
        traceback.print_exc()
        print("internal error; please report with the traceback above", file=sys.stderr)
        return EXIT_INTERNAL


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help / --version
        return int(e.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.weights_dir:
        os.environ["CTXGESTURE_WEIGHTS_DIR"] = args.weights_dir
    try:
        cfg = config_from_args(args)
    except (UnknownKey, ConfigTypeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return dispatch(args.command, args, cfg)


if __name__ == "__main__":
    sys.exit(main())
