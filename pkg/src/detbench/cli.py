"""
``detbench`` command line.

Exit status: 0 on success, 1 for bad input (including usage errors), 2 for
anything unexpected. Every failure writes exactly one JSON line to stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from importlib import resources

from detbench import __version__
from detbench.augment import AugmentConfig, LabeledImage, augment_sample
from detbench.boxes import nms
from detbench.costmodel import count_flops, parse_graph, storage_cost
from detbench.errors import AdapterError, InputError
from detbench.formats import (
    format_detections,
    format_labels,
    list_images,
    parse_coco,
    parse_coco_results,
    parse_labels,
    read_ppm,
    read_tensor,
    write_ppm,
)
from detbench.harness import (
    DISPLAY_CONF_THRESHOLD,
    BenchConfig,
    EvalSample,
    RefNetAdapter,
    ReplayAdapter,
    SleepAdapter,
    TradeoffRecord,
    pareto_frontier,
    run_bench,
    tradeoff_report,
)
from detbench.metrics import EvalConfig, coco_map
from detbench.nnops import RefNetSpec, load_weights, yolo_decode
from detbench.nnops.refnet import DEFAULT_ANCHORS
from detbench.schedule import (
    OneCycleConfig,
    TrainingRecipe,
    emit_recipe,
    onecycle_from_kv,
    parse_kv,
    schedule_csv,
)


class UsageError(InputError):
    def __init__(self, message, usage):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage().strip())


def _read_text(path) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _read_json(path):
    try:
        return json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _emit(args, text: str):
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _fmt(v) -> str:
    return "n/a" if v is None else f"{v:.3f}"


def bundled_graph_path() -> str:
    return str(resources.files("detbench") / "data" / "refnet.graph")


# -- eval ------------------------------------------------------------------------


def format_summary(summary, class_names=()) -> str:
    lines = [f"{'mAP':<10}{_fmt(summary.map)}"]
    for label, v in (("AP50", summary.ap50), ("AP75", summary.ap75), ("AP_small", summary.ap_small),
                     ("AP_medium", summary.ap_medium), ("AP_large", summary.ap_large)):
        lines.append(f"{label:<10}{_fmt(v)}")
    rows = summary.ap_table.get("all", {})
    if rows:
        lines.append("per-class AP:")
        for cls in sorted(rows):
            name = class_names[cls] if cls < len(class_names) else ""
            lines.append(f"  {cls:<3}{name:<16}{_fmt(summary.class_ap(cls))}")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    manifest = parse_coco(_read_json(args.annotations))
    class_map = manifest.class_map
    dets = parse_coco_results(_read_json(args.results), class_map)
    known = {im.id for im in manifest.images}
    unknown = sorted(str(k) for k in dets if k not in known)
    if unknown:
        raise InputError(f"results reference images missing from annotations: {unknown[:10]}")
    summary = coco_map(dets, manifest.ground_truths(), EvalConfig(max_detections_per_image=args.max_dets), workers=args.threads)

    remap = ", ".join(f"{cid} -> {k} ({name})" for k, (cid, name) in enumerate(manifest.categories))
    text = f"category map: {remap}\n" + format_summary(summary, manifest.class_names)
    if args.output:
        record = TradeoffRecord(args.model, summary)
        with open(args.output, "w", encoding="utf-8") as fh:
            json.dump(record.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    sys.stdout.write(text)
    return 0


# -- bench -----------------------------------------------------------------------


def _make_adapter(args):
    if args.adapter == "refnet":
        spec = RefNetSpec()
        weights = load_weights(args.weights) if args.weights else None
        return RefNetAdapter(spec, weights, args.image_size, args.conf, seed=args.seed, name=args.model or "refnet")
    if args.adapter == "sleep":
        return SleepAdapter(args.sleep_ms, name=args.model or "sleep")
    if args.results is None:
        raise InputError("replay adapter needs --results (COCO results JSON or directory of .txt files)")
    if os.path.isdir(args.results):
        return ReplayAdapter.from_text_dir(args.results, conf_threshold=args.conf, name=args.model or "replay")
    dets = parse_coco_results(_read_json(args.results))
    return ReplayAdapter({str(k): v for k, v in dets.items()}, args.conf, name=args.model or "replay")


def cmd_bench(args) -> int:
    adapter = _make_adapter(args)
    paths = list_images(args.images)
    samples = [EvalSample(os.path.splitext(os.path.basename(p))[0], read_ppm(p)) for p in paths]
    cfg = BenchConfig(args.warmup, args.iters, not args.no_postprocess)
    result = run_bench(adapter, samples, cfg)
    scope = "prepare+infer+postprocess" if cfg.include_postprocess else "prepare+infer"
    lines = [
        f"model       {adapter.name}",
        f"images      {len(samples)}",
        f"timing      {scope}, warmup {cfg.warmup_iters}, measured {cfg.measured_iters}, batch 1",
        f"fps         {result.fps:.2f}",
        f"latency ms  p50 {result.p50_ms:.3f}  p90 {result.p90_ms:.3f}  p99 {result.p99_ms:.3f}",
        f"peak memory {result.peak_memory_bytes if result.peak_memory_bytes is not None else 'n/a'} bytes ({result.memory_source})",
        f"storage     {result.storage_bytes if result.storage_bytes is not None else 'n/a'} bytes",
        f"GFLOPs      {result.gflops:.6f}" if result.gflops is not None else "GFLOPs      n/a",
    ]
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            json.dump(TradeoffRecord(adapter.name, bench=result).to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


# -- flops -----------------------------------------------------------------------


def _shape(text):
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise InputError(f"--input-shape must be comma-separated integers, got {text!r}") from None
    return dims


def cmd_flops(args) -> int:
    path = args.graph or bundled_graph_path()
    graph = parse_graph(_read_text(path))
    if args.input_shape:
        shape = _shape(args.input_shape)
    else:
        if graph.input_channels is None:
            raise InputError("graph declares no input channels; pass --input-shape C,H,W")
        shape = (graph.input_channels, args.input_size, args.input_size)
    report = count_flops(graph, shape)
    report.storage_bytes = storage_cost(graph, args.bytes_per_param, args.header_overhead, shape)
    if args.format == "csv":
        _emit(args, report.to_csv())
    else:
        _emit(args, f"input {'x'.join(map(str, shape))}\n" + report.to_table() + "\n")
    return 0


# -- lr / recipe -----------------------------------------------------------------


def cmd_lr(args) -> int:
    pairs = parse_kv(_read_text(args.config)) if args.config else {}
    overrides = {
        "total_steps": args.total_steps, "max_lr": args.max_lr, "initial_lr": args.initial_lr,
        "final_lr": args.final_lr, "pct_start": args.pct_start,
    }
    for key, value in overrides.items():
        if value is not None:
            pairs = {k: v for k, v in pairs.items() if k not in (key, f"lr.{key}")}
            pairs[key] = str(value)
    _emit(args, schedule_csv(onecycle_from_kv(pairs)))
    return 0


def cmd_recipe(args) -> int:
    recipe = TrainingRecipe()
    if args.total_steps is not None:
        lr = {f.name: getattr(recipe.lr, f.name) for f in fields(OneCycleConfig)}
        lr["total_steps"] = args.total_steps
        recipe = TrainingRecipe(lr=OneCycleConfig(**lr))
    _emit(args, emit_recipe(recipe))
    return 0


# -- augment ---------------------------------------------------------------------


def augment_config_from_kv(pairs) -> AugmentConfig:
    kinds = {f.name: f.type for f in fields(AugmentConfig)}
    args = {}
    for key, value in pairs.items():
        if key not in kinds:
            raise InputError(f"unknown augment config key {key!r}")
        kind = str(kinds[key])
        try:
            if kind.startswith("tuple"):
                args[key] = tuple(float(v) for v in value.split(","))
            elif kind == "bool":
                if value.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(value)
                args[key] = value.lower() in ("true", "1")
            elif kind == "int":
                args[key] = int(value)
            else:
                args[key] = float(value)
        except ValueError:
            raise InputError(f"augment config key {key!r}: bad value {value!r}") from None
    return AugmentConfig(**args)


def cmd_augment(args) -> int:
    pairs = parse_kv(_read_text(args.config)) if args.config else {}
    cfg = augment_config_from_kv(pairs)
    if args.seed is not None:
        cfg = AugmentConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(AugmentConfig)}, "seed": args.seed})
    if not args.output:
        raise InputError("augment needs --output DIR")
    dataset = []
    for p in list_images(args.images):
        stem = os.path.splitext(os.path.basename(p))[0]
        labels = []
        if args.labels:
            lp = os.path.join(args.labels, stem + ".txt")
            if os.path.exists(lp):
                labels = parse_labels(_read_text(lp))
        dataset.append(LabeledImage(read_ppm(p), labels))
    count = args.count if args.count is not None else len(dataset)
    if not 0 < count <= len(dataset):
        raise InputError(f"--count must be between 1 and the number of images ({len(dataset)})")
    os.makedirs(args.output, exist_ok=True)
    for i in range(count):
        sample = augment_sample(dataset, i, cfg, args.size)
        write_ppm(os.path.join(args.output, f"aug_{i:05d}.ppm"), sample.image)
        with open(os.path.join(args.output, f"aug_{i:05d}.txt"), "w", encoding="utf-8") as fh:
            fh.write(format_labels(sample.labels))
    sys.stdout.write(f"wrote {count} samples of {args.size}x{args.size} to {args.output} (seed {cfg.seed})\n")
    return 0


# -- decode ----------------------------------------------------------------------


def _anchors(text):
    try:
        pairs = [tuple(float(v) for v in item.split(",")) for item in text.split()]
    except ValueError:
        raise InputError(f"--anchors must look like '10,13 16,30', got {text!r}") from None
    if not pairs or any(len(p) != 2 for p in pairs):
        raise InputError(f"--anchors must look like '10,13 16,30', got {text!r}")
    return pairs


def cmd_decode(args) -> int:
    raw = read_tensor(args.tensor)
    if raw.ndim == 4 and raw.shape[0] == 1:
        raw = raw[0]
    if raw.ndim != 3:
        raise InputError(f"raw head tensor must be (C, H, W) or (1, C, H, W), got {raw.shape}")
    dets = yolo_decode(raw, _anchors(args.anchors), args.stride, args.conf)
    if args.nms is not None:
        dets = nms(dets, args.nms)
    _emit(args, format_detections(dets))
    return 0


# -- report ----------------------------------------------------------------------


def _load_records(paths) -> list[TradeoffRecord]:
    merged: dict[str, dict] = {}
    for path in paths:
        doc = _read_json(path)
        for item in doc if isinstance(doc, list) else [doc]:
            if not isinstance(item, dict):
                raise InputError(f"{path}: records must be JSON objects")
            rec = TradeoffRecord.from_dict(item)
            slot = merged.setdefault(rec.model, {"model": rec.model, "eval": None, "bench": None})
            for part in ("eval", "bench"):
                if item.get(part) is not None:
                    if slot[part] is not None:
                        raise InputError(f"{path}: model {rec.model!r} has more than one {part} result")
                    slot[part] = item[part]
    return [TradeoffRecord.from_dict(d) for d in merged.values()]


def cmd_report(args) -> int:
    if not args.output:
        raise InputError("report needs --output DIR")
    records = _load_records(args.records)
    paths = tradeoff_report(records, args.output)
    frontier = pareto_frontier(records)
    sys.stdout.write(f"{len(records)} models; Pareto frontier (fps, mAP): {', '.join(frontier) or 'none'}\n")
    for p in paths.values():
        sys.stdout.write(f"wrote {p}\n")
    return 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: 0 or the config's seed)")
    common.add_argument("--threads", type=int, default=1, help="worker threads where the command can use them")
    common.add_argument("--output", "-o", help="output file or directory")

    parser = _Parser(prog="detbench", description="Detection speed/accuracy toolkit.")
    parser.add_argument("--version", action="version", version=f"detbench {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("eval", parents=[common], help="COCO mAP of a results file against annotations")
    p.add_argument("--annotations", required=True)
    p.add_argument("--results", required=True)
    p.add_argument("--model", default="model", help="model name written to the --output record")
    p.add_argument("--max-dets", type=int, default=100)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="batch-1 latency, fps and memory")
    p.add_argument("--adapter", choices=("refnet", "replay", "sleep"), default="refnet")
    p.add_argument("--images", required=True, help="directory of .ppm images")
    p.add_argument("--weights", help="DBW1 weight file for the refnet adapter")
    p.add_argument("--results", help="replay source: COCO results JSON or directory of .txt files")
    p.add_argument("--model")
    p.add_argument("--image-size", type=int, default=320)
    p.add_argument("--conf", type=float, default=DISPLAY_CONF_THRESHOLD)
    p.add_argument("--sleep-ms", type=float, default=10.0)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--no-postprocess", action="store_true", help="time prepare+infer only")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("flops", parents=[common], help="params, MACs, FLOPs and storage of a graph file")
    p.add_argument("graph", nargs="?", help="graph file (default: bundled reference detector)")
    p.add_argument("--input-size", type=int, default=320)
    p.add_argument("--input-shape", help="C,H,W (overrides --input-size)")
    p.add_argument("--bytes-per-param", type=int, default=4)
    p.add_argument("--header-overhead", type=int, default=0)
    p.add_argument("--format", choices=("table", "csv"), default="table")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("lr", parents=[common], help="one-cycle schedule as step,lr CSV")
    p.add_argument("--config", help="key = value file")
    p.add_argument("--total-steps", type=int)
    p.add_argument("--max-lr", type=float)
    p.add_argument("--initial-lr", type=float)
    p.add_argument("--final-lr", type=float)
    p.add_argument("--pct-start", type=float)
    p.set_defaults(func=cmd_lr)

    p = sub.add_parser("recipe", parents=[common], help="training recipe document")
    p.add_argument("--total-steps", type=int)
    p.set_defaults(func=cmd_recipe)

    p = sub.add_parser("augment", parents=[common], help="seeded mosaic/affine/flip/HSV/mixup samples")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", help="directory of <image stem>.txt label files")
    p.add_argument("--config", help="key = value augmentation settings")
    p.add_argument("--size", type=int, default=320)
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("decode", parents=[common], help="decode a raw DBT1 head tensor")
    p.add_argument("tensor")
    p.add_argument("--anchors", default=" ".join(f"{w:g},{h:g}" for w, h in DEFAULT_ANCHORS))
    p.add_argument("--stride", type=int, default=8)
    p.add_argument("--conf", type=float, default=DISPLAY_CONF_THRESHOLD)
    p.add_argument("--nms", type=float, help="apply per-class NMS at this IoU")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("report", parents=[common], help="trade-off table, plot data and Pareto frontier")
    p.add_argument("records", nargs="+", help="record JSON files written by eval/bench --output")
    p.set_defaults(func=cmd_report)
    return parser


def _fail(status, kind, message, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "status": status, **extra}) + "\n")
    return status


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.threads < 1:
            raise InputError("--threads must be >= 1")
        if args.seed is None and args.command != "augment":
            args.seed = 0
        return args.func(args)
    except UsageError as exc:
        return _fail(1, "usage", str(exc), usage=exc.usage)
    except InputError as exc:
        return _fail(1, type(exc).__name__, str(exc))
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(1, type(exc).__name__, f"{exc.strerror}: {exc.filename}")
    except AdapterError as exc:
        return _fail(2, "AdapterError", str(exc))
    except Exception as exc:  # last-resort guard so callers always get one JSON line
        return _fail(2, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
