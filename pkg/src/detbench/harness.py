"""
Speed/accuracy measurement: detector adapters, batch-1 benchmarking, peak
memory, evaluation and trade-off reports.

Timing runs on one dedicated thread with a monotonic clock and nothing else
scheduled in-process. Peak memory comes from a separate, untimed pass under
``tracemalloc`` so tracing overhead never leaks into latency numbers; adapters
that manage memory outside Python can self-report instead, and the result
records which source was used.
"""

from __future__ import annotations

import csv
import json
import math
import os
import threading
import time
import tracemalloc
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Any, Hashable, Mapping, Optional, Sequence

import numpy as np

from detbench.augment import LabeledImage, letterbox
from detbench.boxes import BoxTransform, Detection, GroundTruth, clip_box, nms, unletterbox
from detbench.costmodel import GraphIR, count_flops
from detbench.errors import AdapterError, InputError
from detbench.formats import parse_coco_results, parse_detections
from detbench.metrics import EvalConfig, EvalSummary, coco_map
from detbench.nnops import RefNetSpec, init_weights, refnet_forward, refnet_graph, yolo_decode
from detbench.nnops.weights import encode_weights


EVAL_CONF_THRESHOLD = 0.001
DISPLAY_CONF_THRESHOLD = 0.25
NMS_IOU_THRESHOLD = 0.45


class DetectorAdapter(ABC):
    """One detector behind a uniform batch-1 pipeline.

    ``prepare`` turns an original image into a model input plus the transform
    back to original coordinates; ``postprocess`` must return boxes in original
    image coordinates.
    """

    name: str = "detector"

    @abstractmethod
    def prepare(self, image: np.ndarray, image_id: Hashable = None) -> tuple[Any, BoxTransform]: ...

    @abstractmethod
    def infer(self, model_input: Any) -> Any: ...

    @abstractmethod
    def postprocess(self, raw: Any, transform: BoxTransform) -> list[Detection]: ...

    @property
    def storage_bytes(self) -> Optional[int]:
        return None

    def cost_graph(self) -> Optional[tuple[GraphIR, tuple[int, ...]]]:
        """(graph, input shape) for analytical FLOPs, if the adapter has one."""
        return None

    def memory_report(self) -> Optional[int]:
        """Self-reported peak bytes for adapters whose memory lives outside Python."""
        return None

    def detect(self, image: np.ndarray, image_id: Hashable = None) -> list[Detection]:
        x, t = self.prepare(image, image_id)
        return self.postprocess(self.infer(x), t)


class ReplayAdapter(DetectorAdapter):
    """Serves precomputed detections keyed by image id."""

    def __init__(self, detections: Mapping[Hashable, Sequence[Detection]], conf_threshold: float = EVAL_CONF_THRESHOLD, name: str = "replay"):
        self._dets = {k: tuple(v) for k, v in detections.items()}
        self.conf_threshold = conf_threshold
        self.name = name

    @classmethod
    def from_coco_results(cls, path, class_map: Optional[Mapping[int, int]] = None, **kwargs) -> "ReplayAdapter":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}: invalid JSON ({exc})") from None
        return cls(parse_coco_results(doc, class_map), **kwargs)

    @classmethod
    def from_text_dir(cls, directory, **kwargs) -> "ReplayAdapter":
        """One ``<image_id>.txt`` detection file per image."""
        if not os.path.isdir(directory):
            raise InputError(f"not a directory: {directory}")
        dets = {}
        for fname in sorted(os.listdir(directory)):
            if fname.endswith(".txt"):
                with open(os.path.join(directory, fname), encoding="utf-8") as fh:
                    dets[fname[:-4]] = parse_detections(fh.read())
        return cls(dets, **kwargs)

    def prepare(self, image, image_id=None):
        h, w = np.shape(image)[:2]
        return image_id, BoxTransform.identity(w, h)

    def infer(self, model_input):
        return self._dets.get(model_input, ())

    def postprocess(self, raw, transform):
        return [
            Detection(clip_box(d.bbox, transform.orig_w, transform.orig_h), d.class_id, d.score)
            for d in raw
            if d.score >= self.conf_threshold
        ]


class RefNetAdapter(DetectorAdapter):
    """Letterbox, reference network forward pass, decode, NMS, map back."""

    def __init__(
        self,
        spec: RefNetSpec = RefNetSpec(),
        weights: Optional[Mapping[str, np.ndarray]] = None,
        image_size: int = 320,
        conf_threshold: float = EVAL_CONF_THRESHOLD,
        nms_iou: float = NMS_IOU_THRESHOLD,
        seed: int = 0,
        name: str = "refnet",
    ):
        if image_size % spec.stride:
            raise InputError(f"image_size must be a multiple of {spec.stride}")
        self.spec = spec
        self.weights = dict(weights) if weights is not None else init_weights(spec, seed)
        self.image_size = image_size
        self.conf_threshold = conf_threshold
        self.nms_iou = nms_iou
        self.name = name

    def prepare(self, image, image_id=None):
        boxed, t = letterbox(LabeledImage(image), self.image_size)
        return boxed.image, t

    def infer(self, model_input):
        return refnet_forward(self.spec, self.weights, model_input)

    def postprocess(self, raw, transform):
        dets = yolo_decode(raw, self.spec.anchors, self.spec.stride, self.conf_threshold)
        kept = nms(dets, self.nms_iou, per_class=True)
        return [Detection(unletterbox(d.bbox, transform), d.class_id, d.score) for d in kept]

    @property
    def storage_bytes(self):
        return len(encode_weights(self.weights))

    def cost_graph(self):
        return refnet_graph(self.spec), (self.spec.in_channels, self.image_size, self.image_size)


class SleepAdapter(DetectorAdapter):
    """Deterministic timing fixture: sleeps a fixed time in infer (and optionally postprocess)."""

    def __init__(self, infer_ms: float = 10.0, postprocess_ms: float = 0.0, name: str = "sleep"):
        self.infer_ms = infer_ms
        self.postprocess_ms = postprocess_ms
        self.name = name

    def prepare(self, image, image_id=None):
        h, w = np.shape(image)[:2]
        return image_id, BoxTransform.identity(w, h)

    def infer(self, model_input):
        time.sleep(self.infer_ms / 1000.0)
        return ()

    def postprocess(self, raw, transform):
        if self.postprocess_ms:
            time.sleep(self.postprocess_ms / 1000.0)
        return list(raw)


# -- benchmarking -----------------------------------------------------------------


@dataclass(frozen=True)
class BenchConfig:
    warmup_iters: int = 10
    measured_iters: int = 100
    include_postprocess: bool = True
    # images run through the untimed tracemalloc pass
    memory_images: int = 4

    batch_size = 1

    def __post_init__(self):
        if self.warmup_iters < 0:
            raise InputError("warmup_iters must be >= 0")
        if self.measured_iters < 1:
            raise InputError("measured_iters must be >= 1")
        if self.memory_images < 0:
            raise InputError("memory_images must be >= 0")


@dataclass(frozen=True)
class BenchResult:
    fps: float
    p50_ms: float
    p90_ms: float
    p99_ms: float
    mean_ms: float
    peak_memory_bytes: Optional[int]
    memory_source: str
    storage_bytes: Optional[int]
    gflops: Optional[float]
    measured_iters: int
    include_postprocess: bool
    latencies_ms: tuple[float, ...] = field(repr=False, default=())

    def to_dict(self, with_latencies: bool = False) -> dict:
        d = asdict(self)
        if with_latencies:
            d["latencies_ms"] = list(self.latencies_ms)
        else:
            d.pop("latencies_ms")
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BenchResult":
        d = dict(d)
        d["latencies_ms"] = tuple(d.get("latencies_ms", ()))
        return cls(**d)


def _as_items(images) -> list[tuple[Hashable, np.ndarray]]:
    items = []
    for k, img in enumerate(images):
        if isinstance(img, EvalSample):
            items.append((img.image_id, img.image))
        else:
            items.append((k, img))
    return items


def _run_once(adapter, image_id, image, with_post):
    x, t = adapter.prepare(image, image_id)
    raw = adapter.infer(x)
    if with_post:
        adapter.postprocess(raw, t)


def _timed_loop(adapter, items, config):
    n = len(items)
    latencies = []
    for phase, count in (("warmup", config.warmup_iters), ("measured", config.measured_iters)):
        for i in range(count):
            image_id, image = items[i % n]
            t0 = time.perf_counter()
            try:
                _run_once(adapter, image_id, image, config.include_postprocess)
            except Exception as exc:
                raise AdapterError(phase, i, exc) from exc
            t1 = time.perf_counter()
            if phase == "measured":
                latencies.append(t1 - t0)
    return latencies


def _traced_peak(adapter, items, config) -> int:
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    try:
        peak = 0
        for i, (image_id, image) in enumerate(items[: config.memory_images]):
            tracemalloc.reset_peak()
            base, _ = tracemalloc.get_traced_memory()
            try:
                _run_once(adapter, image_id, image, True)
            except Exception as exc:
                raise AdapterError("memory", i, exc) from exc
            peak = max(peak, tracemalloc.get_traced_memory()[1] - base)
        return peak
    finally:
        if not was_tracing:
            tracemalloc.stop()


def run_bench(adapter: DetectorAdapter, images: Sequence, config: BenchConfig = BenchConfig()) -> BenchResult:
    """Batch-1 latency/fps, peak memory, storage and analytical GFLOPs.

    ``images`` are (H, W, 3) arrays or ``EvalSample`` objects; they are cycled
    when there are fewer images than iterations.
    """
    items = _as_items(images)
    if not items:
        raise InputError("run_bench needs at least one image")

    box: dict[str, Any] = {}

    def worker():
        try:
            box["latencies"] = _timed_loop(adapter, items, config)
        except BaseException as exc:  # re-raised on the caller's thread
            box["error"] = exc

    thread = threading.Thread(target=worker, name="detbench-timing")
    thread.start()
    thread.join()
    if "error" in box:
        raise box["error"]
    lat = np.array(box["latencies"])

    reported = adapter.memory_report()
    if reported is not None:
        peak, source = int(reported), "adapter"
    elif config.memory_images:
        peak, source = _traced_peak(adapter, items, config), "tracemalloc"
    else:
        peak, source = None, "none"

    graph = adapter.cost_graph()
    gflops = count_flops(*graph).gflops if graph is not None else None

    p50, p90, p99 = (float(v) * 1000.0 for v in np.percentile(lat, [50, 90, 99]))
    return BenchResult(
        fps=len(lat) / float(lat.sum()),
        p50_ms=p50,
        p90_ms=p90,
        p99_ms=p99,
        mean_ms=float(lat.mean()) * 1000.0,
        peak_memory_bytes=peak,
        memory_source=source,
        storage_bytes=adapter.storage_bytes,
        gflops=gflops,
        measured_iters=len(lat),
        include_postprocess=config.include_postprocess,
        latencies_ms=tuple(float(v) * 1000.0 for v in lat),
    )


# -- evaluation -------------------------------------------------------------------


@dataclass(frozen=True)
class EvalSample:
    image_id: Hashable
    image: np.ndarray
    ground_truths: tuple[GroundTruth, ...] = ()


def collect_detections(adapter: DetectorAdapter, dataset: Sequence[EvalSample]) -> dict[Hashable, list[Detection]]:
    out = {}
    for i, s in enumerate(dataset):
        try:
            out[s.image_id] = adapter.detect(s.image, s.image_id)
        except (InputError, AdapterError):
            raise
        except Exception as exc:
            raise AdapterError("eval", i, exc) from exc
    return out


def run_eval(
    adapter: DetectorAdapter,
    dataset: Sequence[EvalSample],
    config: EvalConfig = EvalConfig(),
    workers: int = 1,
) -> EvalSummary:
    """Run the full pipeline image by image, then score with ``coco_map``.

    Inference is sequential (adapters are single-threaded); ``workers``
    parallelises the per-image matching, whose reduction order is fixed.
    """
    if not dataset:
        raise InputError("run_eval needs a non-empty dataset")
    ids = [s.image_id for s in dataset]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate image ids in dataset")
    dets = collect_detections(adapter, dataset)
    gts = {s.image_id: list(s.ground_truths) for s in dataset}
    return coco_map(dets, gts, config, workers=workers)


# -- trade-off report -------------------------------------------------------------


@dataclass(frozen=True)
class TradeoffRecord:
    model: str
    eval: Optional[EvalSummary] = None
    bench: Optional[BenchResult] = None

    @property
    def fps(self) -> Optional[float]:
        return self.bench.fps if self.bench is not None else None

    @property
    def map(self) -> Optional[float]:
        return self.eval.map if self.eval is not None else None

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "eval": self.eval.to_dict() if self.eval is not None else None,
            "bench": self.bench.to_dict() if self.bench is not None else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "TradeoffRecord":
        if "model" not in d:
            raise InputError("record needs a 'model' field")
        ev, be = d.get("eval"), d.get("bench")
        return cls(
            str(d["model"]),
            EvalSummary.from_dict(ev) if ev is not None else None,
            BenchResult.from_dict(be) if be is not None else None,
        )


def dominates(a: TradeoffRecord, b: TradeoffRecord) -> bool:
    """a is at least as fast and as accurate as b, and strictly better in one."""
    return a.fps >= b.fps and a.map >= b.map and (a.fps > b.fps or a.map > b.map)


def pareto_frontier(records: Sequence[TradeoffRecord]) -> list[str]:
    """Names of records not dominated on (fps, mAP); records missing either are left out."""
    scored = [r for r in records if r.fps is not None and r.map is not None]
    return sorted(r.model for r in scored if not any(dominates(o, r) for o in scored if o is not r))


CSV_COLUMNS = (
    "model", "mAP", "AP50", "fps", "p50_ms", "peak_memory_bytes", "gflops", "storage_bytes",
    "p90_ms", "p99_ms", "memory_source", "latency_scope",
)


def _cell(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    return repr(v) if isinstance(v, float) else str(v)


def _row(r: TradeoffRecord) -> list[str]:
    e, b = r.eval, r.bench
    values = [
        r.model,
        e.map if e else None,
        e.ap50 if e else None,
        b.fps if b else None,
        b.p50_ms if b else None,
        b.peak_memory_bytes if b else None,
        b.gflops if b else None,
        b.storage_bytes if b else None,
        b.p90_ms if b else None,
        b.p99_ms if b else None,
        b.memory_source if b else None,
        ("with_postprocess" if b.include_postprocess else "without_postprocess") if b else None,
    ]
    return [_cell(v) for v in values]


def tradeoff_report(records: Sequence[TradeoffRecord], out_dir) -> dict[str, str]:
    """Write tradeoff.csv, plot_data.csv and frontier.json; returns their paths.

    Rows are sorted by model name so the files do not depend on record order.
    """
    if not records:
        raise InputError("tradeoff_report needs at least one record")
    names = [r.model for r in records]
    if len(set(names)) != len(names):
        raise InputError(f"duplicate model names in records: {sorted(names)}")
    ordered = sorted(records, key=lambda r: r.model)
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, f) for k, f in (("table", "tradeoff.csv"), ("plot", "plot_data.csv"), ("frontier", "frontier.json"))}

    with open(paths["table"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in ordered:
            w.writerow(_row(r))

    with open(paths["plot"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "fps", "mAP"])
        for r in ordered:
            w.writerow([r.model, _cell(r.fps), _cell(r.map)])

    frontier = pareto_frontier(ordered)
    missing = [r.model for r in ordered if r.fps is None or r.map is None]
    with open(paths["frontier"], "w", encoding="utf-8") as fh:
        json.dump({"frontier": frontier, "missing": missing}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
