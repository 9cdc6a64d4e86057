"""
Acceptance suite. Each test checks one criterion at its stated tolerance and
records a PASS/FAIL line; the lines are printed together at the end of the
pytest run (see conftest.py) and when this file is run as a script.
"""

import functools
import json
import math
import random
import time
from fractions import Fraction

import numpy as np

from detbench.augment import AugmentConfig, LabeledImage, augment_sample, hflip, mixup, mosaic
from detbench.boxes import BBox, Detection, GroundTruth, ciou_loss, nms
from detbench.costmodel import GraphIR, INPUT, Node, count_flops, count_params, storage_cost
from detbench.errors import UndefinedMetricError
from detbench.harness import BenchConfig, EvalSample, RefNetAdapter, SleepAdapter, TradeoffRecord, run_bench, run_eval, tradeoff_report
from detbench.metrics import FP, TP, EvalConfig, ap_101, coco_map, pr_curve
from detbench.nnops import (
    RefNetSpec,
    SEBlockSpec,
    cross_entropy,
    focal_loss,
    init_weights,
    refnet_graph,
    save_weights,
    se_block,
    weight_file_overhead,
    yolo_decode,
)
from detbench.schedule import OneCycleConfig, TrainingRecipe, emit_recipe, lr_at, parse_kv, schedule

from oracles import (
    brute_force_map,
    central_diff,
    ciou_formula,
    ciou_loss_frozen_alpha,
    nms_reference,
    rel_err,
    se_straight_line,
)
from test_boxes import random_box, random_dets
from test_metrics import random_dataset

RESULTS = []


def criterion(name):
    """Record PASS/FAIL for ``name``; the wrapped check returns a short detail string."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                RESULTS.append(f"FAIL  {name}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}")
                print(RESULTS[-1])
                raise
            RESULTS.append(f"PASS  {name}: {detail}")
            print(RESULTS[-1])

        return run

    return wrap


@criterion("mAP oracle equivalence (50 datasets, 1e-9, < 10 s)")
def test_map_oracle_equivalence():
    cfg = EvalConfig()
    rng = random.Random(2024)
    compared = undefined = 0
    worst = 0.0
    t0 = time.perf_counter()
    while compared < 50:
        dets, gts = random_dataset(rng)
        assert len(gts) <= 5 and all(len(v) <= 10 for v in gts.values()) and all(len(v) <= 10 for v in dets.values())
        expected = brute_force_map(dets, gts, cfg.iou_thresholds, cfg.area_ranges)
        if expected["all"] is None:
            try:
                coco_map(dets, gts, cfg)
            except UndefinedMetricError:
                undefined += 1
                continue
            raise AssertionError("coco_map returned a value where the oracle found no ground truth")
        s = coco_map(dets, gts, cfg)
        for name, got in (("all", s.map), ("small", s.ap_small), ("medium", s.ap_medium), ("large", s.ap_large)):
            if expected[name] is None:
                assert got is None, f"{name}: expected undefined, got {got}"
            else:
                worst = max(worst, abs(got - expected[name]))
                assert abs(got - expected[name]) <= 1e-9, f"{name}: {got} vs {expected[name]}"
        compared += 1
    elapsed = time.perf_counter() - t0
    assert elapsed < 10.0, f"took {elapsed:.2f} s"
    return f"{compared} datasets, max |diff| {worst:.1e}, {elapsed:.2f} s ({undefined} undefined datasets also rejected)"


@criterion("101-point AP golden cases")
def test_ap_golden():
    ap = ap_101(pr_curve([FP, TP], 1))
    assert ap == 0.5, ap
    rng = random.Random(1)
    _, gts = random_dataset(rng, n_images=5)
    gts = {k: [g for g in v if not g.ignore] for k, v in gts.items()}
    gts[0].append(GroundTruth(BBox(0, 0, 20, 20), 0))
    dets = {k: [Detection(g.bbox, g.class_id, 1.0) for g in v] for k, v in gts.items()}
    m = coco_map(dets, gts).map
    assert m == 1.0, m
    return "AP([FP, TP], 1 GT) = 0.5, perfect detector mAP = 1.0"


@criterion("NMS equivalence with O(n^2) reference (1000 instances, n <= 200, < 5 s)")
def test_nms_equivalence():
    rng = random.Random(77)
    instances = []
    for _ in range(1000):
        instances.append((random_dets(rng, rng.randint(0, 200)), rng.choice([0.3, 0.45, 0.5, 0.6, 0.7]), rng.random() < 0.5))
    t0 = time.perf_counter()
    kept = [nms(d, thr, pc) for d, thr, pc in instances]
    elapsed = time.perf_counter() - t0
    for (d, thr, pc), got in zip(instances, kept):
        assert got == nms_reference(d, thr, pc)
    assert elapsed < 5.0, f"nms took {elapsed:.2f} s"
    return f"1000/1000 identical, nms time {elapsed:.2f} s"


@criterion("CIoU, cross-entropy and focal gradients vs central differences (1000 each, rel 1e-4)")
def test_gradients():
    rng = random.Random(11)
    worst = {"ciou": 0.0, "ce": 0.0, "focal": 0.0}
    for _ in range(1000):
        p, g = random_box(rng), random_box(rng)
        _, alpha0 = ciou_formula(p.as_tuple(), g.as_tuple())
        _, grad = ciou_loss(p, g)
        fd = central_diff(lambda x: ciou_loss_frozen_alpha(x, g.as_tuple(), alpha0), list(p.as_tuple()))
        worst["ciou"] = max(worst["ciou"], rel_err(grad, fd))
    nrng = np.random.default_rng(12)
    for _ in range(1000):
        k = int(nrng.integers(2, 10))
        z = nrng.normal(0, 3, k)
        t = int(nrng.integers(k))
        fd = central_diff(lambda v: cross_entropy(np.array(v), t).value, z.tolist())
        worst["ce"] = max(worst["ce"], rel_err(cross_entropy(z, t).gradient.tolist(), fd))
    for _ in range(1000):
        p = float(nrng.uniform(0.01, 0.99))
        t = int(nrng.integers(2))
        gamma = float(nrng.uniform(0, 5))
        alpha = float(nrng.uniform(0.05, 1.0))
        fd = central_diff(lambda v: focal_loss(v[0], t, gamma, alpha).value, [p])
        worst["focal"] = max(worst["focal"], rel_err([focal_loss(p, t, gamma, alpha).gradient], fd))
    for name, err in worst.items():
        assert err < 1e-4, f"{name} worst relative error {err:.2e}"
    return ", ".join(f"{k} worst {v:.1e}" for k, v in worst.items())


@criterion("SE block: zero weights give exactly 0.5 x; random weights match straight-line oracle (1e-6)")
def test_se_block():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(16, 9, 7))
    assert np.array_equal(se_block(x, SEBlockSpec.zeros(16, 4)), 0.5 * x)
    worst = 0.0
    for c in (1, 3, 8, 16, 32):
        for r in (1, 4, 16):
            spec = SEBlockSpec.random(c, r, rng)
            x = rng.normal(size=(c, 5, 6))
            want = np.array(se_straight_line(x, spec.w1.tolist(), spec.b1.tolist(), spec.w2.tolist(), spec.b2.tolist()))
            worst = max(worst, float(np.max(np.abs(se_block(x, spec) - want))))
    assert worst < 1e-6, worst
    return f"exact halving; oracle max |diff| {worst:.1e}"


@criterion("yolo_decode all-zero logits: cell-center boxes of anchor size, score 0.25")
def test_decode_all_zero():
    anchors = [(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)]
    stride, h, w, k = 8, 3, 4, 3
    dets = yolo_decode(np.zeros((len(anchors) * (5 + k), h, w)), anchors, stride, 0.0)
    assert len(dets) == len(anchors) * h * w
    n = 0
    for aw, ah in anchors:
        for i in range(h):
            for j in range(w):
                d = dets[n]
                n += 1
                cx, cy = (j + 0.5) * stride, (i + 0.5) * stride
                assert d.bbox.as_tuple() == (cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2), d
                assert d.score == 0.25
    return f"{n} boxes exact"


@criterion("FLOPs/params: RefNet hand table, toy conv 144 MACs, side doubling x4, 800/320 ratio 6.25")
def test_flops_params():
    rep = count_flops(refnet_graph(RefNetSpec()), (3, 64, 64))
    # hand tabulation at 3x64x64: conv params 224+1168+4640+792, SE 148; MACs per conv 9*Cin*Cout*Ho*Wo
    assert (rep.params, rep.macs, rep.elementwise, rep.flops) == (6972, 860288, 38420, 1758996)
    assert count_params(refnet_graph(RefNetSpec()))[1] == 6972
    toy = count_flops(GraphIR([Node("c", "conv", (INPUT,), {"out": 1, "kernel": 3, "padding": 1, "bias": False})]), (1, 4, 4))
    assert toy.macs == 144 and toy.flops == 288
    g = refnet_graph(RefNetSpec())
    conv = lambda r: sum(n.macs for n in r.nodes if n.kind == "conv")
    for side in (32, 64, 160, 320):
        assert conv(count_flops(g, (3, 2 * side, 2 * side))) == 4 * conv(count_flops(g, (3, side, side)))
    fixed = GraphIR([Node("a", "conv", (INPUT,), {"out": 16, "kernel": 1}), Node("b", "conv", ("a",), {"out": 8, "kernel": 1})])
    ratio = Fraction(conv(count_flops(fixed, (3, 800, 800))), conv(count_flops(fixed, (3, 320, 320))))
    assert ratio == Fraction(25, 4)
    return f"totals 6972 params / 860288 MACs / 1758996 FLOPs; ratio {ratio} = {float(ratio)}"


@criterion("Storage: predicted size equals serialized RefNet weight file byte-for-byte")
def test_storage(tmp_path):
    spec = RefNetSpec()
    w = init_weights(spec, 0)
    actual = save_weights(tmp_path / "refnet.dbw", w)
    predicted = storage_cost(refnet_graph(spec), 4, weight_file_overhead((k, v.shape) for k, v in w.items()))
    assert predicted == actual == (tmp_path / "refnet.dbw").stat().st_size
    return f"{predicted} bytes"


@criterion("OneCycleLR endpoints 0.001 / 0.01 exact; adjacent-step jumps within bound")
def test_onecycle():
    cfg = OneCycleConfig(100)
    assert lr_at(cfg, 0) == 0.001
    lrs = schedule(cfg)
    assert lrs.max() == 0.01 and lrs[cfg.ramp_steps] == 0.01
    ramp_bound, anneal_bound = cfg.step_bounds()
    d = np.abs(np.diff(lrs))
    r = cfg.ramp_steps
    assert anneal_bound == math.pi * (cfg.max_lr - cfg.final_lr) / (2 * cfg.anneal_steps)
    assert d[r:].max() <= anneal_bound, f"anneal jump {d[r:].max()} > {anneal_bound}"
    # the ramp has its own, shorter phase and therefore its own bound
    assert d[:r].max() <= ramp_bound, f"ramp jump {d[:r].max()} > {ramp_bound}"
    return f"anneal max jump {d[r:].max():.3e} <= {anneal_bound:.3e}; ramp max jump {d[:r].max():.3e} <= {ramp_bound:.3e}"


@criterion("Bench timing: 10 ms sleep adapter measures 100 fps within 10% over 100 iterations")
def test_bench_timing():
    r = run_bench(SleepAdapter(10.0), [np.zeros((8, 8, 3))], BenchConfig(warmup_iters=10, measured_iters=100))
    assert r.measured_iters == 100
    assert abs(r.fps - 100.0) <= 10.0, r.fps
    return f"{r.fps:.2f} fps"


@criterion("End-to-end determinism: RefNet summaries and report files bit-identical across runs and workers")
def test_end_to_end_determinism(tmp_path):
    rng = np.random.default_rng(8)
    data = []
    for i in range(4):
        gts = tuple(GroundTruth(BBox(4 + 6 * k, 5, 20 + 6 * k, 30), k % 3) for k in range(3))
        data.append(EvalSample(i, rng.random((48, 56, 3)), gts))
    blobs = []
    for run_idx, workers in enumerate((1, 4, 1, 3)):
        adapter = RefNetAdapter(image_size=64, seed=42)
        s = run_eval(adapter, data, workers=workers)
        paths = tradeoff_report([TradeoffRecord("refnet", s)], tmp_path / f"run{run_idx}")
        blobs.append((json.dumps(s.to_dict(), sort_keys=True), [open(p, "rb").read() for p in paths.values()]))
    assert all(b == blobs[0] for b in blobs[1:])
    return f"4 runs (workers 1, 4, 1, 3) identical, mAP {json.loads(blobs[0][0])['mAP']!r}"


@criterion("Augmentation geometry: double hflip, mosaic offsets, mixup midpoint, seeded reproducibility")
def test_augmentation():
    rng = np.random.default_rng(0)
    src = LabeledImage(rng.random((17, 23, 3)), (GroundTruth(BBox(1.25, 2, 10.5, 12), 0),))
    twice = hflip(hflip(src))
    assert np.array_equal(twice.image, src.image) and twice.labels == src.labels

    tiles = [LabeledImage(np.random.default_rng(k).random((320, 320, 3)), (GroundTruth(BBox(10, 20, 110, 220), k),)) for k in range(4)]
    out = mosaic(tiles, 640, (320, 320))
    # hand-computed: tile offsets (0,0), (320,0), (0,320), (320,320)
    assert [l.bbox for l in out.labels] == [
        BBox(10, 20, 110, 220), BBox(330, 20, 430, 220), BBox(10, 340, 110, 540), BBox(330, 340, 430, 540)
    ]

    a = LabeledImage(np.random.default_rng(1).random((8, 8, 3)))
    b = LabeledImage(np.random.default_rng(2).random((8, 8, 3)))
    assert np.array_equal(mixup(a, b, 0.5).image, (a.image + b.image) / 2)

    ds = [LabeledImage(np.random.default_rng(k).random((40 + 8 * k, 64, 3)), (GroundTruth(BBox(4, 4, 30, 30), k % 3),)) for k in range(5)]
    for mix in (False, True):
        cfg = AugmentConfig(mixup_enabled=mix, seed=99)
        for i in range(len(ds)):
            x, y = augment_sample(ds, i, cfg, 64), augment_sample(ds, i, cfg, 64)
            assert x.image.tobytes() == y.image.tobytes() and x.labels == y.labels
    return "all four checks exact"


@criterion("Recipe fidelity: batch 32, epochs 50, momentum 0.937, weight decay 0.0005, size 320, classes")
def test_recipe():
    doc = parse_kv(emit_recipe(TrainingRecipe()))
    assert doc["batch_size"] == "32"
    assert doc["epochs"] == "50"
    assert doc["momentum"] == "0.937"
    assert doc["weight_decay"] == "0.0005"
    assert doc["image_size"] == "320"
    assert json.loads(doc["classes"]) == ["with mask", "incorrect mask", "without mask"]
    return "all values present and exact"


if __name__ == "__main__":
    import inspect
    import pathlib
    import sys
    import tempfile

    failed = 0
    for fn in [v for k, v in list(globals().items()) if k.startswith("test_")]:
        with tempfile.TemporaryDirectory() as d:
            try:
                fn(pathlib.Path(d)) if "tmp_path" in inspect.signature(fn).parameters else fn()
            except BaseException:
                failed += 1
    sys.exit(1 if failed else 0)
