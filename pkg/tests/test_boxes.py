import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detbench.boxes import (
    BBox,
    BoxTransform,
    Detection,
    ciou,
    ciou_loss,
    convert,
    iou,
    nms,
    unletterbox,
)
from detbench.errors import InputError

from oracles import (
    central_diff,
    ciou_formula,
    ciou_loss_frozen_alpha,
    nms_reference,
    rasterized_iou,
    rel_err,
)


def random_box(rng, lo=0.0, hi=100.0, min_side=0.5):
    x1 = rng.uniform(lo, hi - min_side)
    y1 = rng.uniform(lo, hi - min_side)
    return BBox(x1, y1, rng.uniform(x1 + min_side, hi), rng.uniform(y1 + min_side, hi))


coord = st.floats(min_value=-50, max_value=50, allow_nan=False)
side = st.floats(min_value=0.01, max_value=60, allow_nan=False)


@st.composite
def boxes(draw):
    x, y = draw(coord), draw(coord)
    return BBox(x, y, x + draw(side), y + draw(side))


class TestBBox:
    def test_rejects_inverted(self):
        with pytest.raises(InputError):
            BBox(2, 0, 1, 1)

    def test_rejects_nan(self):
        with pytest.raises(InputError):
            BBox(0, 0, float("nan"), 1)

    def test_detection_score_range(self):
        with pytest.raises(InputError):
            Detection(BBox(0, 0, 1, 1), 0, 1.5)


class TestIoU:
    def test_identity(self):
        assert iou(BBox(0, 0, 2, 2), BBox(0, 0, 2, 2)) == 1.0

    def test_disjoint(self):
        assert iou(BBox(0, 0, 1, 1), BBox(5, 5, 6, 6)) == 0.0

    def test_partial_overlap_matches_raster(self):
        a, b = (0, 0, 2, 2), (1, 1, 3, 3)
        expected = rasterized_iou(a, b, step=0.01)
        assert expected == pytest.approx(1 / 7, abs=1e-12)
        assert iou(BBox(*a), BBox(*b)) == pytest.approx(expected, abs=1e-12)

    def test_two_degenerate_boxes(self):
        assert iou(BBox(1, 1, 1, 1), BBox(1, 1, 1, 1)) == 0.0

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0

    @given(boxes())
    def test_self_iou(self, a):
        assert iou(a, a) == pytest.approx(1.0)


class TestCIoU:
    def test_identity(self):
        assert ciou(BBox(0, 0, 4, 4), BBox(0, 0, 4, 4)) == 1.0

    def test_concentric_equal_aspect(self):
        expected, _ = ciou_formula((1, 1, 3, 3), (0, 0, 4, 4))
        assert expected == pytest.approx(0.25)
        assert ciou(BBox(1, 1, 3, 3), BBox(0, 0, 4, 4)) == pytest.approx(expected, abs=1e-15)

    def test_matches_formula_oracle(self):
        rng = random.Random(1)
        for _ in range(500):
            p, g = random_box(rng), random_box(rng)
            assert ciou(p, g) == pytest.approx(ciou_formula(p.as_tuple(), g.as_tuple())[0], abs=1e-12)

    @given(boxes(), boxes())
    def test_never_exceeds_iou(self, p, g):
        assert ciou(p, g) <= iou(p, g) + 1e-15

    def test_strictly_below_iou_when_offset(self):
        rng = random.Random(2)
        for _ in range(200):
            p, g = random_box(rng), random_box(rng)
            if p.center != g.center:
                assert ciou(p, g) < iou(p, g)

    def test_aspect_mismatch_alone_lowers_value(self):
        p, g = BBox(1, 0, 3, 4), BBox(0, 0, 4, 4)  # same center, different aspect
        assert ciou(p, g) < iou(p, g)

    def test_degenerate_prediction_is_finite(self):
        val, grad = ciou_loss(BBox(1, 1, 1, 3), BBox(0, 0, 4, 4))
        assert math.isfinite(val)
        assert all(math.isfinite(g) for g in grad)

    def test_degenerate_gt_rejected(self):
        with pytest.raises(InputError):
            ciou(BBox(0, 0, 1, 1), BBox(0, 0, 0, 1))


class TestCIoULoss:
    def test_zero_at_identity(self):
        value, _ = ciou_loss(BBox(0, 0, 4, 4), BBox(0, 0, 4, 4))
        assert value == 0.0

    def test_concentric_value(self):
        value, _ = ciou_loss(BBox(1, 1, 3, 3), BBox(0, 0, 4, 4))
        assert value == pytest.approx(0.75)

    def test_gradient_finite_differences(self):
        rng = random.Random(3)
        checked = 0
        for _ in range(300):
            p, g = random_box(rng), random_box(rng)
            _, alpha0 = ciou_formula(p.as_tuple(), g.as_tuple())
            _, grad = ciou_loss(p, g)
            fd = central_diff(lambda x: ciou_loss_frozen_alpha(x, g.as_tuple(), alpha0), list(p.as_tuple()))
            assert rel_err(grad, fd) < 1e-4
            checked += 1
        assert checked == 300

    def test_gradient_points_downhill(self):
        p, g = BBox(2, 3, 9, 7), BBox(0, 0, 6, 6)
        value, grad = ciou_loss(p, g)
        step = 1e-3
        moved = BBox(*(c - step * d for c, d in zip(p.as_tuple(), grad)))
        assert ciou_loss(moved, g)[0] < value


def random_dets(rng, n, classes=3):
    return [
        Detection(random_box(rng, 0, 60, 1.0), rng.randrange(classes), round(rng.random(), 2))
        for _ in range(n)
    ]


class TestNMS:
    def test_suppresses_overlap(self):
        # IoU of these is 0.6: (0,0,10,10) vs (0,0,10,16) -> 100/160 = 0.625; use exact 0.6 construction
        a = BBox(0, 0, 10, 10)
        b = BBox(0, 0, 10, 10 / 0.6)
        assert iou(a, b) == pytest.approx(0.6)
        kept = nms([Detection(a, 0, 0.9), Detection(b, 0, 0.8)], 0.5, per_class=True)
        assert [d.score for d in kept] == [0.9]

    def test_class_separation(self):
        a = BBox(0, 0, 10, 10)
        b = BBox(0, 0, 10, 10 / 0.6)
        kept = nms([Detection(a, 0, 0.9), Detection(b, 1, 0.8)], 0.5, per_class=True)
        assert len(kept) == 2

    def test_class_agnostic(self):
        a = BBox(0, 0, 10, 10)
        b = BBox(0, 0, 10, 10 / 0.6)
        kept = nms([Detection(a, 0, 0.9), Detection(b, 1, 0.8)], 0.5, per_class=False)
        assert len(kept) == 1

    def test_empty(self):
        assert nms([], 0.5) == []

    def test_tie_break_by_input_order(self):
        a = Detection(BBox(0, 0, 10, 10), 0, 0.5)
        b = Detection(BBox(1, 1, 11, 11), 0, 0.5)
        assert nms([a, b], 0.3) == [a]
        assert nms([b, a], 0.3) == [b]

    def test_bad_threshold(self):
        with pytest.raises(InputError):
            nms([], 1.5)

    @pytest.mark.parametrize("per_class", [True, False])
    def test_matches_reference(self, per_class):
        rng = random.Random(4)
        for _ in range(100):
            dets = random_dets(rng, rng.randint(0, 200))
            thr = rng.choice([0.3, 0.45, 0.5, 0.7])
            assert nms(dets, thr, per_class) == nms_reference(dets, thr, per_class)

    def test_output_properties(self):
        rng = random.Random(5)
        for _ in range(50):
            dets = random_dets(rng, 120)
            kept = nms(dets, 0.5, per_class=True)
            scores = [d.score for d in kept]
            assert scores == sorted(scores, reverse=True)
            for i, a in enumerate(kept):
                for b in kept[i + 1:]:
                    if a.class_id == b.class_id:
                        assert iou(a.bbox, b.bbox) <= 0.5


class TestConvert:
    def test_xyxy_to_center(self):
        assert convert((0, 0, 4, 2), "xyxy", "cxcywh") == (2, 1, 4, 2)

    def test_corner_size_to_xyxy(self):
        assert convert((1, 1, 2, 2), "xywh", "xyxy") == (1, 1, 3, 3)

    def test_unknown_format(self):
        with pytest.raises(InputError):
            convert((0, 0, 1, 1), "xyxy", "yxyx")

    @given(boxes(), st.sampled_from(["cxcywh", "xywh"]))
    def test_round_trip(self, b, fmt):
        there = convert(b.as_tuple(), "xyxy", fmt)
        back = convert(there, fmt, "xyxy")
        for u, v in zip(back, b.as_tuple()):
            assert abs(u - v) <= 1e-9


class TestUnletterbox:
    def test_identity(self):
        b = BBox(3, 4, 10, 12)
        assert unletterbox(b, BoxTransform.identity(20, 20)) == b

    def test_landscape_to_square(self):
        t = BoxTransform(0.5, 0, 40, 640, 480, 320, 320)
        assert unletterbox(BBox(0, 40, 320, 280), t) == BBox(0, 0, 640, 480)

    def test_clipped_from_padding(self):
        t = BoxTransform(0.5, 0, 40, 640, 480, 320, 320)
        # box reaching into the top padding band and past the right edge
        out = unletterbox(BBox(300, 20, 330, 60), t)
        assert out == BBox(600, 0, 640, 40)

    @settings(max_examples=200)
    @given(
        st.floats(0.1, 4.0),
        st.floats(0, 50),
        st.floats(0, 50),
        st.floats(0, 0.9),
        st.floats(0, 0.9),
        st.floats(0.05, 0.1),
    )
    def test_inverse_of_forward(self, scale, px, py, fx, fy, fs):
        t = BoxTransform(scale, px, py, 200, 100, 400, 400)
        b = BBox(fx * 200, fy * 100, (fx + fs) * 200, (fy + fs) * 100)
        back = unletterbox(t.forward(b), t)
        for u, v in zip(back.as_tuple(), b.as_tuple()):
            assert abs(u - v) <= 1e-6
