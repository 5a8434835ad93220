import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frustumbox.evaluation import (APReport, Detection, EvalConfig, average_precision,
                                   bev_intersection_area, evaluate, format_report, iou_3d,
                                   map_report, match_detections)
from frustumbox.geometry import BoxParams, points_in_box


def box(x=0.0, y=0.0, z=0.0, h=1.0, w=1.0, l=1.0, th=0.0):
    return BoxParams([x, y, z], [h, w, l], th)


def monte_carlo_iou(a, b, n, rng):
    lo = np.minimum(a.corners().min(0), b.corners().min(0))
    hi = np.maximum(a.corners().max(0), b.corners().max(0))
    pts = rng.uniform(lo, hi, (n, 3))
    ina, inb = points_in_box(pts, a), points_in_box(pts, b)
    union = np.sum(ina | inb)
    return np.sum(ina & inb) / union if union else 0.0


def test_bev_examples():
    assert bev_intersection_area(box(l=4, w=2), box(l=4, w=2)) == pytest.approx(8.0)
    assert bev_intersection_area(box(), box(x=3)) == 0.0
    assert bev_intersection_area(box(), box(th=np.pi / 4)) == pytest.approx(2 * (np.sqrt(2) - 1), abs=1e-9)
    s = np.sqrt(2)
    assert bev_intersection_area(box(w=s, l=s), box(w=s, l=s, th=np.pi / 4)) == pytest.approx(
        4 * (np.sqrt(2) - 1), abs=1e-9)


def test_iou_examples():
    a = box(1, 2, 0.5, 1.5, 1.7, 4.0, 0.3)
    assert iou_3d(a, a) == pytest.approx(1.0)
    assert iou_3d(box(), box(x=0.5)) == pytest.approx(1 / 3)
    assert iou_3d(box(), box(z=2)) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_iou_matches_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    a = box(*rng.uniform(-0.5, 0.5, 3), *rng.uniform(0.5, 3, 3), rng.uniform(0, np.pi))
    b = box(*rng.uniform(-0.5, 0.5, 3), *rng.uniform(0.5, 3, 3), rng.uniform(0, np.pi))
    assert iou_3d(a, b) == pytest.approx(monte_carlo_iou(a, b, 200_000, rng), abs=0.01)


boxes = st.builds(lambda c, s, t: box(*c, *s, t),
                  st.tuples(*[st.floats(-2, 2)] * 3), st.tuples(*[st.floats(0.3, 4)] * 3),
                  st.floats(-4, 4))


@settings(max_examples=80, deadline=None)
@given(boxes, boxes, st.floats(-10, 10), st.floats(-10, 10), st.floats(-np.pi, np.pi))
def test_iou_symmetric_and_rigid_invariant(a, b, dx, dy, rot):
    iou = iou_3d(a, b)
    assert 0.0 <= iou <= 1.0
    assert iou_3d(b, a) == pytest.approx(iou, abs=1e-9)
    area = bev_intersection_area(a, b)
    assert area <= min(a.l * a.w, b.l * b.w) + 1e-12

    c, s = np.cos(rot), np.sin(rot)

    def move(bx):
        x, y = bx.center[:2]
        return box(c * x - s * y + dx, s * x + c * y + dy, bx.center[2], bx.h, bx.w, bx.l, bx.heading + rot)

    assert iou_3d(move(a), move(b)) == pytest.approx(iou, abs=1e-6)


def test_match_simple_and_duplicate():
    cfg = EvalConfig()
    gt = [(box(), 0)]
    _, tp, matched = match_detections([Detection(box(), 0, 0.9)], gt, cfg)
    assert tp.tolist() == [True] and matched.tolist() == [True]
    _, tp, _ = match_detections([Detection(box(), 0, 0.9), Detection(box(x=0.05), 0, 0.8)], gt, cfg)
    assert tp.tolist() == [True, False]


def test_match_respects_class_and_score_threshold():
    cfg = EvalConfig(score_threshold=0.5, iou_thresholds={1: 0.9})
    gts = [(box(), 0), (box(x=5), 1)]
    dets = [Detection(box(), 1, 0.9), Detection(box(x=5.2), 1, 0.8), Detection(box(), 0, 0.3)]
    kept, tp, matched = match_detections(dets, gts, cfg)
    assert len(kept) == 2 and tp.tolist() == [False, False] and matched.tolist() == [False, False]


def greedy_by_hand(dets, gts, thr):
    # replay the protocol from an explicit IoU table
    table = [[iou_3d(d.box, g) for g, _ in gts] for d in dets]
    used, out = set(), [False] * len(dets)
    for i in sorted(range(len(dets)), key=lambda i: -dets[i].score):
        cands = [(table[i][j], j) for j in range(len(gts)) if j not in used and table[i][j] >= thr]
        if cands:
            used.add(max(cands)[1])
            out[i] = True
    return out


def test_match_mixed_case():
    gts = [(box(), 0), (box(x=1.2), 0)]
    dets = [Detection(box(x=0.55), 0, 0.9), Detection(box(x=0.1), 0, 0.8), Detection(box(x=1.1), 0, 0.7)]
    _, tp, matched = match_detections(dets, gts, EvalConfig(default_iou=0.2))
    # the top-scoring loose detection takes GT 0, so the tight one on GT 0 becomes an FP
    assert tp.tolist() == greedy_by_hand(dets, gts, 0.2) == [True, False, True]
    assert matched.all()
    # the greedy result here is also a maximum-cardinality assignment
    best = max(sum(1 for i, j in enumerate(perm) if j is not None and iou_3d(dets[i].box, gts[j][0]) >= 0.2)
               for perm in itertools.permutations([0, 1, None]))
    assert tp.sum() == best


def test_ap_examples():
    assert average_precision([0.9], [True], 1) == 1.0
    assert average_precision([0.9, 0.8], [False, False], 2) == 0.0
    # recall 1/3, 1/3, 2/3; envelope precision 1, 2/3, 2/3
    assert average_precision([0.9, 0.8, 0.7], [True, False, True], 3) == pytest.approx((13 + 13 * 2 / 3) / 40)
    assert average_precision([], [], 0) is None
    assert average_precision([0.5], [False], 0) == 0.0
    assert average_precision([], [], 2) == 0.0
    assert average_precision([0.9], [True], 1, recall_points=11) == 1.0


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 0.99), st.booleans()), min_size=1, max_size=12),
       st.integers(0, 4))
def test_ap_monotone(dets, extra_gt):
    scores, tp = [d[0] for d in dets], [d[1] for d in dets]
    n_gt = sum(tp) + extra_gt
    if n_gt == 0:
        return
    ap = average_precision(scores, tp, n_gt)
    assert average_precision(scores + [0.0], tp + [False], n_gt) <= ap + 1e-12
    assert average_precision(scores + [1.0], tp + [True], n_gt + 1) >= ap - 1e-12


def test_evaluate_per_class():
    gts = [(box(), 0), (box(x=5), 1)]
    dets = [Detection(box(), 0, 0.9), Detection(box(x=9), 1, 0.8)]
    assert evaluate(dets, gts, EvalConfig()) == {0: 1.0, 1: 0.0}


def test_map_report():
    r = map_report({0: 0.4, 1: 0.2, 2: 0.1}, common=(0, 1), novel=(2,))
    assert r.common == pytest.approx(0.3) and r.novel == pytest.approx(0.1)
    assert r.overall == pytest.approx(0.7 / 3)
    one = map_report({3: 0.25})
    assert one.common is None and one.overall == 0.25
    single = map_report({3: 0.25}, common=(3,), novel=(3,))
    assert single.common == single.novel == single.overall == 0.25
    with pytest.raises(ValueError):
        map_report({0: 0.5, 1: 0.5}, common=(0,))
    skipped = map_report({0: 0.5, 1: None}, common=(0,))
    assert skipped.overall == 0.5


def test_format_report():
    text = format_report(APReport({0: 0.5, 1: None}, 0.5, None, 0.5), {0: "Car"})
    lines = text.splitlines()
    assert lines[0].split() == ["class", "AP(%)"]
    assert lines[1].split() == ["Car", "50.00"] and lines[2].split() == ["1", "skipped"]
    assert len({len(line) for line in lines}) == 1


def test_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(default_iou=0)
    with pytest.raises(ValueError):
        Detection(box(), 0, 1.5)
