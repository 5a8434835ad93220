"""Rotated 3D IoU, greedy detection matching and interpolated AP / mAP."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BoxParams

AREA_EPS = 1e-12

# Common-class IoU thresholds used on the few-shot KITTI-style benchmarks.
COMMON_IOU_THRESHOLDS = {"Car": 0.7, "Pedestrian": 0.5, "Truck": 0.5}


@dataclass
class Detection:
    box: BoxParams
    class_id: int
    score: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(default_factory=dict)  # class id -> threshold
    default_iou: float = 0.5
    score_threshold: float = 0.0
    common: tuple = ()
    novel: tuple = ()
    recall_points: int = 40

    def __post_init__(self):
        self.iou_thresholds = {int(k): float(v) for k, v in self.iou_thresholds.items()}
        for t in list(self.iou_thresholds.values()) + [self.default_iou]:
            if not 0.0 < t <= 1.0:
                raise ValueError(f"IoU threshold {t} outside (0, 1]")
        self.common = tuple(int(c) for c in self.common)
        self.novel = tuple(int(c) for c in self.novel)

    def iou_for(self, class_id: int) -> float:
        return self.iou_thresholds.get(int(class_id), self.default_iou)


@dataclass
class APReport:
    per_class: dict  # class id -> AP (None when skipped)
    common: float | None
    novel: float | None
    overall: float | None


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    p = np.asarray(poly)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_polygon(subject, clip):
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    output = [tuple(p) for p in subject]
    clip = [tuple(p) for p in clip]
    for i in range(len(clip)):
        if not output:
            break
        a, b = clip[i - 1], clip[i]
        inputs, output = output, []
        prev = inputs[-1]
        d_prev = _cross(a, b, prev)
        for cur in inputs:
            d_cur = _cross(a, b, cur)
            if d_cur >= 0:
                if d_prev < 0:
                    output.append(_crossing(prev, cur, d_prev, d_cur))
                output.append(cur)
            elif d_prev >= 0:
                output.append(_crossing(prev, cur, d_prev, d_cur))
            prev, d_prev = cur, d_cur
    return output


def _crossing(p, q, dp, dq):
    # point on segment pq where the signed distance to the clip line is zero;
    # dp and dq have opposite signs so the denominator is never zero
    t = dp / (dp - dq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: BoxParams, b: BoxParams) -> float:
    """Overlap area of the two BEV rectangles."""
    area = polygon_area(clip_polygon(a.bev_corners(), b.bev_corners()))
    return 0.0 if area < AREA_EPS else min(area, a.l * a.w, b.l * b.w)


def iou_3d(a: BoxParams, b: BoxParams) -> float:
    bev = bev_intersection_area(a, b)
    if bev == 0.0:
        return 0.0
    top = min(a.center[2] + a.h / 2, b.center[2] + b.h / 2)
    bottom = max(a.center[2] - a.h / 2, b.center[2] - b.h / 2)
    inter = bev * max(top - bottom, 0.0)
    union = a.volume + b.volume - inter
    return float(min(inter / union, 1.0)) if union > 0 else 0.0


def match_detections(dets, gts, config: EvalConfig):
    """Greedy per-class matching by descending score.

    ``gts`` holds ``(BoxParams, class_id)`` pairs. Returns ``(kept, is_tp, gt_matched)``:
    the detections above the score threshold (original order), a TP flag per
    kept detection, and a matched flag per GT.
    """
    kept = [d for d in dets if d.score >= config.score_threshold]
    is_tp = np.zeros(len(kept), dtype=bool)
    gt_matched = np.zeros(len(gts), dtype=bool)
    order = sorted(range(len(kept)), key=lambda i: -kept[i].score)
    for i in order:
        det = kept[i]
        thr = config.iou_for(det.class_id)
        best, best_iou = None, thr
        for j, (box, cls) in enumerate(gts):
            if cls != det.class_id or gt_matched[j]:
                continue
            iou = iou_3d(det.box, box)
            if iou >= best_iou and (best is None or iou > best_iou):
                best, best_iou = j, iou
        if best is not None:
            gt_matched[best] = True
            is_tp[i] = True
    return kept, is_tp, gt_matched


def average_precision(scores, is_tp, num_gt: int, recall_points: int = 40):
    """Interpolated AP over recall levels ``k / recall_points``, k = 1..recall_points.

    Precision at a level is the best precision reached at any recall at or
    above it. Returns ``None`` when there are neither GTs nor detections.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if num_gt == 0:
        return None if len(scores) == 0 else 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # running max from the right gives the interpolated envelope
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    levels = np.arange(1, recall_points + 1) / recall_points
    idx = np.searchsorted(recall, levels - 1e-12, side="left")
    sampled = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(sampled.mean())


def evaluate(dets, gts, config: EvalConfig) -> dict:
    """Per-class AP for every class seen in detections or GT."""
    kept, is_tp, _ = match_detections(dets, gts, config)
    classes = sorted({d.class_id for d in kept} | {c for _, c in gts})
    out = {}
    for cls in classes:
        sel = [i for i, d in enumerate(kept) if d.class_id == cls]
        n_gt = sum(1 for _, c in gts if c == cls)
        out[cls] = average_precision([kept[i].score for i in sel], is_tp[sel], n_gt,
                                     config.recall_points)
    return out


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def map_report(per_class: dict, common=(), novel=()) -> APReport:
    """Group means; ``overall`` averages every evaluated class."""
    common, novel = set(common), set(novel)
    evaluated = {c for c, ap in per_class.items() if ap is not None}
    missing = evaluated - common - novel
    if (common or novel) and missing:
        raise ValueError(f"classes {sorted(missing)} are in neither group")
    return APReport(
        dict(per_class),
        _mean(per_class[c] for c in per_class if c in common),
        _mean(per_class[c] for c in per_class if c in novel),
        _mean(per_class.values()),
    )


def format_report(report: APReport, names: dict | None = None) -> str:
    """Aligned text table of per-class AP and the group means (in percent)."""
    names = names or {}
    rows = [(str(names.get(c, c)), ap) for c, ap in sorted(report.per_class.items())]
    rows += [("common", report.common), ("novel", report.novel), ("overall", report.overall)]
    width = max(len(r[0]) for r in rows)
    lines = [f"{'class':<{width}}  {'AP(%)':>8}"]
    for name, ap in rows:
        val = "skipped" if ap is None else f"{100 * ap:8.2f}"
        lines.append(f"{name:<{width}}  {val:>8}")
    return "\n".join(lines)
