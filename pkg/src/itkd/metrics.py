"""Rotated BEV IoU, greedy detection matching, and AP / APH."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scene import Box3D

DEFAULT_IOU_THRESHOLDS = (0.5, 0.25, 0.25)


def box_corners(box: Box3D) -> np.ndarray:
    """BEV footprint corners, counter-clockwise, shape (4, 2)."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw = box.length / 2.0, box.width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([box.center_x, box.center_y])


def polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clip``."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        a, b = clip[i], clip[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inputs, output = output, []
        prev = inputs[-1]
        s_prev = side(prev)
        for cur in inputs:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    output.append(_intersect(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0:
                output.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def rotated_iou(a: Box3D, b: Box3D, eps: float = 1e-12) -> float:
    """BEV intersection-over-union of two yawed boxes (z ignored)."""
    area_a = a.length * a.width
    area_b = b.length * b.width
    if area_a < eps or area_b < eps:
        return 0.0
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.length, a.width)
    rb = 0.5 * math.hypot(b.length, b.width)
    if math.hypot(a.center_x - b.center_x, a.center_y - b.center_y) > ra + rb:
        return 0.0
    inter = polygon_area(clip_polygon(box_corners(a), box_corners(b)))
    union = area_a + area_b - inter
    if union < eps:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


def heading_error(yaw_det: float, yaw_gt: float) -> float:
    """Absolute wrapped yaw difference in [0, pi]."""
    d = math.remainder(yaw_det - yaw_gt, 2.0 * math.pi)
    return abs(d)


@dataclass
class MatchResult:
    scores: np.ndarray
    matched: np.ndarray
    heading_error: np.ndarray  # nan where unmatched
    gt_count: int
    class_id: int = 0


def match_detections(
    detections: Sequence[tuple[Box3D, float]],
    gts: Sequence[Box3D],
    iou_threshold: float,
    class_id: int = 0,
) -> MatchResult:
    """Greedy score-ordered matching of same-class detections to ground truth."""
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])
    taken = np.zeros(len(gts), dtype=bool)
    scores = np.array([detections[i][1] for i in order], dtype=np.float64)
    matched = np.zeros(len(order), dtype=bool)
    herr = np.full(len(order), np.nan)
    for rank, i in enumerate(order):
        box = detections[i][0]
        best, best_iou = -1, iou_threshold
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = rotated_iou(box, gt)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = j, iou
        if best >= 0:
            taken[best] = True
            matched[rank] = True
            herr[rank] = heading_error(box.yaw, gts[best].yaw)
    return MatchResult(scores, matched, herr, len(gts), class_id)


def average_precision(results: Sequence[MatchResult], heading_weighted: bool = False) -> float | None:
    """All-points interpolated AP over pooled match results.

    Returns ``None`` when there is no ground truth. With ``heading_weighted``
    each true positive counts ``max(0, 1 - heading_error / pi)``.
    """
    gt_total = sum(r.gt_count for r in results)
    if gt_total == 0:
        return None
    if not results:
        return 0.0
    scores = np.concatenate([r.scores for r in results])
    if scores.size == 0:
        return 0.0
    matched = np.concatenate([r.matched for r in results])
    herr = np.concatenate([r.heading_error for r in results])
    order = np.argsort(-scores, kind="stable")
    matched, herr = matched[order], herr[order]
    if heading_weighted:
        w = np.where(matched, np.maximum(0.0, 1.0 - np.nan_to_num(herr) / math.pi), 0.0)
    else:
        w = matched.astype(np.float64)
    tp = np.cumsum(w)
    precision = tp / np.arange(1, len(w) + 1)
    recall = tp / gt_total
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))
