import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from itkd.metrics import (
    MatchResult,
    average_precision,
    box_corners,
    clip_polygon,
    heading_error,
    match_detections,
    polygon_area,
    rotated_iou,
)
from itkd.scene import Box3D


def bev(x, y, l, w, yaw, k=0):
    return Box3D(x, y, 0.5, l, w, 1.0, yaw, k)


def test_rotated_iou_matches_monte_carlo():
    rng = np.random.default_rng(0)
    mc = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        a = bev(*rng.uniform(-1, 1, 2), *rng.uniform(0.5, 4, 2), rng.uniform(-math.pi, math.pi))
        b = bev(*(np.array([a.center_x, a.center_y]) + rng.uniform(-1.5, 1.5, 2)),
                *rng.uniform(0.5, 4, 2), rng.uniform(-math.pi, math.pi))
        est = oracles.rect_iou_monte_carlo(a, b, 200_000, mc)
        worst = max(worst, abs(rotated_iou(a, b) - est))
    assert worst < 1e-2


def test_forty_five_degree_square():
    a = bev(0, 0, 1, 1, 0.0)
    b = bev(0, 0, 1, 1, math.pi / 4)
    assert rotated_iou(a, b) == pytest.approx(1 / math.sqrt(2), abs=1e-6)


def test_iou_basic_cases():
    a = bev(0, 0, 2, 1, 0.3)
    assert rotated_iou(a, a) == pytest.approx(1.0, abs=1e-12)
    assert rotated_iou(a, bev(10, 0, 2, 1, 0.3)) == 0.0
    # half overlap of axis-aligned unit squares
    assert rotated_iou(bev(0, 0, 1, 1, 0), bev(0.5, 0, 1, 1, 0)) == pytest.approx(1 / 3)
    # yaw by pi describes the same footprint
    assert rotated_iou(a, bev(0, 0, 2, 1, 0.3 - math.pi)) == pytest.approx(1.0, abs=1e-12)
    # touching edges share no area
    assert rotated_iou(bev(0, 0, 1, 1, 0), bev(1, 0, 1, 1, 0)) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_iou_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a = bev(*rng.uniform(-2, 2, 2), *rng.uniform(0.2, 5, 2), rng.uniform(-4, 4))
    b = bev(*rng.uniform(-2, 2, 2), *rng.uniform(0.2, 5, 2), rng.uniform(-4, 4))
    iou = rotated_iou(a, b)
    assert 0.0 <= iou <= 1.0 + 1e-12
    assert iou == pytest.approx(rotated_iou(b, a), abs=1e-12)


def test_polygon_helpers():
    corners = box_corners(bev(0, 0, 2, 1, 0))
    assert polygon_area(corners) == pytest.approx(2.0)
    inner = box_corners(bev(0, 0, 1, 0.5, 0))
    assert polygon_area(clip_polygon(inner, corners)) == pytest.approx(0.5)


def test_heading_error_wraps():
    assert heading_error(math.pi - 0.1, -math.pi + 0.1) == pytest.approx(0.2)
    assert heading_error(0.0, math.pi) == pytest.approx(math.pi)
    assert heading_error(1.0, 1.0) == 0.0


# ---------------------------------------------------------------- matching and AP

def test_greedy_matching_prefers_higher_scores():
    gt = [bev(0, 0, 2, 1, 0)]
    dets = [(bev(0.1, 0, 2, 1, 0), 0.5), (bev(0, 0, 2, 1, 0.2), 0.9)]
    res = match_detections(dets, gt, 0.5)
    np.testing.assert_array_equal(res.scores, [0.9, 0.5])
    np.testing.assert_array_equal(res.matched, [True, False])
    assert res.heading_error[0] == pytest.approx(0.2)
    assert math.isnan(res.heading_error[1])


def ap_by_hand(results, heading_weighted=False):
    """All-points interpolated AP from a plain loop over the ranked list."""
    items = []
    for r in results:
        for s, m, e in zip(r.scores, r.matched, r.heading_error):
            w = (max(0.0, 1 - e / math.pi) if heading_weighted else 1.0) if m else 0.0
            items.append((s, w))
    gt = sum(r.gt_count for r in results)
    if gt == 0:
        return None
    items.sort(key=lambda t: -t[0])
    precisions, recalls = [], []
    tp = 0.0
    for i, (_, w) in enumerate(items, start=1):
        tp += w
        precisions.append(tp / i)
        recalls.append(tp / gt)
    ap, prev = 0.0, 0.0
    for i in range(len(items)):
        best = max(precisions[i:])
        ap += (recalls[i] - prev) * best
        prev = recalls[i]
    return ap


def random_results(rng, n_sets):
    out = []
    for _ in range(n_sets):
        n = int(rng.integers(0, 8))
        matched = rng.random(n) < 0.6
        gt = int(matched.sum() + rng.integers(0, 3))
        err = np.where(matched, rng.uniform(0, math.pi, n), np.nan)
        out.append(MatchResult(rng.random(n), matched, err, gt))
    return out


def test_ap_matches_hand_loop():
    rng = np.random.default_rng(3)
    for _ in range(200):
        res = random_results(rng, 3)
        for hw in (False, True):
            want = ap_by_hand(res, hw)
            got = average_precision(res, hw)
            if want is None:
                assert got is None
            else:
                assert got == pytest.approx(want, abs=1e-12)


def test_ap_known_values():
    # ranked hits: TP, FP, TP with 2 ground truths -> 0.5 * 1 + 0.5 * 2/3
    res = MatchResult(np.array([0.9, 0.8, 0.7]), np.array([True, False, True]),
                      np.array([0.0, np.nan, 0.0]), 2)
    assert average_precision([res]) == pytest.approx(0.5 + 1 / 3)
    assert average_precision([MatchResult(np.zeros(0), np.zeros(0, bool), np.zeros(0), 0)]) is None
    assert average_precision([MatchResult(np.zeros(0), np.zeros(0, bool), np.zeros(0), 3)]) == 0.0


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_aph_never_exceeds_ap(seed):
    res = random_results(np.random.default_rng(seed), 2)
    ap, aph = average_precision(res), average_precision(res, heading_weighted=True)
    if ap is None:
        assert aph is None
    else:
        assert 0.0 <= aph <= ap + 1e-12 <= 1.0 + 1e-12


def test_perfect_detections_score_one():
    rng = np.random.default_rng(4)
    gts = [bev(4.0 * i, 0, 4.5, 2.0, rng.uniform(-3, 3)) for i in range(5)]
    res = match_detections([(g, 0.9) for g in gts], gts, 0.5)
    assert average_precision([res]) == 1.0
    assert average_precision([res], heading_weighted=True) == 1.0
    flipped = [(Box3D(g.center_x, g.center_y, g.center_z, g.length, g.width, g.height, g.yaw + math.pi, 0), 0.9)
               for g in gts]
    res = match_detections(flipped, gts, 0.5)
    assert average_precision([res]) == 1.0
    assert average_precision([res], heading_weighted=True) == pytest.approx(0.0, abs=1e-12)
