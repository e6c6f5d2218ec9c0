import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meafdet.detector import Detection
from meafdet.metrics import (
    ClassMatches,
    MatchCounts,
    average_precision,
    evaluate,
    export_curves,
    f1_score,
    format_report,
    map50,
    match_detections,
    pr_curve,
    precision_recall,
)


def _sweep_ap(scores, tp, num_gt):
    """Threshold-sweep oracle: recompute P/R from scratch at every distinct score,
    interpolate precision as the best at any recall >= r, integrate over recall."""
    pts = []
    for th in sorted(set(scores.tolist()), reverse=True):
        keep = scores >= th
        t = int(tp[keep].sum())
        pts.append((t / num_gt, t / int(keep.sum())))
    ap, prev_r = 0.0, 0.0
    for r, _ in pts:
        p_interp = max(p for rr, p in pts if rr >= r)
        ap += (r - prev_r) * p_interp
        prev_r = r
    return ap


def _random_instance(rng, n_det=20, n_gt=10, quantize=False):
    scores = rng.random(n_det)
    if quantize:
        scores = np.round(scores * 4) / 4
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    tp = np.zeros(n_det, dtype=bool)
    tp[rng.choice(n_det, int(rng.integers(0, min(n_gt, n_det) + 1)), replace=False)] = True
    return ClassMatches(scores, tp, n_gt)


def test_table_style_counts():
    pr, re = precision_recall(MatchCounts(tp=8, fp=2, fn=2))
    assert (pr, re) == (0.8, 0.8)
    assert f1_score(pr, re) == pytest.approx(0.8)


def test_no_detections_precision_one():
    assert precision_recall(MatchCounts(tp=0, fp=0, fn=3)) == (1.0, 0.0)
    assert f1_score(0.0, 0.0) == 0.0


@pytest.mark.parametrize("seed", range(50))
def test_ap_matches_threshold_sweep(seed):
    rng = np.random.default_rng(seed)
    m = _random_instance(rng, quantize=seed % 3 == 0)
    assert abs(average_precision(pr_curve(m)) - _sweep_ap(m.scores, m.tp, m.num_gt)) < 1e-9


def test_ap_examples():
    perfect = ClassMatches(np.array([0.9, 0.8]), np.array([True, True]), 2)
    assert average_precision(pr_curve(perfect)) == 1.0
    half = ClassMatches(np.array([0.9, 0.8]), np.array([False, True]), 2)
    assert average_precision(pr_curve(half)) == pytest.approx(0.25)
    assert average_precision(pr_curve(ClassMatches(np.zeros(0), np.zeros(0, bool), 3))) == 0.0
    assert average_precision(pr_curve(ClassMatches(np.array([0.5]), np.array([False]), 0))) is None


def test_pr_curve_one_point_per_distinct_score():
    m = ClassMatches(np.array([0.9, 0.5, 0.5, 0.2]), np.array([True, False, True, True]), 4)
    c = pr_curve(m)
    np.testing.assert_array_equal(c.thresholds, [0.9, 0.5, 0.2])
    np.testing.assert_allclose(c.recall, [0.25, 0.5, 0.75])
    np.testing.assert_allclose(c.precision, [1.0, 2 / 3, 0.75])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 30), g=st.integers(1, 12))
def test_pr_curve_invariants(seed, n, g):
    m = _random_instance(np.random.default_rng(seed), n, g)
    c = pr_curve(m)
    assert np.all(np.diff(c.recall) >= 0) and np.all(np.diff(c.thresholds) < 0)
    assert np.all((c.precision >= 0) & (c.precision <= 1))
    assert 0.0 <= average_precision(c) <= 1.0


def test_map_excludes_classes_without_gt():
    assert map50([0.5, None, 1.0]) == 0.75
    with pytest.raises(ValueError):
        map50([None, None])


def _box(x, y, s=10.0):
    return np.array([x, y, x + s, y + s])


def test_matching_examples():
    gts = [[(_box(0, 0), 0), (_box(50, 50), 0)]]
    dets = [[
        Detection(*_box(1, 1), 0.9, 0),
        Detection(*_box(0, 0), 0.8, 0),  # duplicate of the first GT
        Detection(*_box(50, 50), 0.7, 1),  # wrong class
        Detection(*_box(51, 50), 0.6, 0),
    ]]
    m0, m1 = match_detections(dets, gts, 2)
    np.testing.assert_array_equal(m0.tp, [True, False, True])
    assert m0.num_gt == 2 and m1.num_gt == 0
    assert m0.counts() == MatchCounts(tp=2, fp=1, fn=0)
    assert m0.counts(0.85) == MatchCounts(tp=1, fp=0, fn=1)


def test_matching_takes_highest_iou_unmatched_gt():
    gts = [[(_box(0, 0), 0), (_box(4, 0), 0)]]
    dets = [[Detection(*_box(3, 0), 0.9, 0), Detection(*_box(0, 0), 0.8, 0)]]
    (m,) = match_detections(dets, gts, 1)
    assert m.tp.tolist() == [True, True]


def _iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_matching_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    gts, dets = [], []
    for _ in range(3):
        g = [(_box(*rng.uniform(0, 30, 2)), int(rng.integers(0, 2))) for _ in range(rng.integers(0, 5))]
        d = [Detection(*_box(*rng.uniform(0, 30, 2)), float(rng.random()), int(rng.integers(0, 2)))
             for _ in range(rng.integers(0, 8))]
        gts.append(g)
        dets.append(d)
    got = match_detections(dets, gts, 2)
    for k in range(2):
        flat = sorted(
            [(d.score, i, d) for i, img in enumerate(dets) for d in img if d.class_id == k], key=lambda t: -t[0]
        )
        used = set()
        flags = []
        for _, i, d in flat:
            cands = [(_iou(d.box, b), j) for j, (b, c) in enumerate(gts[i]) if c == k and (i, j) not in used]
            best = max(cands, default=(0.0, None))
            if best[1] is not None and best[0] >= 0.5:
                used.add((i, best[1]))
                flags.append(True)
            else:
                flags.append(False)
        assert got[k].tp.tolist() == flags
        assert got[k].num_gt == sum(c == k for img in gts for _, c in img)


def test_evaluate_and_exports(tmp_path):
    gts = [[(_box(0, 0), 0)], [(_box(20, 20), 1)]]
    dets = [[Detection(*_box(0, 0), 0.9, 0)], [Detection(*_box(40, 40), 0.6, 1)]]
    rep = evaluate(dets, gts, 3, ["car", "truck", "ship"])
    assert rep.ap == [1.0, 0.0, None]
    assert rep.map50 == 0.5
    assert rep.precision[:2] == [1.0, 0.0] and rep.recall[:2] == [1.0, 0.0]
    assert rep.f1.shape == (101, 3)
    assert rep.f1[rep.f1_thresholds.tolist().index(0.5), 0] == 1.0
    assert rep.f1[-1, 0] == 0.0
    paths = export_curves(rep, tmp_path)
    assert sorted(p.name for p in paths) == ["f1.csv", "pr_car.csv", "pr_ship.csv", "pr_truck.csv"]
    rows = list(csv.reader((tmp_path / "pr_car.csv").open()))
    assert rows == [["threshold", "recall", "precision"], ["0.900000", "1.000000", "1.000000"]]
    f1_rows = list(csv.reader((tmp_path / "f1.csv").open()))
    assert f1_rows[0] == ["threshold", "f1_car", "f1_truck", "f1_ship", "f1_mean"] and len(f1_rows) == 102
    text = format_report(rep)
    assert "mAP50" in text and "50.00" in text and "-" in text


def test_pr_export_ascending(tmp_path):
    gts = [[(_box(0, 0), 0), (_box(30, 30), 0)]]
    dets = [[Detection(*_box(0, 0), 0.9, 0), Detection(*_box(30, 30), 0.4, 0)]]
    export_curves(evaluate(dets, gts, 1, ["t"]), tmp_path)
    th = [float(r[0]) for r in list(csv.reader((tmp_path / "pr_t.csv").open()))[1:]]
    assert th == sorted(th)
