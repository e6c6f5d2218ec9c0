"""Detection evaluation: IoU matching, precision/recall, all-points AP, mAP50, F1 curves."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .detector import Detection, box_iou

__all__ = [
    "MatchCounts",
    "PrCurve",
    "ClassMatches",
    "EvalReport",
    "match_detections",
    "precision_recall",
    "f1_score",
    "pr_curve",
    "average_precision",
    "map50",
    "evaluate",
    "export_curves",
    "format_report",
]


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0  # unused for detection; kept for completeness


@dataclass
class ClassMatches:
    """Score-sorted detections of one class with their TP flags."""

    scores: np.ndarray
    tp: np.ndarray  # bool
    num_gt: int

    def counts(self, threshold: float = 0.0) -> MatchCounts:
        keep = self.scores >= threshold
        tp = int(self.tp[keep].sum())
        return MatchCounts(tp=tp, fp=int(keep.sum()) - tp, fn=self.num_gt - tp)


@dataclass
class PrCurve:
    thresholds: np.ndarray  # descending
    recall: np.ndarray  # non-decreasing
    precision: np.ndarray
    num_gt: int = 0


@dataclass
class EvalReport:
    class_names: list[str]
    ap: list[float | None]
    map50: float
    precision: list[float]
    recall: list[float]
    curves: list[PrCurve]
    f1_thresholds: np.ndarray
    f1: np.ndarray  # [T, K]
    counts: list[MatchCounts] = field(default_factory=list)


def _gt_boxes(gt) -> tuple[np.ndarray, int]:
    """Accepts (xyxy array, class) tuples or objects with ``box``/``class_id``."""
    if isinstance(gt, tuple):
        return np.asarray(gt[0], dtype=np.float64), int(gt[1])
    return np.asarray(gt.box, dtype=np.float64), int(gt.class_id)


def match_detections(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence],
    num_classes: int,
    iou_threshold: float = 0.5,
) -> list[ClassMatches]:
    """Greedy score-descending matching per class.

    Each detection takes the highest-IoU still-unmatched same-class ground truth
    in its image with IoU >= ``iou_threshold``; otherwise it is a false positive.
    ``gts`` holds, per image, ``(xyxy, class_id)`` pairs in pixels.
    """
    out = []
    for k in range(num_classes):
        gt_boxes = []
        for img in gts:
            boxes = [b for b, c in map(_gt_boxes, img) if c == k]
            gt_boxes.append(np.array(boxes).reshape(-1, 4))
        flat = [(d.score, i, j) for i, img in enumerate(dets) for j, d in enumerate(img) if d.class_id == k]
        # stable: equal scores keep image/input order
        flat.sort(key=lambda t: -t[0])
        taken = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
        tp = np.zeros(len(flat), dtype=bool)
        for r, (_, i, j) in enumerate(flat):
            if not len(gt_boxes[i]):
                continue
            ious = box_iou(dets[i][j].box, gt_boxes[i])[0]
            ious[taken[i]] = -1.0
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                taken[i][best] = True
                tp[r] = True
        scores = np.array([s for s, _, _ in flat], dtype=np.float64)
        out.append(ClassMatches(scores, tp, sum(len(b) for b in gt_boxes)))
    return out


def precision_recall(counts: MatchCounts) -> tuple[float, float]:
    """Pr = TP/(TP+FP), Re = TP/(TP+FN); no detections counts as Pr = 1."""
    pr = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 1.0
    if counts.tp + counts.fn:
        re = counts.tp / (counts.tp + counts.fn)
    else:
        re = 1.0
    return pr, re


def f1_score(pr: float, re: float) -> float:
    return 2 * pr * re / (pr + re) if pr + re > 0 else 0.0


def pr_curve(matches: ClassMatches) -> PrCurve:
    """One point per distinct score, thresholds descending."""
    scores, tp = matches.scores, matches.tp
    if not len(scores):
        empty = np.zeros(0)
        return PrCurve(empty, empty, empty, matches.num_gt)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    # last index of every run of equal scores
    last = np.r_[np.nonzero(np.diff(scores))[0], len(scores) - 1]
    ctp, cfp = ctp[last], cfp[last]
    recall = ctp / matches.num_gt if matches.num_gt else np.ones(len(last))
    precision = ctp / (ctp + cfp)
    return PrCurve(scores[last], recall, precision, matches.num_gt)


def average_precision(curve: PrCurve) -> float | None:
    """All-points area under the right-interpolated PR curve; ``None`` if the class has no GT."""
    if curve.num_gt == 0:
        return None
    if not len(curve.recall):
        return 0.0
    r = np.concatenate([[0.0], curve.recall])
    p = np.concatenate([curve.precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1][:-1]
    return float(np.sum((r[1:] - r[:-1]) * p))


def map50(per_class_ap: Sequence[float | None]) -> float:
    defined = [a for a in per_class_ap if a is not None]
    if not defined:
        raise ValueError("no class has ground truth; mAP is undefined")
    return float(np.mean(defined))


def evaluate(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence],
    num_classes: int,
    class_names: Sequence[str] | None = None,
    iou_threshold: float = 0.5,
    f1_thresholds: np.ndarray | None = None,
) -> EvalReport:
    names = list(class_names) if class_names is not None else [str(k) for k in range(num_classes)]
    matches = match_detections(dets, gts, num_classes, iou_threshold)
    curves = [pr_curve(m) for m in matches]
    aps = [average_precision(c) for c in curves]
    thresholds = np.round(np.linspace(0.0, 1.0, 101), 2) if f1_thresholds is None else np.asarray(f1_thresholds)
    f1 = np.zeros((len(thresholds), num_classes))
    for k, m in enumerate(matches):
        for t, th in enumerate(thresholds):
            f1[t, k] = f1_score(*precision_recall(m.counts(th)))
    counts = [m.counts() for m in matches]
    prs = [precision_recall(c) for c in counts]
    return EvalReport(
        names,
        aps,
        map50(aps),
        [p for p, _ in prs],
        [r for _, r in prs],
        curves,
        thresholds,
        f1,
        counts,
    )


def export_curves(report: EvalReport, out_dir: str | os.PathLike) -> list[Path]:
    """Write ``pr_<class>.csv`` and ``f1.csv``, rows ordered by ascending threshold."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, curve in zip(report.class_names, report.curves):
        path = out / f"pr_{name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "recall", "precision"])
            for i in range(len(curve.thresholds) - 1, -1, -1):
                w.writerow([f"{curve.thresholds[i]:.6f}", f"{curve.recall[i]:.6f}", f"{curve.precision[i]:.6f}"])
        written.append(path)
    path = out / "f1.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", *[f"f1_{n}" for n in report.class_names], "f1_mean"])
        for t, th in enumerate(report.f1_thresholds):
            row = report.f1[t]
            w.writerow([f"{th:.6f}", *[f"{v:.6f}" for v in row], f"{row.mean():.6f}"])
    written.append(path)
    return written


def format_report(report: EvalReport) -> str:
    """Aligned table: one column per class plus mAP50 (values in percent)."""
    heads = [*report.class_names, "mAP50"]
    vals = ["-" if a is None else f"{100 * a:.2f}" for a in report.ap] + [f"{100 * report.map50:.2f}"]
    width = max(8, *(len(h) for h in heads))
    lines = [
        "".join(h.rjust(width) for h in ["", *heads]),
        "".join(v.rjust(width) for v in ["AP50", *vals]),
        "".join(v.rjust(width) for v in ["P", *[f"{100 * p:.2f}" for p in report.precision], ""]),
        "".join(v.rjust(width) for v in ["R", *[f"{100 * r:.2f}" for r in report.recall], ""]),
    ]
    return "\n".join(lines)
