"""Target assignment and the training objective.

Detection loss per head scale ``a`` is a weighted sum of objectness BCE,
localization ``1 - IoU`` and classification BCE; the total objective adds the
mean-reduced L1 reconstruction loss of the SR branch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detector import RawPrediction, decode_boxes
from .tensor import Tensor, absolute, bce_with_logits, clamp, maximum, minimum, resize_spatial, tensor

log = logging.getLogger(__name__)

__all__ = [
    "LossWeights",
    "TargetAssignment",
    "LossReport",
    "assign_targets",
    "size_iou",
    "detection_loss",
    "sr_loss",
    "total_loss",
    "compute_losses",
]


@dataclass
class LossWeights:
    alpha_o: tuple[float, float, float] = (1.0, 1.0, 1.0)
    alpha_l: tuple[float, float, float] = (0.05, 0.05, 0.05)
    alpha_c: tuple[float, float, float] = (0.5, 0.5, 0.5)
    lambda_o: float = 1.0
    lambda_l: float = 1.0
    lambda_c: float = 1.0
    c1: float = 1.0
    c2: float = 1.0

    def __post_init__(self):
        self.alpha_o = tuple(float(v) for v in self.alpha_o)
        self.alpha_l = tuple(float(v) for v in self.alpha_l)
        self.alpha_c = tuple(float(v) for v in self.alpha_c)
        for name in ("alpha_o", "alpha_l", "alpha_c"):
            if len(getattr(self, name)) != 3:
                raise ValueError(f"{name} needs one weight per head scale")
        values = [*self.alpha_o, *self.alpha_l, *self.alpha_c, self.lambda_o, self.lambda_l, self.lambda_c, self.c1, self.c2]
        if not all(np.isfinite(v) and v >= 0 for v in values):
            raise ValueError("loss weights must be finite and non-negative")

    def scaled(self, k: float) -> "LossWeights":
        """Every detection weight times ``k`` (c1/c2 untouched)."""
        return LossWeights(
            tuple(k * v for v in self.alpha_o),
            tuple(k * v for v in self.alpha_l),
            tuple(k * v for v in self.alpha_c),
            self.lambda_o,
            self.lambda_l,
            self.lambda_c,
            self.c1,
            self.c2,
        )


@dataclass
class TargetAssignment:
    """Per-scale training targets; arrays are indexed ``[n, b, y, x]``."""

    objectness: list[np.ndarray]
    boxes: list[np.ndarray]  # [..., 4] pixel (cx, cy, w, h)
    classes: list[np.ndarray]  # -1 where not positive
    positive: list[np.ndarray]
    rejected: int = 0
    assigned_scale: list[list[int]] = field(default_factory=list)


@dataclass
class LossReport:
    total: Tensor
    detection: Tensor
    sr: Tensor
    obj: list[float]
    loc: list[float]
    cls: list[float]
    obj_terms: list[float]
    loc_terms: list[float]
    cls_terms: list[float]

    def row(self) -> list[float]:
        out = [self.total.item(), self.detection.item(), self.sr.item()]
        for a in range(3):
            out += [self.obj[a], self.loc[a], self.cls[a]]
        return out


def size_iou(w: float, h: float, anchor: float) -> float:
    """IoU of a ``w x h`` box and a square anchor sharing the same center."""
    inter = min(w, anchor) * min(h, anchor)
    return inter / (w * h + anchor * anchor - inter)


def assign_targets(
    ground_truth: Sequence[Sequence],
    anchors: Sequence[Sequence[float]],
    strides: Sequence[int],
    image_size: tuple[int, int],
) -> TargetAssignment:
    """Place every ground-truth box on the (scale, anchor) with the best size-only IoU.

    ``ground_truth`` holds, per image, objects with ``class_id, cx, cy, w, h``
    normalized to [0, 1]. The positive cell is the one containing the box
    center; ties between scales go to the finer one. Zero-area boxes are
    skipped and counted in ``rejected``.
    """
    img_h, img_w = image_size
    n = len(ground_truth)
    nb = len(anchors[0])
    obj, boxes, classes, pos = [], [], [], []
    for s in strides:
        gh, gw = img_h // s, img_w // s
        obj.append(np.zeros((n, nb, gh, gw)))
        boxes.append(np.zeros((n, nb, gh, gw, 4)))
        classes.append(np.full((n, nb, gh, gw), -1, dtype=np.int64))
        pos.append(np.zeros((n, nb, gh, gw), dtype=bool))
    rejected = 0
    chosen: list[list[int]] = []
    for i, gts in enumerate(ground_truth):
        picks = []
        for gt in gts:
            w, h = gt.w * img_w, gt.h * img_h
            if w <= 0 or h <= 0:
                rejected += 1
                picks.append(-1)
                continue
            best, best_iou = (0, 0), -1.0
            for a, scale_anchors in enumerate(anchors):
                for b, anc in enumerate(scale_anchors):
                    iou = size_iou(w, h, anc)
                    if iou > best_iou:
                        best, best_iou = (a, b), iou
            a, b = best
            s = strides[a]
            cx, cy = gt.cx * img_w, gt.cy * img_h
            gx = min(int(cx // s), img_w // s - 1)
            gy = min(int(cy // s), img_h // s - 1)
            obj[a][i, b, gy, gx] = 1.0
            boxes[a][i, b, gy, gx] = (cx, cy, w, h)
            classes[a][i, b, gy, gx] = gt.class_id
            pos[a][i, b, gy, gx] = True
            picks.append(a)
        chosen.append(picks)
    if rejected:
        log.warning("assign_targets: skipped %d degenerate boxes", rejected)
    return TargetAssignment(obj, boxes, classes, pos, rejected, chosen)


def _iou_loss(pred, target: np.ndarray) -> Tensor:
    """Mean ``1 - IoU`` between predicted (cx, cy, w, h) tensors and target rows."""
    cx, cy, w, h = pred
    dt = cx.dtype
    tcx, tcy, tw, th = (tensor(target[:, k], dtype=dt) for k in range(4))
    ix = clamp(minimum(cx + w * 0.5, tcx + tw * 0.5) - maximum(cx - w * 0.5, tcx - tw * 0.5), lo=0.0)
    iy = clamp(minimum(cy + h * 0.5, tcy + th * 0.5) - maximum(cy - h * 0.5, tcy - th * 0.5), lo=0.0)
    inter = ix * iy
    union = w * h + (tw * th) - inter + 1e-9
    return (1.0 - inter / union).mean()


def detection_loss(
    raw: RawPrediction,
    targets: TargetAssignment,
    weights: LossWeights,
    anchors: Sequence[Sequence[float]],
    num_classes: int,
) -> tuple[Tensor, dict[str, list]]:
    """Weighted three-scale detection loss. Returns the scalar and per-scale parts."""
    k = num_classes
    parts = {key: [] for key in ("obj", "loc", "cls", "obj_terms", "loc_terms", "cls_terms")}
    total = None
    for a, (m, stride) in enumerate(zip(raw.maps, raw.strides)):
        n, ch, gh, gw = m.shape
        nb = ch // (5 + k)
        p = m.reshape(n, nb, 5 + k, gh, gw)
        l_obj = bce_with_logits(p[:, :, 4], targets.objectness[a].astype(m.dtype)).mean()
        idx = np.nonzero(targets.positive[a])
        if len(idx[0]):
            nn, bb, yy, xx = idx
            pick = lambda c: p[nn, bb, c, yy, xx]  # noqa: E731
            anc = np.asarray(anchors[a], dtype=np.float64)[bb]
            decoded = decode_boxes(pick(0), pick(1), pick(2), pick(3), xx, yy, stride, anc)
            l_loc = _iou_loss(decoded, targets.boxes[a][idx])
            cls_logits = p[nn, bb, 5:, yy, xx]
            onehot = np.eye(k, dtype=m.dtype)[targets.classes[a][idx]]
            l_cls = bce_with_logits(cls_logits, onehot).mean()
        else:
            l_loc = tensor(0.0, dtype=m.dtype)
            l_cls = tensor(0.0, dtype=m.dtype)
        wo = weights.lambda_o * weights.alpha_o[a]
        wl = weights.lambda_l * weights.alpha_l[a]
        wc = weights.lambda_c * weights.alpha_c[a]
        term = l_obj * wo + l_loc * wl + l_cls * wc
        total = term if total is None else total + term
        parts["obj"].append(l_obj.item())
        parts["loc"].append(l_loc.item())
        parts["cls"].append(l_cls.item())
        parts["obj_terms"].append(wo * l_obj.item())
        parts["loc_terms"].append(wl * l_loc.item())
        parts["cls_terms"].append(wc * l_cls.item())
    return total, parts


def sr_loss(s: Tensor, x: Tensor, stride_ratio: int) -> Tensor:
    """Mean absolute error between ``s`` and ``x`` block-averaged by ``stride_ratio``."""
    if int(stride_ratio) != stride_ratio or stride_ratio < 1:
        raise ValueError(f"stride ratio must be a positive integer, got {stride_ratio}")
    h, w = x.shape[2:]
    hs, ws = s.shape[2:]
    if h != hs * stride_ratio or w != ws * stride_ratio:
        raise ValueError(f"target {h}x{w} is not {stride_ratio}x the SR output {hs}x{ws}")
    return absolute(s - resize_spatial(x, int(stride_ratio), "down_avg")).mean()


def total_loss(detection: Tensor, sr: Tensor, weights: LossWeights) -> Tensor:
    return detection * weights.c1 + sr * weights.c2


def compute_losses(
    raw: RawPrediction,
    targets: TargetAssignment,
    weights: LossWeights,
    anchors,
    num_classes: int,
    sr_out: Tensor | None = None,
    sr_target: Tensor | None = None,
    sr_ratio: int = 1,
) -> LossReport:
    det, parts = detection_loss(raw, targets, weights, anchors, num_classes)
    if sr_out is not None:
        sr = sr_loss(sr_out, sr_target, sr_ratio)
    else:
        sr = tensor(0.0, dtype=det.dtype)
    return LossReport(total_loss(det, sr, weights), det, sr, **parts)
