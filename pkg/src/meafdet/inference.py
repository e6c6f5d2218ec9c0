"""Batch inference over a dataset and end-to-end evaluation of a trained model."""
from __future__ import annotations

from typing import Sequence

from .data import ImagePair, dataset_iter
from .detector import Detection, Detector, strip_sr
from .metrics import EvalReport, evaluate
from .tensor import tensor

__all__ = ["predict", "ground_truth_pixels", "evaluate_model"]


def predict(
    model: Detector,
    pairs: Sequence[ImagePair],
    conf: float = 0.25,
    nms_iou: float = 0.5,
    batch_size: int = 8,
) -> list[list[Detection]]:
    model = strip_sr(model)
    out: list[list[Detection]] = []
    for batch in dataset_iter(pairs, batch_size):
        out.extend(model.detect(tensor(batch.rgb), tensor(batch.ir), conf, nms_iou))
    return out


def ground_truth_pixels(pairs: Sequence[ImagePair]) -> list[list[tuple]]:
    return [[(b.xyxy(p.size), b.class_id) for b in p.boxes] for p in pairs]


def evaluate_model(
    model: Detector,
    pairs: Sequence[ImagePair],
    conf: float = 0.25,
    iou: float = 0.5,
    nms_iou: float = 0.5,
    class_names: Sequence[str] | None = None,
) -> EvalReport:
    num_classes = model.backbone_config.num_classes
    if any(b.class_id >= num_classes for p in pairs for b in p.boxes):
        raise ValueError(f"dataset has class ids >= the model's {num_classes} classes")
    dets = predict(model, pairs, conf, nms_iou)
    return evaluate(dets, ground_truth_pixels(pairs), num_classes, class_names, iou)
