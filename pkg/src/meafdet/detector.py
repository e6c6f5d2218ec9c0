"""Surrogate conv backbone, three-scale head, decoding, NMS and the SR decoder.

The backbone is a plain pyramid of stride-2 3x3 convolutions. Head taps sit at
strides 8/16/32. The structural-representation (SR) decoder hangs off an
intermediate stage during training only; :func:`strip_sr` removes it.
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fusion import FusionParams, meaf_forward
from .tensor import (
    ActivationKind,
    Tensor,
    activation,
    clamp,
    conv2d,
    exp,
    kaiming_uniform,
    named_parameters,
    no_grad,
    resize_spatial,
    sigmoid,
    zeros,
)

__all__ = [
    "BackboneConfig",
    "SrBranchConfig",
    "ConvParams",
    "RawPrediction",
    "Detection",
    "Detector",
    "backbone_forward",
    "head_forward",
    "decode_predictions",
    "decode_boxes",
    "box_iou",
    "nms",
    "sr_decoder_forward",
    "strip_sr",
    "MODALITIES",
]

MODALITIES = ("fused", "rgb", "ir")
EXP_CLAMP = 4.0


@dataclass
class BackboneConfig:
    widths: tuple[int, ...] = (32, 64, 96, 128, 160)
    strides: tuple[int, ...] = (2, 2, 2, 2, 2)
    taps: tuple[int, int, int] = (2, 3, 4)
    activation: str = "silu"
    head_channels: int = 0
    num_classes: int = 1
    anchors: tuple[tuple[float, ...], ...] = ((12.0,), (32.0,), (80.0,))
    obj_prior: float = 0.0  # initial objectness probability; 0 leaves the bias at zero

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        self.taps = tuple(int(t) for t in self.taps)
        self.anchors = tuple(
            tuple(float(v) for v in a) if isinstance(a, (tuple, list)) else (float(a),) for a in self.anchors
        )
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ValueError("widths and strides must be non-empty and equally long")
        if any(w <= 0 for w in self.widths):
            raise ValueError("stage widths must be positive")
        if len(self.taps) != 3 or len(self.anchors) != 3:
            raise ValueError("exactly three head taps and three anchors are required")
        if [self.total_stride(t) for t in self.taps] != [8, 16, 32]:
            raise ValueError(
                f"head taps {self.taps} give strides {[self.total_stride(t) for t in self.taps]}, need 8/16/32"
            )
        if len({len(a) for a in self.anchors}) != 1 or not self.anchors[0]:
            raise ValueError("every scale needs the same, non-zero number of anchors")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 0.0 <= self.obj_prior < 1.0:
            raise ValueError("obj_prior must lie in [0, 1)")
        ActivationKind(self.activation)

    @property
    def boxes_per_cell(self) -> int:
        return len(self.anchors[0])

    @property
    def head_strides(self) -> tuple[int, int, int]:
        return tuple(self.total_stride(t) for t in self.taps)

    @property
    def outputs_per_box(self) -> int:
        return 5 + self.num_classes

    def total_stride(self, stage: int) -> int:
        return int(np.prod(self.strides[: stage + 1]))


@dataclass
class SrBranchConfig:
    tap_stage: int = 1
    stages: int = 1
    widths: tuple[int, ...] = (32,)
    out_channels: int = 4
    target_stride: int = 2

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != self.stages:
            raise ValueError(f"need one decoder width per stage ({self.stages}), got {self.widths}")

    def validate(self, backbone: BackboneConfig) -> None:
        if not 0 <= self.tap_stage < len(backbone.widths):
            raise ValueError(f"SR tap stage {self.tap_stage} outside the backbone")
        tap_stride = backbone.total_stride(self.tap_stage)
        if tap_stride != self.target_stride * 2**self.stages:
            raise ValueError(
                f"SR tap stride {tap_stride} / 2^{self.stages} != target stride {self.target_stride}"
            )


@dataclass
class ConvParams:
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, cout: int, cin: int, k: int, rng: np.random.Generator) -> "ConvParams":
        return cls(kaiming_uniform((cout, cin, k, k), rng), zeros((cout,), requires_grad=True))


@dataclass
class RawPrediction:
    """Per-scale head logits, each ``[N, B*(5+K), H/stride, W/stride]``."""

    maps: list[Tensor]
    strides: tuple[int, ...]

    def __iter__(self):
        return iter(self.maps)

    def __getitem__(self, i) -> Tensor:
        return self.maps[i]


@dataclass(frozen=True)
class Detection:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float
    class_id: int

    @property
    def box(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2])

    @property
    def area(self) -> float:
        return max(self.x2 - self.x1, 0.0) * max(self.y2 - self.y1, 0.0)


def backbone_forward(
    fused: Tensor, config: BackboneConfig, stages: Sequence[ConvParams]
) -> tuple[list[Tensor], list[Tensor]]:
    """Returns the three head features and the full list of stage outputs (for SR taps)."""
    h, w = fused.shape[2:]
    if h % 32 or w % 32:
        raise ValueError(f"input size {h}x{w} must be divisible by 32")
    outs = []
    x = fused
    for p, s in zip(stages, config.strides):
        x = activation(conv2d(x, p.weight, p.bias, stride=s, padding=1), config.activation)
        outs.append(x)
    return [outs[t] for t in config.taps], outs


def head_forward(
    features: Sequence[Tensor],
    preds: Sequence[ConvParams],
    necks: Sequence[ConvParams] | None = None,
    act: str = "silu",
    strides: tuple[int, ...] = (8, 16, 32),
) -> RawPrediction:
    if len(features) != 3:
        raise ValueError(f"head needs three feature maps, got {len(features)}")
    maps = []
    for i, (f, p) in enumerate(zip(features, preds)):
        if necks:
            f = activation(conv2d(f, necks[i].weight, necks[i].bias, padding=1), act)
        maps.append(conv2d(f, p.weight, p.bias))
    return RawPrediction(maps, tuple(strides))


def sr_decoder_forward(tap: Tensor, config: SrBranchConfig, blocks: Sequence[ConvParams], final: ConvParams) -> Tensor:
    """(up x2 -> 3x3 conv -> ReLU) per stage, then a 3x3 projection to ``out_channels``."""
    if len(blocks) != config.stages:
        raise ValueError(f"decoder has {len(blocks)} blocks, config says {config.stages}")
    x = tap
    for p in blocks:
        x = resize_spatial(x, 2, "up_nearest")
        x = activation(conv2d(x, p.weight, p.bias, padding=1), ActivationKind.RELU)
    return conv2d(x, final.weight, final.bias, padding=1)


@dataclass
class SrDecoder:
    blocks: list[ConvParams]
    final: ConvParams


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    gy, gx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    return gx, gy


def decode_boxes(tx, ty, tw, th, cell_x, cell_y, stride: int, anchor):
    """Differentiable box decode: works on Tensors (training) and arrays alike.

    Returns ``(cx, cy, w, h)`` in pixels.
    """
    if isinstance(tx, Tensor):
        cx = (sigmoid(tx) + np.asarray(cell_x, dtype=tx.dtype)) * float(stride)
        cy = (sigmoid(ty) + np.asarray(cell_y, dtype=ty.dtype)) * float(stride)
        anchor = np.asarray(anchor, dtype=tw.dtype)
        bw = exp(clamp(tw, -EXP_CLAMP, EXP_CLAMP)) * anchor
        bh = exp(clamp(th, -EXP_CLAMP, EXP_CLAMP)) * anchor
        return cx, cy, bw, bh
    cx = (cell_x + _sigmoid(tx)) * stride
    cy = (cell_y + _sigmoid(ty)) * stride
    bw = anchor * np.exp(np.clip(tw, -EXP_CLAMP, EXP_CLAMP))
    bh = anchor * np.exp(np.clip(th, -EXP_CLAMP, EXP_CLAMP))
    return cx, cy, bw, bh


def _sigmoid(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(np.asarray(v, dtype=np.float64)))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def decode_predictions(
    raw: RawPrediction,
    conf_threshold: float,
    anchors: Sequence[Sequence[float]],
    image_size: tuple[int, int],
    num_classes: int,
) -> list[list[Detection]]:
    """Turn head logits into per-image detections with ``score >= conf_threshold``."""
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError(f"conf_threshold must lie in [0,1], got {conf_threshold}")
    img_h, img_w = image_size
    k = num_classes
    n = raw.maps[0].shape[0]
    results: list[list[Detection]] = [[] for _ in range(n)]
    for m, stride, scale_anchors in zip(raw.maps, raw.strides, anchors):
        d = m.data.astype(np.float64)
        _, ch, h, w = d.shape
        b = ch // (5 + k)
        d = d.reshape(n, b, 5 + k, h, w)
        gx, gy = _grid(h, w)
        anchor = np.asarray(scale_anchors, dtype=np.float64).reshape(1, b, 1, 1)
        cx, cy, bw, bh = decode_boxes(d[:, :, 0], d[:, :, 1], d[:, :, 2], d[:, :, 3], gx, gy, stride, anchor)
        obj = _sigmoid(d[:, :, 4])
        cls = _sigmoid(d[:, :, 5:])
        best = cls.argmax(axis=2)
        score = obj * cls.max(axis=2)
        x1 = np.clip(cx - bw / 2, 0, img_w)
        y1 = np.clip(cy - bh / 2, 0, img_h)
        x2 = np.clip(cx + bw / 2, 0, img_w)
        y2 = np.clip(cy + bh / 2, 0, img_h)
        for idx in zip(*np.nonzero(score >= conf_threshold)):
            results[idx[0]].append(
                Detection(float(x1[idx]), float(y1[idx]), float(x2[idx]), float(y2[idx]),
                          float(score[idx]), int(best[idx]))
            )
    return results


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``[A,4]`` and ``[B,4]`` xyxy boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.prod(np.clip(rb - lt, 0, None), axis=2)
    area_a = np.prod(np.clip(a[:, 2:] - a[:, :2], 0, None), axis=1)
    area_b = np.prod(np.clip(b[:, 2:] - b[:, :2], 0, None), axis=1)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, 0.0)


def nms(detections: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression; ties broken by area (desc) then input order."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, -detections[i].area, i))
    if not order:
        return []
    boxes = np.array([d.box for d in detections])
    ious = box_iou(boxes, boxes)
    kept: list[int] = []
    suppressed = np.zeros(len(detections), dtype=bool)
    for i in order:
        if suppressed[i]:
            continue
        kept.append(i)
        for j in order:
            if not suppressed[j] and j != i and detections[j].class_id == detections[i].class_id:
                if ious[i, j] > iou_threshold:
                    suppressed[j] = True
    return [detections[i] for i in kept]


@dataclass
class Detector:
    """Complete model: input stem (MEAF or a unimodal conv), backbone, head, optional SR decoder."""

    backbone_config: BackboneConfig
    sr_config: SrBranchConfig | None
    modality: str
    fusion: FusionParams | None
    stem: ConvParams | None
    stages: list[ConvParams]
    necks: list[ConvParams]
    preds: list[ConvParams]
    sr: SrDecoder | None = None
    fused_channels: int = field(default=32, metadata={"param": False})

    @classmethod
    def build(
        cls,
        backbone_config: BackboneConfig | None = None,
        sr_config: SrBranchConfig | None = None,
        modality: str = "fused",
        seed: int = 0,
        fusion_mid_channels: int = 16,
        fusion_reduction: int = 4,
    ) -> "Detector":
        cfg = backbone_config or BackboneConfig()
        if modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {modality!r}")
        rng = np.random.default_rng(seed)
        cf = 2 * fusion_mid_channels
        fusion = stem = None
        if modality == "fused":
            fusion = FusionParams.init(rng, mid_channels=fusion_mid_channels, reduction=fusion_reduction)
        else:
            stem = ConvParams.init(cf, 3 if modality == "rgb" else 1, 3, rng)
        stages, cin = [], cf
        for wdt in cfg.widths:
            stages.append(ConvParams.init(wdt, cin, 3, rng))
            cin = wdt
        necks, preds = [], []
        nout = cfg.boxes_per_cell * cfg.outputs_per_box
        for t in cfg.taps:
            c = cfg.widths[t]
            if cfg.head_channels:
                necks.append(ConvParams.init(cfg.head_channels, c, 3, rng))
                c = cfg.head_channels
            pred = ConvParams.init(nout, c, 1, rng)
            if cfg.obj_prior > 0:
                logit = np.log(cfg.obj_prior / (1.0 - cfg.obj_prior))
                pred.bias.data[4 :: cfg.outputs_per_box] = logit
            preds.append(pred)
        sr = None
        if sr_config is not None:
            sr_config.validate(cfg)
            # separate stream so SR on/off does not perturb the detection init
            sr_rng = np.random.default_rng([seed, 1])
            blocks, cin = [], cfg.widths[sr_config.tap_stage]
            for wdt in sr_config.widths:
                blocks.append(ConvParams.init(wdt, cin, 3, sr_rng))
                cin = wdt
            sr = SrDecoder(blocks, ConvParams.init(sr_config.out_channels, cin, 3, sr_rng))
        return cls(cfg, sr_config, modality, fusion, stem, stages, necks, preds, sr, cf)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.fusion is not None:
            out.update(named_parameters(self.fusion, "fusion"))
        if self.stem is not None:
            out.update(named_parameters(self.stem, "stem"))
        out.update(named_parameters(self.stages, "backbone"))
        out.update(named_parameters(self.necks, "neck"))
        out.update(named_parameters(self.preds, "head"))
        if self.sr is not None:
            out.update(named_parameters(self.sr, "sr"))
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def fuse(self, rgb: Tensor, ir: Tensor) -> Tensor:
        if self.modality == "fused":
            return meaf_forward(rgb, ir, self.fusion)[0]
        src = rgb if self.modality == "rgb" else ir
        return activation(conv2d(src, self.stem.weight, self.stem.bias, padding=1), self.backbone_config.activation)

    def forward(self, rgb: Tensor, ir: Tensor, with_sr: bool = True) -> tuple[RawPrediction, Tensor | None]:
        cfg = self.backbone_config
        feats, stage_outs = backbone_forward(self.fuse(rgb, ir), cfg, self.stages)
        raw = head_forward(feats, self.preds, self.necks, cfg.activation, cfg.head_strides)
        sr_out = None
        if with_sr and self.sr is not None:
            sr_out = sr_decoder_forward(stage_outs[self.sr_config.tap_stage], self.sr_config, self.sr.blocks, self.sr.final)
        return raw, sr_out

    def detect(
        self,
        rgb: Tensor,
        ir: Tensor,
        conf_threshold: float = 0.25,
        iou_threshold: float = 0.5,
    ) -> list[list[Detection]]:
        with no_grad():
            raw, _ = self.forward(rgb, ir, with_sr=False)
        cfg = self.backbone_config
        dets = decode_predictions(raw, conf_threshold, cfg.anchors, rgb.shape[2:], cfg.num_classes)
        return [nms(d, iou_threshold) for d in dets]

    def copy(self) -> "Detector":
        return copy.deepcopy(self)


def strip_sr(model: Detector) -> Detector:
    """Copy of ``model`` without the SR decoder; the detection path is shared unchanged."""
    if model.sr is None and model.sr_config is None:
        return model
    return dataclasses.replace(model, sr=None, sr_config=None)
