"""SGD training loop, binary checkpoints and the loss-curve CSV."""
from __future__ import annotations

import csv
import io
import logging
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, parse_config, serialize_config
from .data import ImagePair, dataset_iter
from .detector import Detector
from .losses import LossReport, assign_targets, compute_losses
from .tensor import ComputeTape, Tensor, backward, concat_channels, tensor

log = logging.getLogger(__name__)

__all__ = [
    "OptimizerState",
    "TrainResult",
    "CheckpointError",
    "IncompatibleCheckpoint",
    "NumericError",
    "sgd_step",
    "build_model",
    "train_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "write_loss_csv",
    "LOSS_CSV_HEADER",
]

MAGIC = b"MEAFCKPT"
VERSION = 1
LOSS_CSV_HEADER = ["step", "total", "det", "sr"] + [f"{c}{a}" for a in range(3) for c in ("obj", "loc", "cls")]


class CheckpointError(ValueError):
    """Truncated or otherwise unreadable checkpoint."""


class IncompatibleCheckpoint(CheckpointError):
    """Wrong magic or unsupported format version."""


class NumericError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 0.0005
    nesterov: bool = True
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if min(self.learning_rate, self.momentum, self.weight_decay) < 0:
            raise ValueError("optimizer hyperparameters must be non-negative")


def _decays(name: str) -> bool:
    # conv/FC weights only; biases and modal scalars are not decayed
    return name.endswith("weight")


def sgd_step(params: dict[str, Tensor], state: OptimizerState) -> None:
    """One in-place SGD update with momentum, optional Nesterov, and decoupled-from-bias decay.

    Gradients are zeroed afterwards. A trainable parameter without a gradient
    means the tape never reached it and raises.
    """
    missing = [n for n, p in params.items() if p.requires_grad and p.grad is None]
    if missing:
        raise RuntimeError(f"no gradient for trainable parameters: {', '.join(missing[:5])}")
    lr, mu, wd = state.learning_rate, state.momentum, state.weight_decay
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad
        if wd and _decays(name):
            g = g + wd * p.data
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = mu * v + g
        state.velocity[name] = v.astype(p.dtype, copy=False)
        update = mu * v + g if state.nesterov else v
        p.data = (p.data - lr * update).astype(p.dtype, copy=False)
        p.grad = None


# ---------------------------------------------------------------------------
# Checkpoints


def _pack_records(out: io.BytesIO, records: Sequence[tuple[str, np.ndarray]]) -> None:
    out.write(struct.pack("<I", len(records)))
    for name, arr in records:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def records(self) -> list[tuple[str, np.ndarray]]:
        (count,) = self.unpack("<I")
        out = []
        for _ in range(count):
            (nlen,) = self.unpack("<H")
            name = self.take(nlen).decode("utf-8")
            (rank,) = self.unpack("<B")
            dims = self.unpack(f"<{rank}I") if rank else ()
            size = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(self.take(4 * size), dtype="<f4").reshape(dims)
            out.append((name, data.astype(np.float32)))
        return out


def _echo_config(model: Detector, config: RunConfig | None) -> RunConfig:
    cfg = config or RunConfig()
    train = replace(cfg.train, modality=model.modality, sr=model.sr is not None)
    fusion = replace(cfg.fusion, mid_channels=model.fused_channels // 2)
    if model.fusion is not None:
        fusion.reduction = model.fusion.out_channels // model.fusion.fc1_weight.shape[0]
    return replace(
        cfg, train=train, fusion=fusion, backbone=model.backbone_config, sr=model.sr_config or cfg.sr
    )


def checkpoint_bytes(
    model: Detector,
    state: OptimizerState | None = None,
    step: int = 0,
    seed: int = 0,
    config: RunConfig | None = None,
) -> bytes:
    state = state or OptimizerState()
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    params = model.named_parameters()
    _pack_records(out, [(n, p.data) for n, p in params.items()])
    opt = [
        ("opt.learning_rate", np.float32(state.learning_rate)),
        ("opt.momentum", np.float32(state.momentum)),
        ("opt.weight_decay", np.float32(state.weight_decay)),
        ("opt.nesterov", np.float32(1.0 if state.nesterov else 0.0)),
    ]
    opt += [(f"velocity.{n}", state.velocity[n]) for n in params if n in state.velocity]
    _pack_records(out, opt)
    out.write(struct.pack("<QQ", step, seed))
    text = serialize_config(_echo_config(model, config)).encode("utf-8")
    out.write(struct.pack("<I", len(text)))
    out.write(text)
    return out.getvalue()


def save_checkpoint(model: Detector, state: OptimizerState | None, path, step: int = 0, seed: int = 0,
                    config: RunConfig | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, state, step, seed, config))


@dataclass
class LoadedCheckpoint:
    model: Detector
    state: OptimizerState
    step: int
    seed: int
    config: RunConfig


def load_checkpoint(path: str | os.PathLike) -> LoadedCheckpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint: {path}")
    r = _Reader(path.read_bytes())
    if len(r.buf) == 0:
        raise CheckpointError(f"{path}: empty file")
    magic = r.take(len(MAGIC))
    if magic != MAGIC:
        raise IncompatibleCheckpoint(f"{path}: bad magic {magic!r}")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise IncompatibleCheckpoint(f"{path}: unsupported version {version} (expected {VERSION})")
    params = r.records()
    opt = dict(r.records())
    step, seed = r.unpack("<QQ")
    (tlen,) = r.unpack("<I")
    try:
        config = parse_config(r.take(tlen).decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: config block unreadable: {exc}") from exc
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes")

    model = build_model(config)
    named = model.named_parameters()
    names = [n for n, _ in params]
    if len(set(names)) != len(names) or set(names) != set(named):
        extra = sorted(set(names) ^ set(named))
        raise CheckpointError(f"{path}: parameter table does not match the model ({extra[:5]})")
    for name, data in params:
        if named[name].shape != data.shape:
            raise CheckpointError(f"{path}: {name} has shape {data.shape}, model expects {named[name].shape}")
        named[name].data = data.copy()
    state = OptimizerState(
        float(opt.pop("opt.learning_rate")),
        float(opt.pop("opt.momentum")),
        float(opt.pop("opt.weight_decay")),
        bool(opt.pop("opt.nesterov")),
        {k.removeprefix("velocity."): v.copy() for k, v in opt.items()},
    )
    return LoadedCheckpoint(model, state, int(step), int(seed), config)


# ---------------------------------------------------------------------------
# Training


def build_model(config: RunConfig) -> Detector:
    t = config.train
    return Detector.build(
        config.backbone,
        config.sr if t.sr else None,
        t.modality,
        seed=t.seed,
        fusion_mid_channels=config.fusion.mid_channels,
        fusion_reduction=config.fusion.reduction,
    )


def _first_non_finite(tape: ComputeTape, params: dict[str, Tensor]) -> str:
    for name, p in params.items():
        if not np.all(np.isfinite(p.data)):
            return f"parameter {name}"
    for i, node in enumerate(tape.nodes):
        if not np.all(np.isfinite(node.out.data)):
            op = node.backward_fn.__qualname__.split(".")[0]
            return f"tape node #{i} ({op}, shape {node.out.shape})"
    return "loss"


def train_step(model: Detector, batch, config: RunConfig, state: OptimizerState) -> LossReport:
    rgb, ir = tensor(batch.rgb), tensor(batch.ir)
    cfg = model.backbone_config
    params = model.named_parameters()
    with ComputeTape() as tape:
        raw, sr_out = model.forward(rgb, ir)
        targets = assign_targets(batch.boxes, cfg.anchors, cfg.head_strides, rgb.shape[2:])
        sr_target = concat_channels(rgb, ir) if sr_out is not None else None
        ratio = model.sr_config.target_stride if sr_out is not None else 1
        report = compute_losses(raw, targets, config.loss, cfg.anchors, cfg.num_classes, sr_out, sr_target, ratio)
    if not np.isfinite(report.total.item()):
        raise NumericError(f"non-finite loss; first non-finite tensor: {_first_non_finite(tape, params)}")
    backward(tape, report.total)
    sgd_step(params, state)
    return report


@dataclass
class TrainResult:
    model: Detector
    state: OptimizerState
    rows: list[list[float]]
    step: int
    config: RunConfig

    def checkpoint_bytes(self) -> bytes:
        return checkpoint_bytes(self.model, self.state, self.step, self.config.train.seed, self.config)


def train(
    config: RunConfig,
    dataset: Sequence[ImagePair],
    checkpoint_path: str | os.PathLike | None = None,
    csv_path: str | os.PathLike | None = None,
) -> TrainResult:
    """Seeded SGD over shuffled mini-batches; optionally writes checkpoint and loss CSV."""
    if not dataset:
        raise ValueError("empty dataset")
    t = config.train
    size = dataset[0].size
    if size[0] % 32 or size[1] % 32:
        raise ValueError(f"image size {size} must be divisible by 32")
    if size != (t.image_size, t.image_size):
        raise ValueError(f"dataset images are {size[0]}x{size[1]} but train.image_size is {t.image_size}")
    model = build_model(config)
    state = OptimizerState(t.lr, t.momentum, t.weight_decay, t.nesterov)
    rows: list[list[float]] = []
    step = 0
    done = False
    for epoch in range(t.epochs):
        for batch in dataset_iter(dataset, t.batch_size, t.seed, epoch):
            report = train_step(model, batch, config, state)
            step += 1
            rows.append([step, *report.row()])
            if t.log_interval and step % t.log_interval == 0:
                log.info("step %d total %.5f det %.5f sr %.5f", step, *rows[-1][1:4])
            if t.max_steps and step >= t.max_steps:
                done = True
                break
        if done:
            break
    result = TrainResult(model, state, rows, step, config)
    if checkpoint_path is not None:
        Path(checkpoint_path).write_bytes(result.checkpoint_bytes())
    if csv_path is not None:
        write_loss_csv(csv_path, rows)
    return result


def write_loss_csv(path: str | os.PathLike, rows: Sequence[Sequence[float]]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_CSV_HEADER)
        for row in rows:
            w.writerow([int(row[0]), *(f"{v:.8g}" for v in row[1:])])
