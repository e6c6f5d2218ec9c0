"""RGB/IR pair datasets on disk (PPM/PGM + YOLO-style labels) and a synthetic generator.

Layout::

    <root>/manifest.txt          one sample id per line
    <root>/rgb/<id>.ppm          binary P6, 8-bit
    <root>/ir/<id>.pgm           binary P5, 8-bit
    <root>/labels/<id>.txt       "class cx cy w h" per line, normalized
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

__all__ = [
    "GroundTruthBox",
    "ImagePair",
    "SynthSpec",
    "Batch",
    "DataError",
    "read_pnm",
    "write_pnm",
    "load_pair",
    "write_pair",
    "load_dataset",
    "generate_synthetic",
    "dataset_iter",
    "VISIBILITIES",
]

VISIBILITIES = ("rgb_only", "ir_only", "both")


class DataError(ValueError):
    """Malformed or missing dataset content."""


@dataclass(frozen=True)
class GroundTruthBox:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise DataError(f"box center ({self.cx}, {self.cy}) outside [0, 1]")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise DataError(f"box size ({self.w}, {self.h}) outside (0, 1]")
        if self.class_id < 0:
            raise DataError(f"negative class id {self.class_id}")

    def xyxy(self, image_size: tuple[int, int]) -> np.ndarray:
        h, w = image_size
        return np.array([
            (self.cx - self.w / 2) * w,
            (self.cy - self.h / 2) * h,
            (self.cx + self.w / 2) * w,
            (self.cy + self.h / 2) * h,
        ])


@dataclass
class ImagePair:
    rgb: np.ndarray  # [3,H,W] float32 in [0,1]
    ir: np.ndarray  # [1,H,W]
    boxes: list[GroundTruthBox]
    id: str

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[0] != 3:
            raise DataError(f"rgb must be [3,H,W], got {self.rgb.shape}")
        if self.ir.ndim != 3 or self.ir.shape[0] != 1:
            raise DataError(f"ir must be [1,H,W], got {self.ir.shape}")
        if self.rgb.shape[1:] != self.ir.shape[1:]:
            raise DataError(f"rgb {self.rgb.shape[1:]} and ir {self.ir.shape[1:]} sizes differ")

    @property
    def size(self) -> tuple[int, int]:
        return self.rgb.shape[1], self.rgb.shape[2]


# ---------------------------------------------------------------------------
# PNM io


def _tokens(buf: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise DataError("truncated PNM header")
        out.append(buf[start:pos])
    return out, pos + 1  # single whitespace byte before raster


def read_pnm(path: str | os.PathLike, magic: bytes) -> np.ndarray:
    """Read a binary P6 (-> [3,H,W]) or P5 (-> [1,H,W]) file as uint8."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    buf = path.read_bytes()
    if buf[:2] != magic:
        raise DataError(f"{path}: expected magic {magic.decode()}, got {buf[:2]!r}")
    (w, h, maxval), pos = _tokens(buf, 3, 2)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise DataError(f"{path}: bad PNM header") from exc
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit (maxval 255) images are supported")
    c = 3 if magic == b"P6" else 1
    raster = buf[pos : pos + w * h * c]
    if len(raster) != w * h * c:
        raise DataError(f"{path}: raster truncated ({len(raster)} of {w * h * c} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1)


def write_pnm(path: str | os.PathLike, pixels: np.ndarray) -> None:
    """Write ``[C,H,W]`` values in [0,1] (C=3 -> P6, C=1 -> P5), rounding to 8 bits."""
    pixels = np.asarray(pixels)
    c, h, w = pixels.shape
    magic = {3: b"P6", 1: b"P5"}[c]
    raw = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + raw.tobytes())


def _parse_labels(path: Path) -> list[GroundTruthBox]:
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    boxes = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 5:
            raise DataError(f"{path}:{lineno}: expected 'class cx cy w h', got {line!r}")
        try:
            cls = int(fields[0])
            cx, cy, w, h = (float(f) for f in fields[1:])
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: unparsable label {line!r}") from exc
        try:
            boxes.append(GroundTruthBox(cls, cx, cy, w, h))
        except DataError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
    return boxes


def load_pair(rgb_path, ir_path, label_path, pair_id: str | None = None) -> ImagePair:
    rgb = read_pnm(rgb_path, b"P6").astype(np.float32) / 255.0
    ir = read_pnm(ir_path, b"P5").astype(np.float32) / 255.0
    if rgb.shape[1:] != ir.shape[1:]:
        raise DataError(f"rgb {rgb.shape[1:]} and ir {ir.shape[1:]} dimensions differ")
    boxes = _parse_labels(Path(label_path))
    return ImagePair(rgb, ir, boxes, pair_id or Path(rgb_path).stem)


def _format_label(b: GroundTruthBox) -> str:
    # repr is the shortest text that parses back to the same float
    return f"{b.class_id} {b.cx!r} {b.cy!r} {b.w!r} {b.h!r}"


def write_pair(root: str | os.PathLike, pair: ImagePair) -> None:
    root = Path(root)
    for sub in ("rgb", "ir", "labels"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_pnm(root / "rgb" / f"{pair.id}.ppm", pair.rgb)
    write_pnm(root / "ir" / f"{pair.id}.pgm", pair.ir)
    text = "".join(_format_label(b) + "\n" for b in pair.boxes)
    (root / "labels" / f"{pair.id}.txt").write_text(text)


def load_dataset(root: str | os.PathLike) -> list[ImagePair]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise DataError(f"missing file: {manifest}")
    ids = [line.strip() for line in manifest.read_text().splitlines() if line.strip()]
    if not ids:
        raise DataError(f"empty dataset: {root}")
    return [
        load_pair(root / "rgb" / f"{i}.ppm", root / "ir" / f"{i}.pgm", root / "labels" / f"{i}.txt", i)
        for i in ids
    ]


# ---------------------------------------------------------------------------
# Synthetic generator


@dataclass
class SynthSpec:
    image_size: int = 96
    targets_min: int = 1
    targets_max: int = 3
    size_min: int = 7
    size_max: int = 9
    visibility: tuple[str, ...] = ("both",)
    visibility_weights: tuple[float, ...] = (1.0,)
    num_classes: int = 1
    clutter: float = 0.2
    noise: float = 0.02
    amplitude: float = 0.6
    seed: int = 0

    def __post_init__(self):
        self.visibility = tuple(self.visibility)
        self.visibility_weights = tuple(float(v) for v in self.visibility_weights)
        if any(v not in VISIBILITIES for v in self.visibility):
            raise ValueError(f"visibility entries must be in {VISIBILITIES}")
        if len(self.visibility_weights) != len(self.visibility) or sum(self.visibility_weights) <= 0:
            raise ValueError("need one positive weight per visibility entry")
        if self.size_min < 3 or self.size_max < self.size_min:
            raise ValueError("target sizes must satisfy 3 <= size_min <= size_max")
        if self.size_max / self.image_size >= 0.1:
            raise ValueError(
                f"size_max {self.size_max} is not a small target on a {self.image_size}px image (ratio >= 0.1)"
            )
        if not 1 <= self.targets_min <= self.targets_max:
            raise ValueError("targets per image must satisfy 1 <= min <= max")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.clutter + self.amplitude > 1.0:
            raise ValueError("clutter + amplitude must stay within the [0,1] pixel range")


def _clutter(rng: np.random.Generator, channels: int, size: int, amp: float) -> np.ndarray:
    """Low-frequency pattern in [0, amp]: a few random planar sinusoids per channel."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((channels, size, size))
    for c in range(channels):
        acc = np.zeros((size, size))
        for _ in range(3):
            fx, fy = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            acc += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        out[c] = (acc / 6.0 + 0.5) * amp
    return out


def _stamp(img: np.ndarray, x0: int, y0: int, s: int, level: np.ndarray, ring: bool) -> None:
    patch = img[:, y0 : y0 + s, x0 : x0 + s]
    block = np.broadcast_to(level[:, None, None], patch.shape).copy()
    if ring:
        inner = patch[:, 2:-2, 2:-2]
        block[:, 2:-2, 2:-2] = inner
    img[:, y0 : y0 + s, x0 : x0 + s] = block


def _visibility_schedule(spec: SynthSpec, total: int, rng: np.random.Generator) -> list[str]:
    """Exact dataset-wide quotas (largest remainder), shuffled.

    Independent draws per target drift badly on small sets: 16 images can
    come out 17/5/9 for a nominal 40/40/20 mix.
    """
    w = np.asarray(spec.visibility_weights) / sum(spec.visibility_weights)
    quota = np.floor(w * total).astype(int)
    short = total - int(quota.sum())
    order = np.argsort(-(w * total - quota), kind="stable")
    quota[order[:short]] += 1
    names = [v for v, q in zip(spec.visibility, quota) for _ in range(q)]
    return [names[i] for i in rng.permutation(total)]


def _render(spec: SynthSpec, rng: np.random.Generator, index: int, visibility: Sequence[str]) -> ImagePair:
    n = spec.image_size
    rgb = _clutter(rng, 3, n, spec.clutter)
    ir = _clutter(rng, 1, n, spec.clutter)
    placed: list[tuple[float, float]] = []
    boxes = []
    min_gap = 12.0
    for vis in visibility:
        s = int(rng.integers(spec.size_min, spec.size_max + 1))
        for _attempt in range(100):
            x0 = int(rng.integers(0, n - s + 1))
            y0 = int(rng.integers(0, n - s + 1))
            c = (x0 + s / 2, y0 + s / 2)
            if all(max(abs(c[0] - p[0]), abs(c[1] - p[1])) >= min_gap for p in placed):
                break
        else:
            continue
        cls = int(rng.integers(0, spec.num_classes))
        ring = cls % 2 == 1 and s >= 5
        color = rng.uniform(0.8, 1.0, size=3)
        if vis in ("rgb_only", "both"):
            bg = rgb[:, y0 : y0 + s, x0 : x0 + s].max(axis=(1, 2))
            _stamp(rgb, x0, y0, s, np.minimum(bg + spec.amplitude * color / color.max(), 1.0), ring)
        if vis in ("ir_only", "both"):
            bg = ir[:, y0 : y0 + s, x0 : x0 + s].max(axis=(1, 2))
            _stamp(ir, x0, y0, s, np.minimum(bg + spec.amplitude, 1.0), ring)
        placed.append(c)
        boxes.append(GroundTruthBox(cls, c[0] / n, c[1] / n, s / n, s / n))
    if spec.noise > 0:
        rgb += rng.normal(0, spec.noise, rgb.shape)
        ir += rng.normal(0, spec.noise, ir.shape)
    rgb = np.clip(rgb, 0, 1).astype(np.float32)
    ir = np.clip(ir, 0, 1).astype(np.float32)
    return ImagePair(rgb, ir, boxes, f"{index:05d}")


def generate_synthetic(spec: SynthSpec, count: int, out_dir: str | os.PathLike | None = None) -> list[ImagePair]:
    """Render ``count`` seeded samples; write them (8-bit) to ``out_dir`` if given.

    Returned pairs are the on-disk values when written, so memory and disk agree.
    """
    if count < 1:
        raise ValueError("empty dataset requested")
    rng = np.random.default_rng(spec.seed)
    counts = rng.integers(spec.targets_min, spec.targets_max + 1, size=count)
    vis = _visibility_schedule(spec, int(counts.sum()), rng)
    starts = np.concatenate([[0], np.cumsum(counts)])
    pairs = [_render(spec, rng, i, vis[starts[i] : starts[i + 1]]) for i in range(count)]
    if out_dir is None:
        return pairs
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for p in pairs:
        write_pair(root, p)
    (root / "manifest.txt").write_text("".join(p.id + "\n" for p in pairs))
    return load_dataset(root)


@dataclass
class Batch:
    rgb: np.ndarray  # [B,3,H,W]
    ir: np.ndarray  # [B,1,H,W]
    boxes: list[list[GroundTruthBox]]
    ids: list[str] = field(default_factory=list)


def dataset_iter(
    pairs: Sequence[ImagePair], batch_size: int, shuffle_seed: int | None = None, epoch: int = 0
) -> Iterator[Batch]:
    """Yield batches covering every sample once; the last batch may be short.

    The order for a given ``(shuffle_seed, epoch)`` is fixed; ``None`` keeps file order.
    """
    if not pairs:
        raise DataError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(pairs))
    if shuffle_seed is not None:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        chunk = [pairs[i] for i in order[start : start + batch_size]]
        yield Batch(
            np.stack([p.rgb for p in chunk]),
            np.stack([p.ir for p in chunk]),
            [list(p.boxes) for p in chunk],
            [p.id for p in chunk],
        )
