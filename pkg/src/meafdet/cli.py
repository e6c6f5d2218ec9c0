"""Command-line entry point: ``meafdet {synth,train,strip,eval,fuse}``.

Exit codes: 0 ok, 1 usage or config error, 2 data or checkpoint error,
3 non-finite loss. Failures print a single ``ERROR: ...`` line on stderr.
``MEAF_THREADS`` caps BLAS threads (0 or unset = library default).
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import tempfile
from collections import Counter
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .data import DataError, generate_synthetic, load_dataset, read_pnm, write_pnm
from .detector import strip_sr
from .fusion import meaf_forward
from .inference import evaluate_model
from .metrics import export_curves, format_report
from .tensor import tensor
from .trainer import CheckpointError, NumericError, load_checkpoint, save_checkpoint, train, write_loss_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _atomic_write(path: Path, write) -> None:
    """Write via a sibling temp file so an interrupted run never leaves a partial output."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        write(Path(tmp))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _class_names(root: Path, num_classes: int) -> list[str]:
    path = root / "classes.txt"
    if path.is_file():
        names = [n.strip() for n in path.read_text().splitlines() if n.strip()]
        if len(names) != num_classes:
            raise DataError(f"{path} lists {len(names)} classes, checkpoint has {num_classes}")
        return names
    return [str(k) for k in range(num_classes)]


def size_histogram(pairs) -> str:
    sizes = Counter(
        int(round(max(b.w * p.size[1], b.h * p.size[0]))) for p in pairs for b in p.boxes
    )
    if not sizes:
        return "no targets"
    top = max(sizes.values())
    lines = ["target size (px)  count"]
    for s in range(min(sizes), max(sizes) + 1):
        n = sizes.get(s, 0)
        lines.append(f"{s:>16}  {n:>5}  {'#' * max(1 if n else 0, round(30 * n / top))}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = load_config(args.spec, _overrides(args.set)).synth
    pairs = generate_synthetic(spec, args.count, args.out)
    n = sum(len(p.boxes) for p in pairs)
    print(f"wrote {len(pairs)} pairs ({n} targets, {spec.image_size}x{spec.image_size}) to {args.out}")
    print(size_histogram(pairs))
    return EXIT_OK


def cmd_train(args) -> int:
    if args.resume:
        raise UsageError("resuming an interrupted run is not supported; start a fresh run")
    over = _overrides(args.set)
    if args.no_sr:
        over["train.sr"] = "false"
    if args.modality:
        over["train.modality"] = args.modality
    cfg = load_config(args.config, over)
    pairs = load_dataset(args.data)
    out = Path(args.out)
    csv_path = Path(args.csv) if args.csv else out.with_suffix(".loss.csv")
    res = train(cfg, pairs)
    _atomic_write(out, lambda p: p.write_bytes(res.checkpoint_bytes()))
    _atomic_write(csv_path, lambda p: write_loss_csv(p, res.rows))
    first, last = res.rows[0][1], res.rows[-1][1]
    print(f"trained {res.step} steps: loss {first:.4f} -> {last:.4f}; checkpoint {out}, losses {csv_path}")
    return EXIT_OK


def cmd_strip(args) -> int:
    ck = load_checkpoint(args.ckpt)
    model = strip_sr(ck.model)
    _atomic_write(Path(args.out), lambda p: save_checkpoint(model, ck.state, p, ck.step, ck.seed, ck.config))
    before, after = Path(args.ckpt).stat().st_size, Path(args.out).stat().st_size
    print(f"stripped SR decoder: {before} -> {after} bytes")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.ckpt)
    pairs = load_dataset(args.data)
    k = ck.model.backbone_config.num_classes
    bad = sorted({b.class_id for p in pairs for b in p.boxes if b.class_id >= k})
    if bad:
        raise DataError(f"dataset has class ids {bad} but the checkpoint was trained for {k} classes")
    names = _class_names(Path(args.data), k)
    report = evaluate_model(ck.model, pairs, args.conf, args.iou, args.nms_iou, names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = format_report(report)
    (out / "report.txt").write_text(table + "\n")
    export_curves(report, out)
    print(table)
    return EXIT_OK


def _normalized(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0:
        return np.zeros_like(img, dtype=np.float64)
    return (img - lo) / (hi - lo)


def cmd_fuse(args) -> int:
    ck = load_checkpoint(args.ckpt)
    if ck.model.fusion is None:
        raise DataError(f"checkpoint uses modality {ck.model.modality!r}; fusion maps need a fused model")
    rgb = read_pnm(args.rgb, b"P6").astype(np.float32) / 255.0
    ir = read_pnm(args.ir, b"P5").astype(np.float32) / 255.0
    if rgb.shape[1:] != ir.shape[1:]:
        raise DataError(f"rgb {rgb.shape[1:]} and ir {ir.shape[1:]} are not aligned")
    _, trace = meaf_forward(tensor(rgb[None]), tensor(ir[None]), ck.model.fusion, record_trace=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = 0
    for m in ("rgb", "ir"):
        write_pnm(out / f"attention_{m}.pgm", trace.attention[m].data[0])  # already in (0, 1)
        for c, ch in enumerate(trace.mask[m].data[0]):
            write_pnm(out / f"mask_{m}_{c:02d}.pgm", _normalized(ch)[None])
            written += 1
    for c, ch in enumerate(trace.fused.data[0]):
        write_pnm(out / f"fused_{c:02d}.pgm", _normalized(ch)[None])
    written += 2 + trace.fused.shape[1]
    np.savetxt(out / "excitation.txt", trace.excitation.data[0], fmt="%.6f")
    print(f"wrote {written} maps to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="meafdet", description="RGB+IR small-target detection with mask-enhanced attention fusion.",
                formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render a synthetic RGB/IR dataset", formatter_class=fmt)
    s.add_argument("--spec", default=None, help="config file; only synth.* keys are used")
    s.add_argument("--count", type=int, required=True, help="number of image pairs")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a detector", formatter_class=fmt)
    t.add_argument("--config", default=None, help="config file (defaults apply to missing keys)")
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--csv", default=None, help="loss CSV path; None writes <out>.loss.csv")
    t.add_argument("--no-sr", action="store_true", help="train without the SR branch")
    t.add_argument("--modality", choices=("rgb", "ir", "fused"), default=None,
                   help="input modality; None keeps train.modality")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--resume", action="store_true", help="not supported; always an error")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("strip", help="drop the SR decoder from a checkpoint", formatter_class=fmt)
    r.add_argument("--ckpt", required=True, help="input checkpoint")
    r.add_argument("--out", required=True, help="output checkpoint")
    r.set_defaults(func=cmd_strip)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset", formatter_class=fmt)
    e.add_argument("--ckpt", required=True, help="checkpoint path")
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--out", required=True, help="directory for report.txt and curve CSVs")
    e.add_argument("--conf", type=float, default=0.25, help="score threshold")
    e.add_argument("--iou", type=float, default=0.5, help="IoU for a true positive")
    e.add_argument("--nms-iou", type=float, default=0.5, help="NMS suppression IoU")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="export fusion masks, attention maps and fused channels", formatter_class=fmt)
    f.add_argument("--ckpt", required=True, help="fused-modality checkpoint")
    f.add_argument("--rgb", required=True, help="P6 image")
    f.add_argument("--ir", required=True, help="P5 image")
    f.add_argument("--out", required=True, help="output directory")
    f.set_defaults(func=cmd_fuse)
    return p


def _thread_limit():
    raw = os.environ.get("MEAF_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"MEAF_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("MEAF_THREADS must be >= 0")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        with _thread_limit():
            return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        code, msg = EXIT_USAGE, exc
    except NumericError as exc:
        code, msg = EXIT_NUMERIC, exc
    except (DataError, CheckpointError, ValueError, OSError) as exc:
        code, msg = EXIT_DATA, exc
    print(f"ERROR: {' '.join(str(msg).split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
