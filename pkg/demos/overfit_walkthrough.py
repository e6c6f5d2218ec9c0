"""Train the detector on a handful of synthetic RGB/IR pairs and watch it memorise them.

Everything here goes through the public API; the CLI does the same thing
(`meafdet synth`, `meafdet train`, `meafdet eval`).

Run: python3 demos/overfit_walkthrough.py [steps]   (default 300, about a minute)
"""
import sys
import tempfile
from pathlib import Path

import numpy as np

from meafdet.cli import size_histogram
from meafdet.config import parse_config
from meafdet.data import generate_synthetic
from meafdet.detector import strip_sr
from meafdet.inference import evaluate_model, predict
from meafdet.metrics import export_curves, format_report
from meafdet.trainer import train

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

# ---------------------------------------------------------------------------
# 1. Data: 16 pairs of 96x96 images, 1-3 small bright squares each
# ---------------------------------------------------------------------------
cfg = parse_config("", {"train.max_steps": str(steps)})
pairs = generate_synthetic(cfg.synth, 16)
print(f"{len(pairs)} pairs, {sum(len(p.boxes) for p in pairs)} targets")
print(size_histogram(pairs))

# ---------------------------------------------------------------------------
# 2. Train. Each row of res.rows is one CSV line: step, total, det, sr, then
#    objectness / localisation / classification for each of the three scales.
# ---------------------------------------------------------------------------
res = train(cfg, pairs)
totals = np.array([r[1] for r in res.rows])
print(f"\nloss at step 1: {totals[0]:.3f}")
for k in (len(totals) // 4, len(totals) // 2, len(totals) - 1):
    print(f"loss at step {k + 1}: {totals[k]:.3f}")
print(f"last-epoch mean / first: {totals[-8:].mean() / totals[0]:.3f}")

sr_share = np.array([r[3] for r in res.rows]) / totals
print(f"SR reconstruction share of the loss: {sr_share[0]:.1%} at start, {sr_share[-1]:.1%} at end")

# ---------------------------------------------------------------------------
# 3. The SR decoder only exists to shape training. Dropping it changes nothing
#    at inference time, which we can check directly.
# ---------------------------------------------------------------------------
lean = strip_sr(res.model)
same = predict(lean, pairs[:4]) == predict(res.model, pairs[:4])
print(f"\nparameters {res.model.num_parameters()} -> {lean.num_parameters()} without SR; identical detections: {same}")

# ---------------------------------------------------------------------------
# 4. Evaluate on the training set (this is an overfitting check, not a benchmark)
# ---------------------------------------------------------------------------
report = evaluate_model(lean, pairs, conf=0.25)
print()
print(format_report(report))

out = Path(tempfile.mkdtemp(prefix="meafdet_demo_"))
for path in export_curves(report, out):
    print("wrote", path)

# A quick look at what a detection is
first = predict(lean, pairs[:1])[0]
gt = pairs[0].boxes
print(f"\nimage {pairs[0].id}: {len(gt)} targets, {len(first)} detections")
for d in first[:3]:
    print(f"  ({d.x1:5.1f},{d.y1:5.1f})-({d.x2:5.1f},{d.y2:5.1f}) score {d.score:.2f}")
