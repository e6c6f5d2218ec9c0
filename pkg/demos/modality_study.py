"""Why fuse at all? A small study on targets that only one sensor can see.

Here 40% of targets show up only in RGB, 40% only in IR and 20% in both. A
model that looks at one modality can at best find 60% of them; the fused
model can find all. We train each variant with the same budget and then look
inside the fusion module to see what it learned.

Run: python3 demos/modality_study.py [steps]   (default 300, a couple of minutes)
"""
import sys

import numpy as np

from meafdet.config import parse_config
from meafdet.data import generate_synthetic
from meafdet.fusion import meaf_forward
from meafdet.inference import evaluate_model
from meafdet.tensor import tensor
from meafdet.trainer import train

steps = sys.argv[1] if len(sys.argv) > 1 else "300"
mix = {
    "train.max_steps": steps,
    "synth.visibility": "rgb_only,ir_only,both",
    "synth.visibility_weights": "0.4,0.4,0.2",
}

scores, models = {}, {}
for modality in ("rgb", "ir", "fused"):
    cfg = parse_config("", {**mix, "train.modality": modality})
    pairs = generate_synthetic(cfg.synth, 16)  # same seed, same images for all three
    res = train(cfg, pairs)
    scores[modality] = evaluate_model(res.model, pairs, 0.25).map50
    models[modality] = res.model
    print(f"{modality:>5}: mAP50 {scores[modality]:.3f}")

best_single = max(scores["rgb"], scores["ir"])
print(f"fused minus best single modality: {scores['fused'] - best_single:+.3f}")

# --- inside the fusion module -------------------------------------------------
fusion = models["fused"].fusion
print(f"\nlearned modality scales: p_rgb={fusion.modal.p_rgb.item():.3f}  p_ir={fusion.modal.p_ir.item():.3f}"
      "  (both start at 0.5)")

pair = pairs[0]
_, trace = meaf_forward(tensor(pair.rgb[None]), tensor(pair.ir[None]), fusion, record_trace=True)

# spatial attention: how much brighter is the map on targets than elsewhere?
n = pair.rgb.shape[1]
on_target = np.zeros((n, n), dtype=bool)
for b in pair.boxes:
    x1, y1, x2, y2 = np.round(b.xyxy((n, n))).astype(int)
    on_target[y1:y2, x1:x2] = True
for m in ("rgb", "ir"):
    att = trace.attention[m].data[0, 0]
    print(f"{m:>3} attention: {att[on_target].mean():.3f} on targets vs {att[~on_target].mean():.3f} elsewhere")

# channel excitation: the first half of the gate vector scales RGB features, the second half IR
gate = trace.excitation.data[0]
half = gate.size // 2
print(f"mean excitation: RGB channels {gate[:half].mean():.3f}, IR channels {gate[half:].mean():.3f}")
print("(`meafdet fuse` writes these maps as images for a closer look)")
