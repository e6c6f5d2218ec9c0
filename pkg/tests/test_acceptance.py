"""End-to-end acceptance checks, one test per criterion.

Run ``pytest -m acceptance -rA`` for just these; the terminal summary prints a
PASS/FAIL line per criterion with the measured numbers. The training-based
checks (6, 7, 9) take several minutes on one core.
"""
import math
import time

import numpy as np
import pytest

from meafdet import tensor as T
from meafdet.cli import main
from meafdet.config import parse_config
from meafdet.data import GroundTruthBox, generate_synthetic
from meafdet.detector import Detector, RawPrediction, SrBranchConfig, strip_sr
from meafdet.fusion import (
    FusionParams,
    apply_attention,
    channel_excitation_fuse,
    generate_mask,
    meaf_forward,
    refine_features,
    scale_modalities,
    spatial_attention,
)
from meafdet.gradcheck import gradcheck
from meafdet.inference import evaluate_model
from meafdet.losses import LossWeights, assign_targets, compute_losses, detection_loss, sr_loss
from meafdet.metrics import ClassMatches, MatchCounts, average_precision, pr_curve, precision_recall
from meafdet.trainer import checkpoint_bytes, train

pytestmark = pytest.mark.acceptance

OVERFIT_STEPS = 300
SHORT_STEPS = 150
EPOCH_STEPS = 8  # 16 images at batch 2


# -- 1 ----------------------------------------------------------------------

OPS = {
    "conv3x3": lambda t: T.conv2d(t["x"], t["w3"], t["b"], padding=1),
    "conv3x3_s2": lambda t: T.conv2d(t["x"], t["w3"], t["b"], stride=2, padding=1),
    "conv1x1": lambda t: T.conv2d(t["x"], t["w1"], t["b"]),
    "sigmoid": lambda t: T.sigmoid(t["x"]),
    "silu": lambda t: T.silu(t["x"]),
    "relu": lambda t: T.relu(t["x"]),
    "exp": lambda t: T.exp(t["x"] * 0.5),
    "abs": lambda t: T.absolute(t["x"]),
    "clamp": lambda t: T.clamp(t["x"], -0.5, 0.7),
    "max": lambda t: T.maximum(t["x"], t["y"]),
    "min": lambda t: T.minimum(t["x"], t["y"]),
    "div": lambda t: t["x"] / (T.exp(t["y"]) + 0.5),
    "sub_neg": lambda t: -(t["x"] - t["y"]),
    "channel_stats": lambda t: T.channel_stats(t["x"]),
    "gap_fc": lambda t: T.fully_connected(T.global_avg_pool(t["x"]), t["fcw"], t["fcb"]),
    "concat": lambda t: T.concat_channels(t["x"], t["map"]),
    "split": lambda t: T.split_channels(t["x"], 1)[1],
    "mul_map": lambda t: T.elementwise(t["x"], t["map"], "mul"),
    "mul_vec": lambda t: T.elementwise(t["x"], t["vec"], "mul"),
    "add_map": lambda t: T.elementwise(t["x"], t["map"], "add"),
    "up": lambda t: T.resize_spatial(t["x"], 2, "up_nearest"),
    "down": lambda t: T.resize_spatial(t["x"], 2, "down_avg"),
    "bce": lambda t: T.bce_with_logits(t["x"], t["target"]),
    "index_sum_mean": lambda t: t["x"][:, 1:, ::2].sum(axis=1) + t["x"].mean(axis=(2, 3), keepdims=True)[:, 0],
    "reshape_transpose": lambda t: t["x"].reshape(2, 3, 16).transpose(0, 2, 1),
}


def _op_tensors(rng):
    shapes = {"x": (2, 3, 4, 4), "y": (2, 3, 4, 4), "w3": (2, 3, 3, 3), "w1": (2, 3, 1, 1), "b": (2,),
              "map": (2, 1, 4, 4), "vec": (2, 3), "fcw": (5, 3), "fcb": (5,)}
    t = {k: T.tensor(rng.normal(size=s), requires_grad=True) for k, s in shapes.items()}
    t["target"] = T.tensor(rng.uniform(size=(2, 3, 4, 4)) > 0.5)
    return t


def _composed_loss(rng):
    model = Detector.build(sr_config=SrBranchConfig(), seed=0)
    rgb = T.tensor(rng.random((1, 3, 32, 32)))
    ir = T.tensor(rng.random((1, 1, 32, 32)))
    cfg = model.backbone_config
    targets = assign_targets([[GroundTruthBox(0, 0.4, 0.6, 0.25, 0.3)]], cfg.anchors, cfg.head_strides, (32, 32))

    def loss():
        raw, sr = model.forward(rgb, ir)
        return compute_losses(
            raw, targets, LossWeights(), cfg.anchors, 1, sr, T.concat_channels(rgb, ir), 2
        ).total

    return loss, model.named_parameters()


@pytest.mark.criterion(1, "gradients match central differences")
def test_gradient_suite(note):
    start = time.perf_counter()
    for bits, dtype in ((32, np.float32), (64, np.float64)):
        rng = np.random.default_rng(bits)
        # float32 losses are too coarse for differencing; the reference is
        # taken in float64 at the same (exactly representable) values
        fd = np.float64 if dtype == np.float32 else None
        checked = failed = 0
        worst = 0.0
        with T.default_dtype(dtype):
            for fn in OPS.values():
                t = _op_tensors(rng)
                proj = T.tensor(rng.normal(size=fn(t).shape))
                params = {k: v for k, v in t.items() if v.requires_grad}
                r = gradcheck(lambda: (fn(t) * proj).sum(), params, fd_dtype=fd)
                checked, failed, worst = checked + r.checked, failed + r.failed, max(worst, r.worst)
            loss, params = _composed_loss(rng)
            r = gradcheck(loss, params, samples_per_tensor=20, rng=rng, fd_dtype=fd)
            checked, failed, worst = checked + r.checked, failed + r.failed, max(worst, r.worst)
        rate = 1 - failed / checked
        note(f"{bits}-bit {rate:.4f} of {checked} (worst rel {worst:.1e})")
        assert rate >= 0.999
    elapsed = time.perf_counter() - start
    note(f"{elapsed:.0f}s")
    assert elapsed < 60


# -- 2 ----------------------------------------------------------------------


@pytest.mark.criterion(2, "fusion gates and shapes")
def test_fusion_invariants(note):
    start = time.perf_counter()
    rng = np.random.default_rng(2)
    lo, hi = 1.0, 0.0
    for trial in range(20):
        params = FusionParams.init(np.random.default_rng(trial))
        boost = 10.0 ** rng.uniform(-1, 2)
        for tensor_ in params.named_parameters().values():
            tensor_.data = ((tensor_.data + rng.normal(size=tensor_.shape)) * boost).astype(tensor_.dtype)
        h, w = (int(v) for v in rng.integers(4, 40, 2))
        rgb = T.tensor(rng.normal(scale=boost, size=(2, 3, h, w)))
        ir = T.tensor(rng.normal(scale=boost, size=(2, 1, h, w)))
        with np.errstate(over="ignore"):
            fused, tr = meaf_forward(rgb, ir, params, record_trace=True)
            assert fused.shape[2:] == (h, w)
            gates = [tr.attention["rgb"].data, tr.attention["ir"].data, tr.excitation.data]
            lo = min(lo, *(g.min() for g in gates))
            hi = max(hi, *(g.max() for g in gates))

            a, b = scale_modalities(rgb, ir, params.modal)
            outs = []
            for raw, scaled, br in ((rgb, a, params.rgb), (ir, b, params.ir)):
                x2 = refine_features(generate_mask(scaled, br.mask), raw, br.refine_weight, br.refine_bias)
                outs.append(apply_attention(x2, spatial_attention(x2, br.sa_weight, br.sa_bias)))
            again, _ = channel_excitation_fuse(*outs, params.fc1_weight, params.fc1_bias,
                                               params.fc2_weight, params.fc2_bias)
        assert np.array_equal(again.data, fused.data, equal_nan=True)
    elapsed = time.perf_counter() - start
    note(f"smallest gate {lo:.3g}, largest 1 - {1 - hi:.3g}; {elapsed:.1f}s")
    assert 0.0 < lo and hi < 1.0
    assert elapsed < 5


# -- 3 ----------------------------------------------------------------------


@pytest.mark.criterion(3, "SR branch is training-only")
def test_sr_lifecycle(note):
    start = time.perf_counter()
    rng = np.random.default_rng(3)
    model = Detector.build(sr_config=SrBranchConfig(), seed=3)
    stripped = strip_sr(model)
    for _ in range(10):
        rgb, ir = T.tensor(rng.random((1, 3, 64, 64))), T.tensor(rng.random((1, 1, 64, 64)))
        a, sr = model.forward(rgb, ir)
        b, none = stripped.forward(rgb, ir)
        assert sr is not None and none is None
        assert all(np.array_equal(x.data, y.data) for x, y in zip(a.maps, b.maps))
    x = T.tensor(rng.random((2, 4, 64, 64)))
    zero = sr_loss(T.resize_spatial(x, 2, "down_avg"), x, 2).item()
    full, small = len(checkpoint_bytes(model)), len(checkpoint_bytes(stripped))
    elapsed = time.perf_counter() - start
    note(f"checkpoint {full} -> {small} bytes; {elapsed:.1f}s")
    assert zero == 0.0 and small < full
    assert elapsed < 10


# -- 4 ----------------------------------------------------------------------

ANCHORS = ((12.0,), (32.0,), (80.0,))
STRIDES = (8, 16, 32)


def _random_case(rng, k=1):
    maps = [T.tensor(rng.normal(scale=2, size=(2, 5 + k, 64 // s, 64 // s)), dtype=np.float64) for s in STRIDES]
    gts = []
    for _ in range(2):
        n = int(rng.integers(1, 4))
        gts.append([GroundTruthBox(int(rng.integers(0, k)), *rng.uniform(0.1, 0.9, 2), *(rng.uniform(3, 60, 2) / 64))
                    for _ in range(n)])
    return RawPrediction(maps, STRIDES), assign_targets(gts, ANCHORS, STRIDES, (64, 64))


@pytest.mark.criterion(4, "loss algebra")
def test_loss_algebra(note):
    rng = np.random.default_rng(4)
    worst_id = worst_h = 0.0
    for _ in range(20):
        raw, t = _random_case(rng, k=2)
        w = LossWeights(c1=float(rng.uniform(0.1, 2)), c2=float(rng.uniform(0.1, 2)))
        x = T.tensor(rng.random((2, 4, 64, 64)), dtype=np.float64)
        s = T.tensor(rng.random((2, 4, 32, 32)), dtype=np.float64)
        rep = compute_losses(raw, t, w, ANCHORS, 2, s, x, 2)
        terms = sum(rep.obj_terms) + sum(rep.loc_terms) + sum(rep.cls_terms)
        det, tot = rep.detection.item(), rep.total.item()
        worst_id = max(worst_id, abs(det - terms) / det,
                       abs(tot - (w.c1 * det + w.c2 * rep.sr.item())) / tot)
        k = float(10 ** rng.uniform(-2, 2))
        base, _ = detection_loss(raw, t, LossWeights(), ANCHORS, 2)
        scaled, _ = detection_loss(raw, t, LossWeights().scaled(k), ANCHORS, 2)
        worst_h = max(worst_h, abs(scaled.item() - k * base.item()) / (k * base.item()))
    ln2 = T.bce_with_logits(T.tensor(np.zeros(9)), rng.integers(0, 2, 9).astype(float)).mean().item()
    note(f"identities {worst_id:.1e}, homogeneity {worst_h:.1e}, BCE(0) - ln2 {abs(ln2 - math.log(2)):.1e}")
    assert worst_id <= 1e-6 and worst_h <= 1e-7 and abs(ln2 - math.log(2)) <= 1e-6


# -- 5 ----------------------------------------------------------------------


def _sweep_ap(scores, tp, num_gt):
    """Recompute P/R from scratch at every distinct threshold, take the best
    precision at any recall >= r, and integrate over recall."""
    pts = []
    for th in sorted(set(scores.tolist()), reverse=True):
        keep = scores >= th
        hits = int(tp[keep].sum())
        pts.append((hits / num_gt, hits / int(keep.sum())))
    ap, prev = 0.0, 0.0
    for r, _ in pts:
        ap += (r - prev) * max(p for rr, p in pts if rr >= r)
        prev = r
    return ap


@pytest.mark.criterion(5, "AP against a threshold sweep")
def test_metric_oracle(note):
    start = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        scores = np.sort(rng.random(20))[::-1]
        tp = np.zeros(20, dtype=bool)
        tp[rng.choice(20, int(rng.integers(0, 11)), replace=False)] = True
        ap = average_precision(pr_curve(ClassMatches(scores, tp, 10)))
        worst = max(worst, abs(ap - _sweep_ap(scores, tp, 10)))
    pr, re = precision_recall(MatchCounts(tp=8, fp=2, fn=2))
    elapsed = time.perf_counter() - start
    note(f"max |AP diff| {worst:.1e}; P/R {pr}/{re}; {elapsed:.2f}s")
    assert worst <= 1e-9 and (pr, re) == (0.8, 0.8) and elapsed < 10


# -- training runs --------------------------------------------------------


def _run(seed, steps, **over):
    cfg = parse_config("", {"train.max_steps": str(steps), "train.seed": str(seed), "synth.seed": str(seed),
                            **{k.replace("__", "."): str(v) for k, v in over.items()}})
    pairs = generate_synthetic(cfg.synth, 16)
    res = train(cfg, pairs)
    totals = [row[1] for row in res.rows]
    return totals, evaluate_model(res.model, pairs, 0.25).map50


@pytest.mark.criterion(6, "overfit 16 images")
def test_overfit(note):
    start = time.perf_counter()
    totals, m = _run(0, OVERFIT_STEPS)
    ratio = float(np.mean(totals[-EPOCH_STEPS:])) / totals[0]
    elapsed = time.perf_counter() - start
    note(f"final/first loss {ratio:.3f}, mAP50 {m:.3f}, {elapsed:.0f}s")
    assert ratio <= 0.10 and m >= 0.90 and elapsed <= 600


MIXED = {"synth__visibility": "rgb_only,ir_only,both", "synth__visibility_weights": "0.4,0.4,0.2"}


@pytest.mark.criterion(7, "fusion beats either modality alone")
def test_fusion_beats_unimodal(note):
    start = time.perf_counter()
    scores = {m: _run(0, OVERFIT_STEPS, train__modality=m, **MIXED)[1] for m in ("fused", "rgb", "ir")}
    margin = scores["fused"] - max(scores["rgb"], scores["ir"])
    elapsed = time.perf_counter() - start
    note(", ".join(f"{k} {v:.3f}" for k, v in scores.items()) + f"; margin {margin:.3f}, {elapsed:.0f}s")
    assert margin >= 0.10 and elapsed <= 1800


@pytest.mark.criterion(8, "byte-identical reruns")
def test_determinism(tmp_path, note):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("train.max_steps = 6\n")
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["synth", "--spec", str(cfg), "--count", "6", "--out", str(d / "data")]) == 0
        assert main(["train", "--config", str(cfg), "--data", str(d / "data"), "--out", str(d / "m.ckpt")]) == 0
        assert main(["eval", "--ckpt", str(d / "m.ckpt"), "--data", str(d / "data"), "--out", str(d / "eval")]) == 0
    names = ["m.ckpt", "m.loss.csv", "eval/report.txt", "eval/pr_0.csv", "eval/f1.csv"]
    same = [(tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in names]
    note(f"{sum(same)}/{len(names)} files identical")
    assert all(same)


@pytest.mark.criterion(9, "SR branch helps (directional)")
def test_sr_helps(note):
    with_sr = [_run(s, SHORT_STEPS)[1] for s in range(5)]
    without = [_run(s, SHORT_STEPS, train__sr="false")[1] for s in range(5)]
    a, b = float(np.median(with_sr)), float(np.median(without))
    note(f"median mAP50 SR {a:.3f} vs no-SR {b:.3f}")
    assert a >= b
