"""A short walk through the tensor layer that everything else is built on.

Run: python3 demos/tensor_tour.py
"""
import numpy as np

from meafdet.gradcheck import gradcheck
from meafdet.tensor import (
    ComputeTape,
    activation,
    backward,
    channel_stats,
    conv2d,
    default_dtype,
    global_avg_pool,
    tensor,
)

rng = np.random.default_rng(0)

# Tensors wrap a numpy array. float32 unless told otherwise.
x = tensor(rng.random((1, 3, 8, 8)), requires_grad=True)
w = tensor(rng.normal(size=(4, 3, 3, 3)) * 0.2, requires_grad=True)
print("x", x.shape, x.dtype)

# A 3x3 "same" convolution keeps the spatial size; stride 2 halves it.
y = conv2d(x, w, padding=1)
print("conv, stride 1:", y.shape, " stride 2:", conv2d(x, w, stride=2, padding=1).shape)

# channel_stats gives the [mean, max] over channels that spatial attention consumes
stats = channel_stats(y)
print("channel stats", stats.shape)

# Gradients are recorded on a tape and replayed backwards.
with ComputeTape() as tape:
    y = activation(conv2d(x, w, padding=1), "silu")
    loss = global_avg_pool(y).sum()
backward(tape, loss)
print("loss", round(loss.item(), 5), "| dL/dw norm", round(float(np.linalg.norm(w.grad)), 5))

# Are those gradients right? Compare with central differences, in float64
# where the differences are accurate enough to be a fair referee.
with default_dtype(np.float64):
    x64 = tensor(rng.random((1, 3, 6, 6)), requires_grad=True)
    w64 = tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    res = gradcheck(lambda: activation(conv2d(x64, w64, padding=1), "sigmoid").sum(), {"x": x64, "w": w64},
                   samples_per_tensor=None)
print(f"gradcheck: {res.checked} elements, {res.failed} off, worst relative error {res.worst:.2e}")

# Sigmoid never hands back exactly 0 or 1, even for absurd logits.
extreme = activation(tensor([-1e4, 0.0, 1e4]), "sigmoid").data
print("sigmoid(-1e4, 0, 1e4) =", extreme, "| strictly inside (0,1):", bool(((extreme > 0) & (extreme < 1)).all()))
