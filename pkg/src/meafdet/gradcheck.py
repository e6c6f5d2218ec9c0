"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from contextlib import nullcontext as _nullcontext
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .tensor import ComputeTape, Tensor, backward, default_dtype, no_grad

__all__ = ["GradCheckResult", "numeric_grad", "gradcheck", "DEFAULT_TOLERANCES"]

# dtype -> (finite-difference step, relative tolerance)
DEFAULT_TOLERANCES = {
    np.dtype(np.float32): (1e-3, 1e-2),
    np.dtype(np.float64): (1e-5, 1e-4),
}


@dataclass
class GradCheckResult:
    checked: int
    failed: int
    worst: float
    failures: list[tuple[str, tuple, float, float]]

    @property
    def pass_rate(self) -> float:
        return 1.0 if self.checked == 0 else 1.0 - self.failed / self.checked


def numeric_grad(loss_fn: Callable[[], Tensor], t: Tensor, index: tuple, eps: float) -> float:
    """d loss / d t[index] by central differences (``t`` is restored afterwards)."""
    orig = t.data[index].copy()
    with no_grad():
        t.data[index] = orig + eps
        up = float(np.float64(loss_fn().data).sum())
        t.data[index] = orig - eps
        down = float(np.float64(loss_fn().data).sum())
    t.data[index] = orig
    return (up - down) / (2 * eps)


def gradcheck(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    samples_per_tensor: int | None = 8,
    eps: float | None = None,
    rtol: float | None = None,
    min_grad: float = 1e-8,
    rng: np.random.Generator | None = None,
    fd_dtype=None,
) -> GradCheckResult:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|)``;
    elements whose gradients are both below ``min_grad`` are skipped. Each
    tensor's ``.data`` is perturbed in place, so it must be writable.

    With ``fd_dtype=np.float64`` the analytic pass runs at the parameters'
    own precision while the differences are taken on a float64 upcast of the
    same values. That is the only way to check float32 gradients: a float32
    loss is quantized far more coarsely than ``eps * grad``. Tolerances
    still follow the analytic dtype.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = None
    with ComputeTape() as tape:
        loss = loss_fn()
    backward(tape, loss)
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for n, p in params.items()}
    tols = {n: DEFAULT_TOLERANCES[p.dtype] for n, p in params.items()}
    picks = {}
    for name, p in params.items():
        flat = np.arange(p.size)
        if samples_per_tensor is not None and p.size > samples_per_tensor:
            flat = rng.choice(p.size, samples_per_tensor, replace=False)
        picks[name] = flat

    originals = {n: p.data for n, p in params.items()}
    if fd_dtype is not None:
        for p in params.values():
            p.data = p.data.astype(fd_dtype)
    checked = failed = 0
    worst = 0.0
    failures = []
    try:
        with default_dtype(fd_dtype) if fd_dtype is not None else _nullcontext():
            for name, p in params.items():
                d_eps = DEFAULT_TOLERANCES[p.dtype][0]
                e = eps if eps is not None else d_eps
                tol = rtol if rtol is not None else tols[name][1]
                for k in picks[name]:
                    idx = np.unravel_index(int(k), p.shape) if p.ndim else ()
                    a = float(analytic[name][idx])
                    n = numeric_grad(loss_fn, p, idx, e)
                    if max(abs(a), abs(n)) < min_grad:
                        continue
                    checked += 1
                    rel = abs(a - n) / max(abs(a), abs(n))
                    worst = max(worst, rel)
                    if rel > tol:
                        failed += 1
                        failures.append((name, tuple(int(i) for i in idx), a, n))
    finally:
        for n, p in params.items():
            p.data = originals[n]
    return GradCheckResult(checked, failed, worst, failures)
