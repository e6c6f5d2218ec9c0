"""Minimal dense tensor library with tape-based reverse-mode differentiation.

Every forward op computes its result with numpy and, when a :class:`ComputeTape`
is active and at least one input requires a gradient, appends a node holding a
closure that maps the output gradient to input gradients. :func:`backward`
replays those nodes in reverse.

    >>> x = tensor([1.0, 2.0], requires_grad=True)
    >>> with ComputeTape() as tape:
    ...     y = (x * x).sum()
    >>> backward(tape, y)
    >>> x.grad
    array([2., 4.], dtype=float32)
"""
from __future__ import annotations

import contextlib
import enum
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ActivationKind",
    "ComputeTape",
    "tensor",
    "zeros",
    "ones",
    "get_default_dtype",
    "set_default_dtype",
    "default_dtype",
    "backward",
    "conv2d",
    "activation",
    "relu",
    "sigmoid",
    "silu",
    "channel_stats",
    "global_avg_pool",
    "fully_connected",
    "concat_channels",
    "split_channels",
    "elementwise",
    "resize_spatial",
    "bce_with_logits",
    "exp",
    "clamp",
    "absolute",
    "maximum",
    "minimum",
    "kaiming_uniform",
    "no_grad",
    "named_parameters",
]

_state = threading.local()
_DEFAULT_DTYPE = [np.dtype(np.float32)]


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE[0]


def set_default_dtype(dtype) -> None:
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE[0] = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors (64-bit gradient checks)."""
    old = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class ActivationKind(enum.Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"
    SILU = "silu"
    IDENTITY = "identity"


class Tensor:
    """Dense float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    # make ``ndarray <op> Tensor`` defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else get_default_dtype())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # arithmetic with full numpy broadcasting
    def __add__(self, other):
        return _add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -_as_tensor(other, self))

    def __rsub__(self, other):
        return _add(_as_tensor(other, self), -self)

    def __mul__(self, other):
        return _mul(self, _as_tensor(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _div(self, _as_tensor(other, self))

    def __rtruediv__(self, other):
        return _div(_as_tensor(other, self), self)

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return _sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _sum(self, axis, keepdims)
        count = self.size // max(out.size, 1) if axis is not None else self.size
        return out * (1.0 / max(count, 1))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return _unary(self, self.data.reshape(shape), lambda g: g.reshape(src))

    def transpose(self, *axes) -> "Tensor":
        axes = tuple(axes[0]) if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes
        inv = np.argsort(axes)
        return _unary(self, self.data.transpose(axes), lambda g: g.transpose(inv))


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def zeros(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_default_dtype()), requires_grad, name)


def ones(shape, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.ones(shape, dtype=get_default_dtype()), requires_grad, name)


def kaiming_uniform(shape, rng: np.random.Generator, name: str | None = None) -> Tensor:
    """He-uniform init with ReLU gain: bound = sqrt(6 / fan_in)."""
    fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
    bound = np.sqrt(6.0 / max(fan_in, 1))
    data = rng.uniform(-bound, bound, size=shape).astype(get_default_dtype())
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.dtype)


# ---------------------------------------------------------------------------
# Tape


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class ComputeTape:
    """Ordered record of differentiable ops executed while the tape is active.

    Tapes are thread-confined; nesting is allowed and the innermost tape records.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._produced: dict[int, int] = {}

    def __enter__(self) -> "ComputeTape":
        stack = getattr(_state, "tapes", None)
        if stack is None:
            stack = _state.tapes = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.tapes.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> None:
        self._produced[id(out)] = len(self.nodes)
        self.nodes.append(_Node(out, tuple(parents), backward_fn))

    def produced(self, t: Tensor) -> bool:
        idx = self._produced.get(id(t))
        return idx is not None and self.nodes[idx].out is t


def _active_tape() -> ComputeTape | None:
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on this thread."""
    stack = getattr(_state, "tapes", None)
    saved = list(stack) if stack else []
    _state.tapes = []
    try:
        yield
    finally:
        _state.tapes = saved


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, backward_fn)
    return out


def backward(tape: ComputeTape, loss: Tensor) -> None:
    """Propagate d(loss)/d(.) through ``tape``.

    Leaf tensors (not produced on the tape) accumulate into ``.grad`` until
    zeroed; intermediate tensors get their gradient for this pass assigned.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss tensor was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g
        parent_grads = node.backward_fn(g)
        for p, pg in zip(node.parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
                seen[key] = p
    for key, g in grads.items():
        leaf = seen[key]
        g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _unary(x: Tensor, data: np.ndarray, fn: Callable) -> Tensor:
    return _make(data, (x,), lambda g: (fn(g),))


def _add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    return _make(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape))
    )


def _div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return _unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)

    return _make(out, (a, b), back)


def _sum(x: Tensor, axis, keepdims: bool) -> Tensor:
    data = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(data), (x,), back)


def _getitem(x: Tensor, index) -> Tensor:
    data = x.data[index]
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(data), (x,), back)


# ---------------------------------------------------------------------------
# Forward ops


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-D cross-correlation with zero padding, NCHW layout."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ValueError(f"input has {cin} channels but weight expects {wcin}")
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"stride must be a positive int, got {stride!r}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"kernel sizes must be odd, got {kh}x{kw}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(f"input {h}x{w} (padding {padding}) smaller than kernel {kh}x{kw}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match {cout} output channels")

    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    wmat = weight.data.reshape(cout, -1)

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        cols = xs.transpose(0, 2, 3, 1).reshape(-1, cin)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
        # (N, C, Ho, Wo, kh, kw) -> (N*Ho*Wo, C*kh*kw)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)

    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)

    def back(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat
            if kh == 1 and kw == 1 and padding == 0:
                gxs = gcols.reshape(n, ho, wo, cin).transpose(0, 3, 1, 2)
                if stride > 1:
                    gx = np.zeros(x.shape, dtype=x.dtype)
                    gx[:, :, ::stride, ::stride] = gxs
                else:
                    gx = np.ascontiguousarray(gxs)
            else:
                gcols = gcols.reshape(n, ho, wo, cin, kh, kw)
                gxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                            gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
                gx = gxp[:, :, padding : padding + h, padding : padding + w]
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back)


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    # keep the open interval even where the float type saturates
    fi = np.finfo(out.dtype)
    return np.clip(out, fi.tiny, 1.0 - fi.epsneg, out=out)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _unary(x, np.where(mask, x.data, 0).astype(x.dtype), lambda g: g * mask)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _unary(x, s, lambda g: g * s * (1 - s))


def silu(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    out = x.data * s
    return _unary(x, out, lambda g: g * (s + out * (1 - s)))


def activation(x: Tensor, kind: ActivationKind | str) -> Tensor:
    kind = ActivationKind(kind) if not isinstance(kind, ActivationKind) else kind
    if kind is ActivationKind.RELU:
        return relu(x)
    if kind is ActivationKind.SIGMOID:
        return sigmoid(x)
    if kind is ActivationKind.SILU:
        return silu(x)
    return _unary(x, x.data, lambda g: g)


def channel_stats(x: Tensor) -> Tensor:
    """Per-pixel channel mean (out channel 0) and channel max (out channel 1)."""
    if x.ndim != 4 or x.shape[1] < 1:
        raise ValueError(f"channel_stats expects [N,C,H,W] with C >= 1, got {x.shape}")
    c = x.shape[1]
    avg = x.data.mean(axis=1, keepdims=True)
    idx = x.data.argmax(axis=1)[:, None]
    mx = np.take_along_axis(x.data, idx, axis=1)
    out = np.concatenate([avg, mx], axis=1)

    def back(g):
        gx = np.broadcast_to(g[:, :1] / c, x.shape).copy()
        sel = np.zeros(x.shape, dtype=x.dtype)
        np.put_along_axis(sel, idx, g[:, 1:2], axis=1)
        return (gx + sel,)

    return _make(out, (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] * x.shape[3] < 1:
        raise ValueError(f"global_avg_pool expects non-empty [N,C,H,W], got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3))
    return _unary(x, out, lambda g: np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy())


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"fully_connected shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        return g @ weight.data, g.T @ x.data, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Channel concatenation; channels of ``a`` come first."""
    if a.ndim != 4 or b.ndim != 4:
        raise ValueError("concat_channels expects 4-D tensors")
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ValueError(f"cannot concat {a.shape} and {b.shape}: batch/spatial dims differ")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data.astype(a.dtype, copy=False)], axis=1)
    return _make(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def split_channels(x: Tensor, at: int) -> tuple[Tensor, Tensor]:
    if not 0 <= at <= x.shape[1]:
        raise ValueError(f"split index {at} outside 0..{x.shape[1]}")
    return x[:, :at], x[:, at:]


def elementwise(a: Tensor, b: Tensor, mode: str) -> Tensor:
    """``add`` or ``mul`` with the broadcast rules the fusion module needs.

    ``b`` may match ``a`` exactly, be a single-channel spatial map ``[N,1,H,W]``,
    or a per-channel vector ``[N,C]`` that is spread over the spatial dims.
    """
    if a.ndim == 4 and b.ndim == 2:
        if b.shape != a.shape[:2]:
            raise ValueError(f"per-channel operand {b.shape} does not match {a.shape}")
        b = b.reshape(b.shape[0], b.shape[1], 1, 1)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"cannot broadcast {b.shape} onto {a.shape}") from exc
    if shape != a.shape:
        raise ValueError(f"operand {b.shape} would enlarge {a.shape}")
    if mode == "add":
        return _add(a, b)
    if mode == "mul":
        return _mul(a, b)
    raise ValueError(f"unknown elementwise mode {mode!r}")


def resize_spatial(x: Tensor, factor: int, direction: str) -> Tensor:
    """Nearest-neighbour upsampling or block-average downsampling by an integer factor."""
    if factor < 1:
        raise ValueError(f"factor must be positive, got {factor}")
    n, c, h, w = x.shape
    if factor == 1:
        return _unary(x, x.data.copy(), lambda g: g)
    f = factor
    if direction == "up_nearest":
        out = x.data.repeat(f, axis=2).repeat(f, axis=3)
        return _unary(x, out, lambda g: g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)))
    if direction == "down_avg":
        if h % f or w % f:
            raise ValueError(f"spatial size {h}x{w} not divisible by {f}")
        out = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))
        inv = 1.0 / (f * f)
        return _unary(x, out, lambda g: (g * inv).repeat(f, axis=2).repeat(f, axis=3))
    raise ValueError(f"unknown resize direction {direction!r}")


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits (targets are constants)."""
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=logits.dtype)
    x = logits.data
    out = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    s = _sigmoid_np(x)
    return _unary(logits, out.astype(x.dtype, copy=False), lambda g: g * (s - t))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _unary(x, e, lambda g: g * e)


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x.data >= lo
    if hi is not None:
        inside &= x.data <= hi
    return _unary(x, out, lambda g: g * inside)


def absolute(x: Tensor) -> Tensor:
    sgn = np.sign(x.data)
    return _unary(x, np.abs(x.data), lambda g: g * sgn)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    pick = a.data >= b.data
    out = np.where(pick, a.data, b.data)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)),
    )


def minimum(a: Tensor, b: Tensor) -> Tensor:
    pick = a.data <= b.data
    out = np.where(pick, a.data, b.data)
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * pick, a.shape), _unbroadcast(g * ~pick, b.shape)),
    )


def named_parameters(obj, prefix: str = "") -> dict[str, Tensor]:
    """Flatten a (possibly nested) dataclass of tensors into ``{dotted.name: tensor}``.

    Lists and tuples are indexed numerically; ``None`` fields are skipped.
    """
    import dataclasses

    out: dict[str, Tensor] = {}

    def walk(node, name):
        if node is None:
            return
        if isinstance(node, Tensor):
            out[name] = node
        elif dataclasses.is_dataclass(node):
            for f in dataclasses.fields(node):
                if f.metadata.get("param", True):
                    walk(getattr(node, f.name), f"{name}.{f.name}" if name else f.name)
        elif isinstance(node, (list, tuple)):
            for i, item in enumerate(node):
                walk(item, f"{name}.{i}" if name else str(i))

    walk(obj, prefix)
    return out
