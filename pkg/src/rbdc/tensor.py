"""Dense tensors with tape-based reverse-mode differentiation.

Values live in numpy arrays (float32 or float64). Operations executed inside
an active :class:`GradientTape` are recorded together with a closure that maps
the output gradient to input gradients; :func:`backward` replays the tape in
reverse.

All reductions (sums, means, the contraction inside ``matmul``) go through
:func:`fold_sum`, which halves the reduced axis repeatedly and adds element
``k`` to element ``k + n/2``. Every output element therefore sees the same
sequence of IEEE additions no matter where it sits in the array, and swapping
the two halves of an even-length axis gives bit-identical sums because the
first addition is commutative. The coupling verifiers rely on both facts.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError, StateError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

# products materialised per matmul chunk
_MATMUL_CHUNK = 1 << 22

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "GradientTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


# ---------------------------------------------------------------------------
# deterministic numpy kernels


def fold_sum(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Sum ``x`` over ``axis`` by repeated folding (see module docstring)."""
    x = np.asarray(x)
    axis = axis % x.ndim
    n = x.shape[axis]
    if n == 0:
        shape = x.shape[:axis] + x.shape[axis + 1:]
        return np.zeros(shape, dtype=x.dtype)

    def sl(start, stop):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        return tuple(idx)

    while n > 1:
        half = n // 2
        folded = x[sl(0, half)] + x[sl(half, 2 * half)]
        if n % 2:
            folded = np.concatenate([folded, x[sl(2 * half, n)]], axis=axis)
        x = folded
        n = half + n % 2
    return np.take(x, 0, axis=axis)


def fold_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with the contraction reduced by :func:`fold_sum`.

    ``a`` is (..., M, K); ``b`` is (K, N) or (..., K, N) with the same leading
    dims as ``a``.
    """
    M, K = a.shape[-2:]
    N = b.shape[-1]
    lead = a.shape[:-2]
    batch = int(np.prod(lead)) if lead else 1
    per_row = max(1, batch * K * N)
    rows = max(1, _MATMUL_CHUNK // per_row)
    if rows >= M:
        return fold_sum(a[..., :, :, None] * b[..., None, :, :], axis=-2)
    parts = []
    for start in range(0, M, rows):
        chunk = a[..., start:start + rows, :]
        parts.append(fold_sum(chunk[..., :, :, None] * b[..., None, :, :], axis=-2))
    return np.concatenate(parts, axis=-2)


# ---------------------------------------------------------------------------
# Tensor and tape


class Tensor:
    """An n-dimensional float array that can take part in differentiation.

    Tensors are treated as immutable values; only optimizers and batch-norm
    running statistics replace ``data`` wholesale.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division is only supported by scalars")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradientTape:
    """Ordered record of executed operations.

    Use as a context manager; operations on tensors that require gradients are
    recorded while the tape is active. A tape can be replayed exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    @property
    def ops(self) -> list[str]:
        return [node.op for node in self.nodes]

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        if self.consumed:
            raise StateError("cannot record on a consumed tape")
        self.nodes.append(_Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, params: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        return backward(loss, self, params)


def backward(loss: Tensor, tape: GradientTape, params: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to ``params``.

    When ``params`` is None every leaf tensor reached by the tape that requires
    gradients is returned. Parameters the loss does not depend on get zeros.
    """
    if tape.consumed:
        raise StateError("gradient tape already consumed")
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.output) for node in tape.nodes}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if id(inp) not in produced:
                leaves[id(inp)] = inp
            prev = grads.get(id(inp))
            grads[id(inp)] = gi if prev is None else prev + gi

    if params is None:
        return {t: grads[key] for key, t in leaves.items()}
    out = {}
    for p in params:
        g = grads.get(id(p))
        out[p] = np.zeros_like(p.data) if g is None else g
    return out


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"non-finite value produced by {op}")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(op, inputs, out, grad_fn)
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back onto the trailing-dims operand shape."""
    if g.shape == shape:
        return g
    trailing = tuple(shape)
    while trailing and trailing[0] == 1:
        trailing = trailing[1:]
    flat = g.reshape((-1,) + trailing) if trailing else g.reshape(-1)
    return fold_sum(flat, axis=0).reshape(shape)


def _conform(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.size == 1 and b.ndim <= 1:
        return
    trailing = b.shape
    while trailing and trailing[0] == 1:
        trailing = trailing[1:]
    if len(trailing) <= a.ndim and a.shape[a.ndim - len(trailing):] == trailing:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _order(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor, bool]:
    """Put the full-shaped operand first for broadcasting ops."""
    if a.size < b.size or (a.size == b.size and a.ndim < b.ndim):
        return b, a, True
    return a, b, False


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    big, small, _ = _order(a, b)
    _conform(big, small, "add")
    data = big.data + small.data.astype(big.dtype, copy=False)

    def grad_fn(g):
        gs = _reduce_to(g, small.shape) if small.requires_grad else None
        return (g, gs) if big is a else (gs, g)

    return _emit("add", data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    big, small, _ = _order(a, b)
    _conform(big, small, "mul")
    sd = small.data.astype(big.dtype, copy=False)
    data = big.data * sd

    def grad_fn(g):
        g_big = g * sd
        g_small = _reduce_to(g * big.data, small.shape) if small.requires_grad else None
        return (g_big, g_small) if big is a else (g_small, g_big)

    return _emit("mul", data, (a, b), grad_fn)


def matmul(a, b) -> Tensor:
    """Matrix product; ``b`` is 2-D or shares all leading dims with ``a``."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    K = a.shape[-1]
    if b.ndim == 2:
        a2 = a.data.reshape(-1, K)
        data = fold_matmul(a2, b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    else:
        data = fold_matmul(a.data, b.data)

    def grad_fn(g):
        ga = fold_matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = fold_matmul(a.data.reshape(-1, K).T, g.reshape(-1, b.shape[-1]))
            else:
                gb = fold_matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _emit("matmul", data, (a, b), grad_fn)


def elementwise_and_matmul(a, b, kind: str) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` or ``matmul``."""
    ops = {"add": add, "sub": sub, "mul": mul, "matmul": matmul}
    if kind not in ops:
        raise ValueError(f"unknown kind {kind!r}")
    return ops[kind](a, b)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = (x.data * cdf).astype(x.dtype)

    def grad_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _emit("gelu", data, (x,), grad_fn)


def exp(x: Tensor) -> Tensor:
    data = np.exp(x.data)
    return _emit("exp", data, (x,), lambda g: (g * data,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log of non-positive value")
    return _emit("log", np.log(x.data), (x,), lambda g: (g / x.data,))


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    if axis is None:
        data = fold_sum(x.data.reshape(-1), axis=0)
        return _emit("sum", np.asarray(data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    axis = axis % x.ndim
    data = fold_sum(x.data, axis=axis)
    return _emit("sum", data, (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.expand_dims(fold_sum(e, axis=axis), axis)

    def grad_fn(g):
        dot = np.expand_dims(fold_sum(g * y, axis=axis), axis)
        return (y * (g - dot),)

    return _emit("softmax", y, (x,), grad_fn)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of (B, C) logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError("cross_entropy: label out of range")
    B = logits.shape[0]
    shifted = logits.data - np.max(logits.data, axis=1, keepdims=True)
    e = np.exp(shifted)
    z = fold_sum(e, axis=1)
    logp = shifted - np.log(z)[:, None]
    picked = logp[np.arange(B), labels]
    data = np.asarray(-fold_sum(picked, axis=0) / B, dtype=logits.dtype)

    def grad_fn(g):
        p = e / z[:, None]
        p[np.arange(B), labels] -= 1.0
        return (p * (g / B),)

    return _emit("cross_entropy", data, (logits,), grad_fn)


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = x.data.reshape(shape)
    return _emit("reshape", data, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(x.ndim))[::-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(np.transpose(x.data, axes))
    return _emit("transpose", data, (x,), lambda g: (np.transpose(g, inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", data, tuple(tensors), grad_fn)


def index(x: Tensor, key) -> Tensor:
    data = np.array(x.data[key], dtype=x.dtype)

    def grad_fn(g):
        out = np.zeros_like(x.data)
        out[key] = g
        return (out,)

    return _emit("index", data, (x,), grad_fn)


def repeat_batch(x: Tensor, n: int) -> Tensor:
    """Tile a (1, ...) tensor to (n, ...)."""
    if x.shape[0] != 1:
        raise ShapeError(f"repeat_batch expects a leading dim of 1, got {x.shape}")
    data = np.repeat(x.data, n, axis=0)
    return _emit("repeat_batch", data, (x,), lambda g: (fold_sum(g, axis=0)[None],))


# ---------------------------------------------------------------------------
# fused layer kernels


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6, groups: int = 1) -> Tensor:
    """Normalise the last axis, optionally in ``groups`` independent slices."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}/{beta.shape} vs features {D}")
    if D % groups:
        raise ShapeError(f"layer_norm: {D} features not divisible into {groups} groups")
    n = D // groups
    xg = x.data.reshape(x.shape[:-1] + (groups, n))
    mu = fold_sum(xg, axis=-1)[..., None] / n
    xc = xg - mu
    var = fold_sum(xc * xc, axis=-1)[..., None] / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    data = (xhat * gamma.data + beta.data).astype(x.dtype)

    def grad_fn(g):
        flat_g = g.reshape(-1, D)
        g_gamma = fold_sum(flat_g * xhat.reshape(-1, D), axis=0) if gamma.requires_grad else None
        g_beta = fold_sum(flat_g, axis=0) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = (g * gamma.data).reshape(xg.shape)
            xh = xhat.reshape(xg.shape)
            m1 = fold_sum(gh, axis=-1)[..., None] / n
            m2 = fold_sum(gh * xh, axis=-1)[..., None] / n
            gx = (inv * (gh - m1 - xh * m2)).reshape(x.shape)
        return gx, g_gamma, g_beta

    return _emit("layer_norm", data, (x, gamma, beta), grad_fn)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor | None,
               running_var: Tensor | None, train: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalisation of (N, C) or (N, C, H, W) input.

    In train mode batch statistics are used and the running statistics are
    updated in place (unbiased variance); in eval mode the stored running
    statistics are used and the layer is a fixed affine map.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: affine shapes {gamma.shape}/{beta.shape} vs channels {C}")
    moved = np.moveaxis(x.data, 1, -1)
    flat = moved.reshape(-1, C)
    m = flat.shape[0]
    shape = (1, C) + (1,) * (x.ndim - 2)

    if train:
        mu = fold_sum(flat, axis=0) / m
        xc = flat - mu
        var = fold_sum(xc * xc, axis=0) / m
        if running_mean is not None and running_var is not None:
            unbiased = var * (m / (m - 1)) if m > 1 else var
            running_mean.data = ((1 - momentum) * running_mean.data + momentum * mu).astype(running_mean.dtype)
            running_var.data = ((1 - momentum) * running_var.data + momentum * unbiased).astype(running_var.dtype)
    else:
        if running_mean is None or running_var is None:
            raise StateError("batch_norm in eval mode needs running statistics")
        mu = running_mean.data
        var = running_var.data
        xc = flat - mu
    inv = 1.0 / np.sqrt(var + eps)
    xhat_flat = xc * inv
    xhat = np.moveaxis(xhat_flat.reshape(moved.shape), -1, 1)
    data = (xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)).astype(x.dtype)

    def grad_fn(g):
        gflat = np.moveaxis(g, 1, -1).reshape(-1, C)
        g_gamma = fold_sum(gflat * xhat_flat, axis=0)
        g_beta = fold_sum(gflat, axis=0)
        gh = gflat * gamma.data
        if train:
            m1 = fold_sum(gh, axis=0) / m
            m2 = fold_sum(gh * xhat_flat, axis=0) / m
            gx_flat = inv * (gh - m1 - xhat_flat * m2)
        else:
            gx_flat = gh * inv
        gx = np.moveaxis(gx_flat.reshape(moved.shape), -1, 1)
        return gx, g_gamma, g_beta

    return _emit("batch_norm", data, (x, gamma, beta), grad_fn)


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    # (N, Ho, Wo, C, k, k): channel-major contraction order
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (O, C, k, k) kernels."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    O, Ci, k, k2 = w.shape
    if Ci != C or k != k2:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit input {x.shape}")
    if b is not None and b.shape != (O,):
        raise ShapeError(f"conv2d: bias {b.shape} vs {O} output channels")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if xp.shape[2] < k or xp.shape[3] < k:
        raise ShapeError("conv2d: kernel larger than padded input")
    cols = _im2col(xp, k, stride)
    Ho, Wo = cols.shape[1], cols.shape[2]
    cols2 = cols.reshape(N * Ho * Wo, C * k * k)
    wmat = w.data.reshape(O, C * k * k)
    out = fold_matmul(cols2, np.ascontiguousarray(wmat.T))
    if b is not None:
        out = out + b.data
    data = np.ascontiguousarray(out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2))
    inputs = (x, w) if b is None else (x, w, b)

    def grad_fn(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        gw = fold_matmul(np.ascontiguousarray(g2.T), cols2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = fold_matmul(g2, wmat).reshape(N, Ho, Wo, C, k, k)
            gxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, fold_sum(g2, axis=0)

    return _emit("conv2d", data, inputs, grad_fn)
