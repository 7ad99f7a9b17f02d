"""Differentiable layers built from :mod:`rbdc.tensor` primitives."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``y = x W^T + b`` over the last axis; ``weight`` is (d_out, d_in)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not fit weight {weight.shape}")
    y = T.matmul(x, T.transpose(weight))
    return y if bias is None else y + bias


def attention_heads(x: Tensor, qkv_weight: Tensor, qkv_bias: Tensor, heads: int,
                    taps: dict | None = None) -> Tensor:
    """Multi-head scaled dot-product attention up to (not including) the output projection.

    The packed projection has rows ``[Q; K; V]``, each ``heads * head_dim``
    rows long with head ``h`` occupying rows ``h*head_dim:(h+1)*head_dim``.
    Returns the concatenated head outputs, shape (B, T, width).
    """
    B, N, D = x.shape
    if D % heads:
        raise ShapeError(f"attention: width {D} not divisible by {heads} heads")
    hd = D // heads
    qkv = linear(x, qkv_weight, qkv_bias)
    qkv = T.transpose(T.reshape(qkv, (B, N, 3, heads, hd)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (hd ** -0.5)
    attn = T.softmax(scores, axis=-1)
    if taps is not None:
        taps.setdefault("attn", []).append(attn.data)
    out = T.matmul(attn, v)
    return T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, N, D))


def attention(x: Tensor, qkv_weight: Tensor, qkv_bias: Tensor, proj_weight: Tensor,
              proj_bias: Tensor, heads: int, taps: dict | None = None) -> Tensor:
    return linear(attention_heads(x, qkv_weight, qkv_bias, heads, taps), proj_weight, proj_bias)


def global_avg_pool(x: Tensor) -> Tensor:
    N, C = x.shape[:2]
    return T.mean(T.reshape(x, (N, C, -1)), axis=-1)


def patch_embed(x: Tensor, weight: Tensor, bias: Tensor, patch: int) -> Tensor:
    """Non-overlapping patch projection: (N, C, H, W) -> (N, patches, width)."""
    y = T.conv2d(x, weight, bias, stride=patch)
    N, D = y.shape[:2]
    return T.transpose(T.reshape(y, (N, D, -1)), (0, 2, 1))


def _p(params, key):
    if key not in params:
        raise ShapeError(f"missing parameter {key!r}")
    return params[key]


def layer_semantics(kind: str, inputs, params: dict, mode: str = "train", **options) -> Tensor:
    """Apply one layer by name; ``mode`` only matters for batch norm.

    ``kind`` is one of linear, head, conv, layer_norm, batch_norm, attention,
    relu, gelu, softmax, avg_pool, patch_embed.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs))
    if kind in ("linear", "head"):
        return linear(x, _p(params, "weight"), params.get("bias"))
    if kind == "conv":
        return T.conv2d(x, _p(params, "weight"), params.get("bias"),
                        stride=options.get("stride", 1), padding=options.get("padding", 0))
    if kind == "layer_norm":
        return T.layer_norm(x, _p(params, "weight"), _p(params, "bias"),
                            eps=options.get("eps", 1e-6), groups=options.get("groups", 1))
    if kind == "batch_norm":
        return T.batch_norm(x, _p(params, "weight"), _p(params, "bias"),
                            params.get("running_mean"), params.get("running_var"),
                            train=mode == "train", momentum=options.get("momentum", 0.1),
                            eps=options.get("eps", 1e-5))
    if kind == "attention":
        return attention(x, _p(params, "qkv.weight"), _p(params, "qkv.bias"),
                         _p(params, "proj.weight"), _p(params, "proj.bias"), options["heads"])
    if kind == "relu":
        return T.relu(x)
    if kind == "gelu":
        return T.gelu(x)
    if kind == "softmax":
        return T.softmax(x, axis=options.get("axis", -1))
    if kind == "avg_pool":
        return global_avg_pool(x)
    if kind == "patch_embed":
        return patch_embed(x, _p(params, "weight"), _p(params, "bias"), options["patch"])
    raise ValueError(f"unknown layer kind {kind!r}")
