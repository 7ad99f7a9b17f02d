"""Random small problems for every layer kind, used by the gradient checks."""
from __future__ import annotations

import numpy as np

from rbdc import layers as L
from rbdc import tensor as T


def _linear(rng):
    b, i, o = rng.integers(1, 6, size=3)
    return (lambda x, weight, bias: L.layer_semantics("linear", x, {"weight": weight, "bias": bias}),
            {"x": rng.standard_normal((b, i)), "weight": rng.standard_normal((o, i)),
             "bias": rng.standard_normal(o)}, ())


def _head(rng):
    b, i, o = rng.integers(1, 6, size=3)
    return (lambda x, weight, bias: L.layer_semantics("head", x, {"weight": weight, "bias": bias}),
            {"x": rng.standard_normal((b, i)), "weight": rng.standard_normal((o, i)),
             "bias": rng.standard_normal(o)}, ())


def _conv(rng):
    n, c, o = rng.integers(1, 4, size=3)
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    hw = int(rng.integers(k, 6))
    return (lambda x, weight, bias: L.layer_semantics("conv", x, {"weight": weight, "bias": bias},
                                                      stride=stride, padding=pad),
            {"x": rng.standard_normal((n, c, hw, hw)), "weight": rng.standard_normal((o, c, k, k)),
             "bias": rng.standard_normal(o)}, ())


def _layer_norm(rng):
    groups = int(rng.choice([1, 2]))
    # two features per group normalise to +-1, leaving an eps-sized gradient that differences cannot resolve
    d = groups * int(rng.integers(3, 6))
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)), d)
    return (lambda x, weight, bias: L.layer_semantics("layer_norm", x, {"weight": weight, "bias": bias},
                                                      groups=groups),
            {"x": rng.standard_normal(shape), "weight": rng.standard_normal(d) + 1,
             "bias": rng.standard_normal(d)}, ())


def _batch_norm(rng):
    train = bool(rng.integers(0, 2))
    c = int(rng.integers(1, 4))
    # at least three values per channel, for the same reason as in _layer_norm
    shape = (int(rng.integers(3, 6)), c) + ((int(rng.integers(1, 4)),) * 2 if rng.integers(0, 2) else ())
    mean0, var0 = rng.standard_normal(c), rng.uniform(0.5, 2.0, c)

    def fn(x, weight, bias):
        params = {"weight": weight, "bias": bias, "running_mean": T.Tensor(mean0.copy()),
                  "running_var": T.Tensor(var0.copy())}
        return L.layer_semantics("batch_norm", x, params, mode="train" if train else "eval")

    return fn, {"x": rng.standard_normal(shape), "weight": rng.standard_normal(c) + 1,
                "bias": rng.standard_normal(c)}, ()


def _attention(rng):
    heads = int(rng.integers(1, 3))
    hd = int(rng.integers(1, 4))
    d = heads * hd
    b, t = int(rng.integers(1, 3)), int(rng.integers(1, 5))

    def fn(x, qkv_w, qkv_b, proj_w, proj_b):
        return L.layer_semantics("attention", x, {"qkv.weight": qkv_w, "qkv.bias": qkv_b,
                                                  "proj.weight": proj_w, "proj.bias": proj_b}, heads=heads)

    return fn, {"x": rng.standard_normal((b, t, d)), "qkv_w": 0.5 * rng.standard_normal((3 * d, d)),
                "qkv_b": rng.standard_normal(3 * d), "proj_w": rng.standard_normal((d, d)),
                "proj_b": rng.standard_normal(d)}, ()


def _elementwise(kind):
    def case(rng):
        shape = tuple(int(s) for s in rng.integers(1, 5, size=int(rng.integers(1, 4))))
        x = rng.standard_normal(shape)
        if kind == "relu":
            x = np.where(np.abs(x) < 1e-3, 0.5, x)  # stay off the kink
        return (lambda x: L.layer_semantics(kind, x, {})), {"x": x}, ()
    return case


def _avg_pool(rng):
    shape = tuple(int(s) for s in rng.integers(1, 4, size=4))
    return (lambda x: L.layer_semantics("avg_pool", x, {})), {"x": rng.standard_normal(shape)}, ()


def _patch_embed(rng):
    p = int(rng.choice([1, 2]))
    n, c, o = rng.integers(1, 3, size=3)
    hw = p * int(rng.integers(1, 4))
    return (lambda x, weight, bias: L.layer_semantics("patch_embed", x, {"weight": weight, "bias": bias}, patch=p),
            {"x": rng.standard_normal((n, c, hw, hw)), "weight": rng.standard_normal((o, c, p, p)),
             "bias": rng.standard_normal(o)}, ())


def _cross_entropy(rng):
    b, c = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    labels = rng.integers(0, c, size=b)
    return (lambda logits: T.cross_entropy(logits, labels)), {"logits": rng.standard_normal((b, c))}, ()


LAYER_KINDS = {
    "linear": _linear,
    "head": _head,
    "conv": _conv,
    "layer_norm": _layer_norm,
    "batch_norm": _batch_norm,
    "attention": _attention,
    "relu": _elementwise("relu"),
    "gelu": _elementwise("gelu"),
    "softmax": _elementwise("softmax"),
    "avg_pool": _avg_pool,
    "patch_embed": _patch_embed,
    "cross_entropy": _cross_entropy,
}
