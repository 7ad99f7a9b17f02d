"""Width-parameterised model families and their parameter layouts.

Three families are provided:

``mlp``
    flatten -> linear stem (input -> W) -> ReLU -> ``depth`` residual blocks
    ``h + fc2(relu(fc1(h)))`` with hidden width 4W -> linear head.
``mini_cnn``
    3x3 conv stem (C_in -> W) + BN + ReLU, then three stages of ``depth``
    conv3x3 + BN + ReLU blocks with W, 2W, 4W channels (stride 2 entering
    stages 1 and 2), global average pool, linear head.
``mini_vit``
    patch embedding, class token, learned positional embedding, ``depth``
    pre-norm transformer blocks (attention + GELU MLP with 4W hidden units),
    final layer norm, linear head on the class token.

Halving a spec divides the width by two; for ``mini_vit`` the head count is
halved too so ``head_dim`` stays fixed.
"""
from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from . import layers as L
from . import tensor as T
from .errors import ShapeError, SpecError
from .tensor import Tensor

FAMILIES = ("mlp", "mini_cnn", "mini_vit")
MLP_RATIO = 4
INIT_STD = 0.02
BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-6


class LayerRole(str, enum.Enum):
    ATTN_QKV = "attn_qkv"
    ATTN_PROJ = "attn_proj"
    MLP_FC = "mlp_fc"
    HEAD = "head"
    CONV = "conv"
    CONV_STEM = "conv_stem"
    LAYER_NORM = "layer_norm"
    BATCH_NORM = "batch_norm"
    POS_EMBED = "pos_embed"
    CLASS_TOKEN = "class_token"


BUFFER_SUFFIXES = ("running_mean", "running_var")


@dataclass(frozen=True)
class ModelSpec:
    family: str
    width: int
    depth: int = 2
    input_shape: tuple[int, ...] = (1, 8, 8)
    num_classes: int = 8
    heads: int | None = None
    head_dim: int | None = None
    patch_size: int | None = None
    min_width: int = 1

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}")
        if self.width < 1 or self.depth < 1 or self.num_classes < 1:
            raise SpecError("width, depth and num_classes must be positive")
        if self.width < self.min_width:
            raise SpecError(f"width {self.width} below min_width {self.min_width}")
        if any(s < 1 for s in self.input_shape):
            raise SpecError(f"bad input_shape {self.input_shape}")
        if self.family in ("mini_cnn", "mini_vit") and len(self.input_shape) != 3:
            raise SpecError(f"{self.family} needs a (C, H, W) input_shape")
        if self.family == "mini_vit":
            if not self.heads or not self.head_dim or not self.patch_size:
                raise SpecError("mini_vit needs heads, head_dim and patch_size")
            if self.heads * self.head_dim != self.width:
                raise SpecError(f"heads x head_dim = {self.heads}x{self.head_dim} != width {self.width}")
            _, H, W = self.input_shape
            if H % self.patch_size or W % self.patch_size:
                raise SpecError(f"input {H}x{W} not divisible by patch {self.patch_size}")

    def halve(self) -> "ModelSpec":
        if self.width % 2:
            raise SpecError(f"width {self.width} cannot be halved")
        changes = {"width": self.width // 2}
        if self.family == "mini_vit":
            if self.heads % 2:
                raise SpecError(f"{self.heads} heads cannot be halved")
            changes["heads"] = self.heads // 2
        if changes["width"] < self.min_width:
            raise SpecError(f"halving {self.width} goes below min_width {self.min_width}")
        return dataclasses.replace(self, **changes)

    def double(self) -> "ModelSpec":
        changes = {"width": self.width * 2}
        if self.family == "mini_vit":
            changes["heads"] = self.heads * 2
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown ModelSpec fields {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise SpecError(str(exc)) from None


def cnn_stage_widths(spec: ModelSpec) -> list[int]:
    return [spec.width, 2 * spec.width, 4 * spec.width]


def num_patches(spec: ModelSpec) -> int:
    _, H, W = spec.input_shape
    return (H // spec.patch_size) * (W // spec.patch_size)


def param_layout(spec: ModelSpec) -> list[tuple[str, LayerRole, tuple[int, ...]]]:
    """Ordered (name, role, shape) of every tensor a model of ``spec`` holds."""
    R = LayerRole
    W, C = spec.width, spec.num_classes
    out: list[tuple[str, LayerRole, tuple[int, ...]]] = []

    def lin(name, role, d_out, d_in, bias=True):
        out.append((f"{name}.weight", role, (d_out, d_in)))
        if bias:
            out.append((f"{name}.bias", role, (d_out,)))

    def norm(name, role, d):
        out.append((f"{name}.weight", role, (d,)))
        out.append((f"{name}.bias", role, (d,)))
        if role is R.BATCH_NORM:
            out.append((f"{name}.running_mean", role, (d,)))
            out.append((f"{name}.running_var", role, (d,)))

    if spec.family == "mlp":
        lin("stem", R.CONV_STEM, W, int(np.prod(spec.input_shape)))
        for i in range(spec.depth):
            lin(f"block.{i}.fc1", R.MLP_FC, MLP_RATIO * W, W)
            lin(f"block.{i}.fc2", R.MLP_FC, W, MLP_RATIO * W)
        lin("head", R.HEAD, C, W)
    elif spec.family == "mini_cnn":
        c_in = spec.input_shape[0]
        out.append(("stem.weight", R.CONV_STEM, (W, c_in, 3, 3)))
        norm("stem_bn", R.BATCH_NORM, W)
        prev = W
        for s, width in enumerate(cnn_stage_widths(spec)):
            for j in range(spec.depth):
                out.append((f"stage.{s}.block.{j}.conv.weight", R.CONV, (width, prev, 3, 3)))
                norm(f"stage.{s}.block.{j}.bn", R.BATCH_NORM, width)
                prev = width
        lin("head", R.HEAD, C, prev)
    else:
        c_in = spec.input_shape[0]
        p = spec.patch_size
        out.append(("patch_embed.weight", R.CONV_STEM, (W, c_in, p, p)))
        out.append(("patch_embed.bias", R.CONV_STEM, (W,)))
        out.append(("cls_token", R.CLASS_TOKEN, (1, 1, W)))
        out.append(("pos_embed", R.POS_EMBED, (1, num_patches(spec) + 1, W)))
        for i in range(spec.depth):
            norm(f"block.{i}.norm1", R.LAYER_NORM, W)
            lin(f"block.{i}.attn_qkv", R.ATTN_QKV, 3 * W, W)
            lin(f"block.{i}.attn_proj", R.ATTN_PROJ, W, W)
            norm(f"block.{i}.norm2", R.LAYER_NORM, W)
            lin(f"block.{i}.fc1", R.MLP_FC, MLP_RATIO * W, W)
            lin(f"block.{i}.fc2", R.MLP_FC, W, MLP_RATIO * W)
        norm("norm", R.LAYER_NORM, W)
        lin("head", R.HEAD, C, W)
    return out


def is_buffer(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in BUFFER_SUFFIXES


def trunc_normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    """Normal(0, std) truncated at two standard deviations."""
    n = int(np.prod(shape))
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=n, random_state=rng).reshape(shape)


def _initial_value(name: str, role: LayerRole, shape, rng) -> np.ndarray:
    kind = name.rsplit(".", 1)[-1]
    if role in (LayerRole.LAYER_NORM, LayerRole.BATCH_NORM):
        return np.ones(shape) if kind in ("weight", "running_var") else np.zeros(shape)
    if kind == "bias":
        return np.zeros(shape)
    return trunc_normal(rng, shape)


@dataclass
class Model:
    """Parameters plus forward function for one :class:`ModelSpec`."""

    spec: ModelSpec
    params: dict[str, Tensor]
    roles: dict[str, LayerRole] = field(repr=False)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not is_buffer(k)}

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def __call__(self, x, train: bool = False, norm_groups: int = 1, taps: dict | None = None) -> Tensor:
        return self.forward(x, train, norm_groups, taps)

    def forward(self, x, train: bool = False, norm_groups: int = 1, taps: dict | None = None) -> Tensor:
        """Logits of shape (batch, num_classes).

        ``norm_groups`` splits every layer norm into independent groups; it
        exists to evaluate a freshly coupled transformer as two halves.
        ``taps`` (a dict) collects intermediate activations for inspection.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        elif x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        if x.shape[1:] != self.spec.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} != spec input_shape {self.spec.input_shape}")
        fam = self.spec.family
        if fam == "mlp":
            return self._forward_mlp(x, taps)
        if fam == "mini_cnn":
            return self._forward_cnn(x, train, taps)
        return self._forward_vit(x, norm_groups, taps)

    def _lin(self, name, x):
        return L.linear(x, self.params[f"{name}.weight"], self.params.get(f"{name}.bias"))

    def _forward_mlp(self, x, taps):
        p = self.params
        h = T.relu(self._lin("stem", T.reshape(x, (x.shape[0], -1))))
        if taps is not None:
            taps["embed"] = h.data
        for i in range(self.spec.depth):
            h = h + self._lin(f"block.{i}.fc2", T.relu(self._lin(f"block.{i}.fc1", h)))
        if taps is not None:
            taps["features"] = h.data
        return L.linear(h, p["head.weight"], p["head.bias"])

    def _bn(self, name, x, train):
        p = self.params
        return T.batch_norm(x, p[f"{name}.weight"], p[f"{name}.bias"], p[f"{name}.running_mean"],
                            p[f"{name}.running_var"], train=train, momentum=BN_MOMENTUM, eps=BN_EPS)

    def _forward_cnn(self, x, train, taps):
        p = self.params
        h = T.relu(self._bn("stem_bn", T.conv2d(x, p["stem.weight"], padding=1), train))
        if taps is not None:
            taps["embed"] = h.data
        for s in range(3):
            for j in range(self.spec.depth):
                stride = 2 if s > 0 and j == 0 else 1
                pre = f"stage.{s}.block.{j}"
                h = T.conv2d(h, p[f"{pre}.conv.weight"], stride=stride, padding=1)
                h = T.relu(self._bn(f"{pre}.bn", h, train))
        h = L.global_avg_pool(h)
        if taps is not None:
            taps["features"] = h.data
        return L.linear(h, p["head.weight"], p["head.bias"])

    def _forward_vit(self, x, groups, taps):
        p = self.params
        spec = self.spec
        B = x.shape[0]
        tokens = L.patch_embed(x, p["patch_embed.weight"], p["patch_embed.bias"], spec.patch_size)
        cls = T.repeat_batch(p["cls_token"], B)
        h = T.concat([cls, tokens], axis=1) + p["pos_embed"]
        if taps is not None:
            taps["embed"] = h.data
        for i in range(spec.depth):
            pre = f"block.{i}"
            a = T.layer_norm(h, p[f"{pre}.norm1.weight"], p[f"{pre}.norm1.bias"], LN_EPS, groups)
            h = h + L.attention(a, p[f"{pre}.attn_qkv.weight"], p[f"{pre}.attn_qkv.bias"],
                                p[f"{pre}.attn_proj.weight"], p[f"{pre}.attn_proj.bias"],
                                spec.heads, taps)
            m = T.layer_norm(h, p[f"{pre}.norm2.weight"], p[f"{pre}.norm2.bias"], LN_EPS, groups)
            h = h + self._lin(f"{pre}.fc2", T.gelu(self._lin(f"{pre}.fc1", m)))
        h = T.layer_norm(h, p["norm.weight"], p["norm.bias"], LN_EPS, groups)
        feat = h[:, 0]
        if taps is not None:
            taps["features"] = feat.data
        return L.linear(feat, p["head.weight"], p["head.bias"])


def model_from_arrays(spec: ModelSpec, arrays: dict[str, np.ndarray], dtype=None) -> Model:
    layout = param_layout(spec)
    params, roles = {}, {}
    for name, role, shape in layout:
        if name not in arrays:
            raise ShapeError(f"missing tensor {name!r}")
        arr = np.asarray(arrays[name])
        if arr.shape != shape:
            raise ShapeError(f"{name}: shape {arr.shape} != expected {shape}")
        if dtype is not None:
            arr = arr.astype(dtype)
        params[name] = Tensor(arr.copy(), requires_grad=not is_buffer(name), name=name)
        roles[name] = role
    extra = set(arrays) - set(params)
    if extra:
        raise ShapeError(f"unexpected tensors {sorted(extra)}")
    return Model(spec, params, roles)


def build(spec: ModelSpec, seed: int, dtype=np.float32) -> Model:
    """Fresh model: truncated-normal weights (std 0.02), zero biases, unit norm scales."""
    spec.validate()
    rng = np.random.default_rng(seed)
    arrays = {name: _initial_value(name, role, shape, rng) for name, role, shape in param_layout(spec)}
    return model_from_arrays(spec, arrays, dtype=dtype)
