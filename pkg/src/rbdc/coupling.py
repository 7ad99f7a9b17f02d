"""Block-diagonal coupling of two narrow models into one wide model.

Per-role rules (model 1 always lands in the first half of every widened axis):

==============  ==========================================================
attn_qkv        Q, K and V sections each block-diagonal; biases interleaved
                as [bQ1, bQ2, bK1, bK2, bV1, bV2]
attn_proj       block-diagonal weight, concatenated bias
mlp_fc          block-diagonal weight, concatenated bias
conv            block-diagonal over (out, in) channels at every kernel tap
head            W = [W1/2, W2/2], b = (b1 + b2)/2
layer_norm      gamma and beta concatenated
batch_norm      gamma, beta, running mean and running variance concatenated
conv_stem       output channels concatenated (input channels are fixed)
pos_embed       concatenated along the embedding axis
class_token     concatenated along the embedding axis
==============  ==========================================================

Off-diagonal blocks are exact zeros (``PaddingMode("zero")``) or truncated
normal draws with std 0.02 (``PaddingMode("random")``).
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .errors import CompatibilityError, LayoutError, RuleError, ShapeError, SpecError, VerificationRefused
from .zoo import INIT_STD, LayerRole, ModelSpec, param_layout, trunc_normal

R = LayerRole
EMBED_ROLES = (R.CONV_STEM, R.POS_EMBED, R.CLASS_TOKEN)
TOLERANCE = {"float32": 1e-5, "float64": 1e-10}
VERIFY_MODES = ("exact", "split_norm_debug", "joint_norm")


@dataclass(frozen=True)
class PaddingMode:
    kind: str = "zero"
    std: float = INIT_STD

    def __post_init__(self):
        if self.kind not in ("zero", "random"):
            raise ValueError(f"padding must be 'zero' or 'random', got {self.kind!r}")

    def fill(self, shape, dtype, rng: np.random.Generator | None) -> np.ndarray:
        if self.kind == "zero":
            return np.zeros(shape, dtype=dtype)
        if rng is None:
            raise ValueError("random padding needs a generator")
        return trunc_normal(rng, shape, self.std).astype(dtype)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "std": self.std if self.kind == "random" else 0.0}

    @classmethod
    def parse(cls, value) -> "PaddingMode":
        if isinstance(value, PaddingMode):
            return value
        if isinstance(value, dict):
            return cls(value["kind"], value.get("std") or INIT_STD)
        return cls(str(value))


ZERO = PaddingMode("zero")
RANDOM = PaddingMode("random")


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def block_diag(a: np.ndarray, b: np.ndarray, padding: PaddingMode = ZERO, rng=None) -> np.ndarray:
    """Place ``a`` and ``b`` on the diagonal of the first two axes."""
    (o1, i1), (o2, i2) = a.shape[:2], b.shape[:2]
    rest = a.shape[2:]
    dtype = np.result_type(a, b)
    out = np.empty((o1 + o2, i1 + i2) + rest, dtype=dtype)
    out[:o1, :i1] = a
    out[o1:, i1:] = b
    out[:o1, i1:] = padding.fill((o1, i2) + rest, dtype, rng)
    out[o1:, :i1] = padding.fill((o2, i1) + rest, dtype, rng)
    return out


def _concat_bias(b1, b2):
    if (b1 is None) != (b2 is None):
        raise ShapeError("one side has a bias and the other does not")
    return None if b1 is None else np.concatenate([b1, b2])


def couple_linear_blockdiag(W1, b1, W2, b2, padding: PaddingMode = ZERO, rng=None):
    W1, W2 = np.asarray(W1), np.asarray(W2)
    if W1.ndim != 2 or W2.ndim != 2:
        raise ShapeError(f"linear coupling needs 2-D weights, got {W1.shape} and {W2.shape}")
    for W, b in ((W1, b1), (W2, b2)):
        if b is not None and np.shape(b) != (W.shape[0],):
            raise ShapeError(f"bias {np.shape(b)} does not match weight {W.shape}")
    return block_diag(W1, W2, padding, _rng(rng)), _concat_bias(b1, b2)


def couple_qkv(qkv1, b1, qkv2, b2, padding: PaddingMode = ZERO, rng=None):
    """Couple packed (3W, W) attention projections section by section."""
    qkv1, qkv2 = np.asarray(qkv1), np.asarray(qkv2)
    for w in (qkv1, qkv2):
        if w.ndim != 2 or w.shape[0] != 3 * w.shape[1]:
            raise LayoutError(f"packed qkv weight must be (3W, W), got {w.shape}")
    if qkv1.shape != qkv2.shape:
        raise LayoutError(f"qkv shapes differ: {qkv1.shape} vs {qkv2.shape}")
    rng = _rng(rng)
    Wq1, Wq2 = np.split(qkv1, 3), np.split(qkv2, 3)
    W = np.concatenate([block_diag(a, b, padding, rng) for a, b in zip(Wq1, Wq2)])
    bias = None
    if b1 is not None or b2 is not None:
        if b1 is None or b2 is None:
            raise ShapeError("one side has a qkv bias and the other does not")
        s1, s2 = np.split(np.asarray(b1), 3), np.split(np.asarray(b2), 3)
        bias = np.concatenate([part for pair in zip(s1, s2) for part in pair])
    return W, bias


def couple_head(W1, b1, W2, b2):
    W1, W2 = np.asarray(W1), np.asarray(W2)
    if W1.ndim != 2 or W2.ndim != 2 or W1.shape[0] != W2.shape[0]:
        raise ShapeError(f"heads disagree on class count: {W1.shape} vs {W2.shape}")
    W = np.concatenate([0.5 * W1, 0.5 * W2], axis=1)
    b = None if b1 is None else (np.asarray(b1) + np.asarray(b2)) / 2
    return W, b


def couple_conv(K1, b1, K2, b2, padding: PaddingMode = ZERO, rng=None):
    K1, K2 = np.asarray(K1), np.asarray(K2)
    if K1.ndim != 4 or K2.ndim != 4:
        raise ShapeError(f"conv coupling needs (C_out, C_in, K, K) kernels, got {K1.shape} and {K2.shape}")
    if K1.shape[2:] != K2.shape[2:]:
        raise ShapeError(f"kernel sizes differ: {K1.shape[2:]} vs {K2.shape[2:]}")
    return block_diag(K1, K2, padding, _rng(rng)), _concat_bias(b1, b2)


_NORM_KEYS = {
    "layer_norm": {"weight", "bias"},
    "batch_norm": {"weight", "bias", "running_mean", "running_var"},
}


def couple_norm(params1: dict, params2: dict, kind: str) -> dict:
    if kind not in _NORM_KEYS:
        raise RuleError(f"unknown norm kind {kind!r}")
    want = _NORM_KEYS[kind]
    for p in (params1, params2):
        if set(p) != want:
            raise RuleError(f"{kind} expects {sorted(want)}, got {sorted(p)}")
    return {k: np.concatenate([np.asarray(params1[k]), np.asarray(params2[k])]) for k in sorted(want)}


def couple_stem_and_embeddings(t1, t2, role) -> np.ndarray:
    try:
        role = LayerRole(role)
    except ValueError:
        raise RuleError(f"unknown role {role!r}") from None
    t1, t2 = np.asarray(t1), np.asarray(t2)
    if role is R.CONV_STEM:
        if t1.shape[1:] != t2.shape[1:]:
            raise ShapeError(f"stem shapes differ beyond output channels: {t1.shape} vs {t2.shape}")
        return np.concatenate([t1, t2], axis=0)
    if role in (R.POS_EMBED, R.CLASS_TOKEN):
        if t1.shape[:-1] != t2.shape[:-1]:
            raise ShapeError(f"embedding shapes differ: {t1.shape} vs {t2.shape}")
        return np.concatenate([t1, t2], axis=-1)
    raise RuleError(f"role {role.value!r} is not a stem or embedding role")


def _groups(arrays: dict, roles: dict) -> "OrderedDict[str, tuple[LayerRole, dict]]":
    groups: OrderedDict[str, tuple[LayerRole, dict]] = OrderedDict()
    for name, arr in arrays.items():
        prefix, _, kind = name.rpartition(".")
        if roles[name] in (R.POS_EMBED, R.CLASS_TOKEN):
            prefix, kind = name, "value"
        groups.setdefault(prefix, (roles[name], {}))[1][kind] = arr
    return groups


def couple_arrays(a1: dict, a2: dict, roles: dict, padding: PaddingMode = ZERO, rng=None) -> dict:
    """Apply the per-role rule to every layer of two name->array mappings."""
    rng = _rng(rng)
    g1, g2 = _groups(a1, roles), _groups(a2, roles)
    out = {}
    for prefix, (role, p1) in g1.items():
        p2 = g2[prefix][1]
        if role is R.ATTN_QKV:
            w, b = couple_qkv(p1["weight"], p1.get("bias"), p2["weight"], p2.get("bias"), padding, rng)
            res = {"weight": w, "bias": b}
        elif role in (R.ATTN_PROJ, R.MLP_FC):
            w, b = couple_linear_blockdiag(p1["weight"], p1.get("bias"), p2["weight"], p2.get("bias"),
                                           padding, rng)
            res = {"weight": w, "bias": b}
        elif role is R.CONV:
            w, b = couple_conv(p1["weight"], p1.get("bias"), p2["weight"], p2.get("bias"), padding, rng)
            res = {"weight": w, "bias": b}
        elif role is R.HEAD:
            w, b = couple_head(p1["weight"], p1.get("bias"), p2["weight"], p2.get("bias"))
            res = {"weight": w, "bias": b}
        elif role in (R.LAYER_NORM, R.BATCH_NORM):
            res = couple_norm(p1, p2, role.value)
        elif role in EMBED_ROLES:
            res = {k: couple_stem_and_embeddings(p1[k], p2[k], role) for k in p1}
        else:  # pragma: no cover - enum is closed
            raise RuleError(f"no coupling rule for role {role!r}")
        for kind, arr in res.items():
            if arr is not None:
                out[prefix if kind == "value" else f"{prefix}.{kind}"] = arr
    return out


def padding_count(spec: ModelSpec) -> int:
    """Number of off-diagonal elements introduced when coupling two ``spec`` models."""
    total = 0
    for name, role, shape in param_layout(spec):
        if name.endswith(".weight") and role in (R.ATTN_QKV, R.ATTN_PROJ, R.MLP_FC, R.CONV):
            rows, cols = shape[0], shape[1]
            rest = int(np.prod(shape[2:], dtype=np.int64))
            blocks = 3 if role is R.ATTN_QKV else 1
            per = rows // blocks
            total += blocks * 2 * per * cols * rest
    return total


def couple_checkpoint(c1: Checkpoint, c2: Checkpoint, padding: PaddingMode = ZERO, seed: int = 0) -> Checkpoint:
    """Couple two trained narrow checkpoints into the initial wide checkpoint."""
    padding = PaddingMode.parse(padding)
    if c1.spec != c2.spec:
        raise CompatibilityError(f"cannot couple different specs: {c1.spec} vs {c2.spec}")
    if c1.precision != c2.precision:
        raise CompatibilityError(f"precisions differ: {c1.precision} vs {c2.precision}")
    try:
        wide_spec = c1.spec.double()
    except SpecError as exc:
        raise CompatibilityError(f"doubled spec is invalid: {exc}") from None
    arrays = couple_arrays(c1.arrays(), c2.arrays(), c1.roles(), padding, np.random.default_rng(seed))
    expected = {n: s for n, _, s in param_layout(wide_spec)}
    for name, arr in arrays.items():
        if expected.get(name) != arr.shape:
            raise ShapeError(f"coupled {name} has shape {arr.shape}, layout expects {expected.get(name)}")
    metadata = {
        "seed": seed,
        "epochs_trained": 0,
        "padding": padding.to_dict(),
        "lineage": [ckpt_io.lineage_entry(c1), ckpt_io.lineage_entry(c2)],
    }
    return Checkpoint.from_arrays(wide_spec, arrays, metadata, precision=c1.precision)


# ---------------------------------------------------------------------------
# verification


@dataclass
class CouplingReport:
    mode: str
    precision: str
    padding: dict
    shape_audit: list[dict] = field(default_factory=list)
    zero_audit: dict = field(default_factory=dict)
    diagonal_audit: dict = field(default_factory=dict)
    probes: int = 0
    max_deviation: float = float("nan")
    tolerance: float | None = None
    pre_norm_exact: bool | None = None
    passed: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def shapes_ok(self) -> bool:
        return all(entry["ok"] for entry in self.shape_audit)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "precision": self.precision, "padding": self.padding,
            "shape_audit": self.shape_audit, "zero_audit": self.zero_audit,
            "diagonal_audit": self.diagonal_audit, "probes": self.probes,
            "max_deviation": self.max_deviation, "tolerance": self.tolerance,
            "pre_norm_exact": self.pre_norm_exact, "pass": self.passed, "notes": self.notes,
        }


def _ordered_narrows(wide: Checkpoint, n1: Checkpoint, n2: Checkpoint):
    children = wide.metadata.get("lineage", [])
    if len(children) != 2:
        raise VerificationRefused("wide checkpoint has no coupling lineage")
    recorded = [c.get("digest") for c in children]
    d1, d2 = n1.digest(), n2.digest()
    if recorded == [d1, d2]:
        return n1, n2
    if recorded == [d2, d1]:
        return n2, n1
    raise VerificationRefused("narrow checkpoints do not match the wide checkpoint's lineage")


def _bit_mismatches(a: np.ndarray, b: np.ndarray) -> int:
    """Count elements whose bit patterns differ."""
    ia = a.view(np.uint8).reshape(a.size, -1)
    ib = b.view(np.uint8).reshape(b.size, -1)
    return int(np.count_nonzero(np.any(ia != ib, axis=1)))


def _embeddings(model, probes, batch):
    outs = []
    for start in range(0, len(probes), batch):
        taps: dict = {}
        model.forward(probes[start:start + batch], taps=taps)
        outs.append(taps["embed"])
    return np.concatenate(outs)


def _forward(model, probes, batch, **kw):
    outs = []
    for start in range(0, len(probes), batch):
        outs.append(model.forward(probes[start:start + batch], **kw).data)
    return np.concatenate(outs)


def verify_ensemble_equivalence(wide: Checkpoint, narrow1: Checkpoint, narrow2: Checkpoint, probes,
                                mode: str = "exact", batch: int = 64) -> CouplingReport:
    """Audit a fresh coupling and measure how far it is from the narrow ensemble.

    Models run in eval mode at the checkpoints' precision. ``exact`` and
    ``split_norm_debug`` assert ``max|wide(x) - (n1(x) + n2(x))/2|`` against
    1e-5 (float32) or 1e-10 (float64); ``joint_norm`` asserts only that the
    activations entering the first layer norm are the exact concatenation of
    the narrow ones and reports the logit deviation.
    """
    if mode not in VERIFY_MODES:
        raise ValueError(f"mode must be one of {VERIFY_MODES}")
    probes = np.asarray(probes)
    if probes.shape[0] == 0:
        raise ValueError("need at least one probe")
    n1, n2 = _ordered_narrows(wide, narrow1, narrow2)
    if n1.spec != n2.spec:
        raise VerificationRefused("narrow specs differ")

    padding = wide.metadata.get("padding", {"kind": "zero"})
    report = CouplingReport(mode=mode, precision=wide.precision, padding=padding, probes=len(probes))

    expected_spec = n1.spec.double()
    layout = {n: (r, s) for n, r, s in param_layout(expected_spec)}
    actual = {rec.name: (rec.role, rec.shape) for rec in wide.records}
    for name, (role, shape) in layout.items():
        got = actual.get(name)
        report.shape_audit.append({"name": name, "role": role.value, "expected": list(shape),
                                   "actual": list(got[1]) if got else None,
                                   "ok": got is not None and got == (role, shape)})
    if wide.spec != expected_spec:
        report.shape_audit.append({"name": "<spec>", "role": None, "expected": expected_spec.to_dict(),
                                   "actual": wide.spec.to_dict(), "ok": False})
    if not report.shapes_ok:
        report.notes.append("shape audit failed; skipping value audits")
        return report

    a1, a2, aw = n1.arrays(), n2.arrays(), wide.arrays()
    roles = n1.roles()
    expected = couple_arrays(a1, a2, roles, ZERO)
    masks = couple_arrays({k: np.ones_like(v) for k, v in a1.items()},
                          {k: np.ones_like(v) for k, v in a2.items()}, roles, ZERO)
    diag_total = diag_bad = off_total = off_nonzero = 0
    for name, exp in expected.items():
        mask = masks[name] != 0
        got = aw[name]
        diag_total += int(mask.sum())
        diag_bad += _bit_mismatches(got[mask], exp[mask].astype(got.dtype))
        off = got[~mask]
        off_total += off.size
        off_nonzero += int(np.count_nonzero(off))
    report.diagonal_audit = {"elements": diag_total, "mismatches": diag_bad, "ok": diag_bad == 0}
    if padding.get("kind", "zero") == "zero":
        report.zero_audit = {"checked": True, "elements": off_total, "nonzero": off_nonzero,
                             "ok": off_nonzero == 0}
    else:
        mean = float(np.mean(np.concatenate([aw[n][~(masks[n] != 0)].ravel() for n in expected])))
        report.zero_audit = {"checked": False, "elements": off_total, "nonzero": off_nonzero,
                             "mean": mean, "ok": True}

    dtype = np.dtype(ckpt_io.PRECISIONS[wide.precision]).newbyteorder("=")
    probes = probes.astype(dtype)
    mw, m1, m2 = (ckpt_io.to_model(c) for c in (wide, n1, n2))
    groups = 2 if mode == "split_norm_debug" and wide.spec.family == "mini_vit" else 1
    lw = _forward(mw, probes, batch, norm_groups=groups)
    l1 = _forward(m1, probes, batch)
    l2 = _forward(m2, probes, batch)
    report.max_deviation = float(np.max(np.abs(lw - 0.5 * (l1 + l2))))
    report.tolerance = TOLERANCE[wide.precision]

    if mode == "joint_norm" and wide.spec.family == "mini_vit":
        joined = np.concatenate([_embeddings(m1, probes, batch), _embeddings(m2, probes, batch)], axis=-1)
        report.pre_norm_exact = _bit_mismatches(_embeddings(mw, probes, batch), joined) == 0
        report.tolerance = None
        report.notes.append("logit deviation reported, not asserted, under joint layer norm")
        value_ok = report.pre_norm_exact
    else:
        value_ok = report.max_deviation <= report.tolerance
    report.passed = bool(report.shapes_ok and report.diagonal_audit["ok"] and report.zero_audit["ok"]
                         and value_ok)
    return report
