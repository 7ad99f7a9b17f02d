import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rbdc import checkpoint as C
from rbdc import layers as L
from rbdc import tensor as T
from rbdc.coupling import (RANDOM, ZERO, PaddingMode, block_diag, couple_checkpoint, couple_conv, couple_head,
                           couple_linear_blockdiag, couple_norm, couple_qkv, couple_stem_and_embeddings,
                           padding_count, verify_ensemble_equivalence)
from rbdc.errors import CompatibilityError, LayoutError, RuleError, ShapeError, VerificationRefused
from rbdc.tensor import GradientTape, Tensor
from rbdc.zoo import ModelSpec

from helpers import NARROW, perturbed_checkpoint, probes


def test_linear_one_by_one():
    W, b = couple_linear_blockdiag([[1.0]], None, [[2.0]], None)
    np.testing.assert_array_equal(W, [[1, 0], [0, 2]])
    assert b is None
    _, b = couple_linear_blockdiag(np.ones((2, 1)), [1.0, 2.0], np.ones((1, 1)), [3.0])
    np.testing.assert_array_equal(b, [1, 2, 3])


def test_linear_index_audit():
    rng = np.random.default_rng(0)
    W1, W2 = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    W, _ = couple_linear_blockdiag(W1, None, W2, None)
    assert W.shape == (6, 4)
    for i in range(6):
        for j in range(4):
            if i < 3 and j < 2:
                assert W[i, j] == W1[i, j]
            elif i >= 3 and j >= 2:
                assert W[i, j] == W2[i - 3, j - 2]
            else:
                assert W[i, j] == 0.0


def test_linear_rejects_non_2d():
    with pytest.raises(ShapeError):
        couple_linear_blockdiag(np.ones(3), None, np.ones(3), None)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_block_diag_property(o1, i1, o2, i2, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((o1, i1)), rng.standard_normal((o2, i2))
    out = block_diag(a, b)
    assert out.shape == (o1 + o2, i1 + i2)
    assert out[:o1, :i1].tobytes() == a.tobytes() and out[o1:, i1:].tobytes() == b.tobytes()
    assert not out[:o1, i1:].any() and not out[o1:, :i1].any()


def test_qkv_identity_q():
    z = np.zeros((2, 2))
    Q2 = np.array([[3.0, 4.0], [5.0, 6.0]])
    qkv1 = np.concatenate([np.eye(2), z, z])
    qkv2 = np.concatenate([Q2, z, z])
    W, _ = couple_qkv(qkv1, None, qkv2, None)
    assert W.shape == (12, 4)
    np.testing.assert_array_equal(W[0:2], np.hstack([np.eye(2), z]))
    np.testing.assert_array_equal(W[2:4], np.hstack([z, Q2]))


def test_qkv_bias_order():
    b1 = np.concatenate([np.full(2, 1.0), np.full(2, 2.0), np.full(2, 3.0)])
    b2 = np.concatenate([np.full(2, 4.0), np.full(2, 5.0), np.full(2, 6.0)])
    _, b = couple_qkv(np.zeros((6, 2)), b1, np.zeros((6, 2)), b2)
    np.testing.assert_array_equal(b, [1, 1, 4, 4, 2, 2, 5, 5, 3, 3, 6, 6])


def test_qkv_layout_error():
    with pytest.raises(LayoutError):
        couple_qkv(np.zeros((5, 2)), None, np.zeros((5, 2)), None)


def test_qkv_per_head_maps_are_union_of_narrow_maps():
    rng = np.random.default_rng(1)
    heads, hd, B, N = 2, 3, 2, 5
    d = heads * hd
    w1, w2 = rng.standard_normal((3 * d, d)), rng.standard_normal((3 * d, d))
    b1, b2 = rng.standard_normal(3 * d), rng.standard_normal(3 * d)
    x1, x2 = rng.standard_normal((B, N, d)), rng.standard_normal((B, N, d))
    W, b = couple_qkv(w1, b1, w2, b2)
    t1, t2, tw = {}, {}, {}
    o1 = L.attention_heads(Tensor(x1), Tensor(w1), Tensor(b1), heads, t1).data
    o2 = L.attention_heads(Tensor(x2), Tensor(w2), Tensor(b2), heads, t2).data
    ow = L.attention_heads(Tensor(np.concatenate([x1, x2], -1)), Tensor(W), Tensor(b), 2 * heads, tw).data
    np.testing.assert_allclose(tw["attn"][0], np.concatenate([t1["attn"][0], t2["attn"][0]], axis=1),
                               rtol=0, atol=1e-12)
    np.testing.assert_allclose(ow, np.concatenate([o1, o2], -1), rtol=0, atol=1e-12)


def test_head_example():
    W, b = couple_head([[2.0, 0.0]], [1.0], [[0.0, 4.0]], [3.0])
    np.testing.assert_array_equal(W, [[1, 0, 0, 2]])
    np.testing.assert_array_equal(b, [2])
    with pytest.raises(ShapeError):
        couple_head(np.ones((2, 3)), None, np.ones((3, 3)), None)


def test_head_identical_and_random():
    rng = np.random.default_rng(2)
    W1, b1, h = rng.standard_normal((4, 3)), rng.standard_normal(4), rng.standard_normal(3)
    W, b = couple_head(W1, b1, W1, b1)
    wide = L.linear(Tensor(np.concatenate([h, h])[None]), Tensor(W), Tensor(b)).data
    assert wide.tobytes() == L.linear(Tensor(h[None]), Tensor(W1), Tensor(b1)).data.tobytes()
    W2, b2, h2 = rng.standard_normal((4, 3)), rng.standard_normal(4), rng.standard_normal(3)
    W, b = couple_head(W1, b1, W2, b2)
    ref = 0.5 * (W1 @ h + b1) + 0.5 * (W2 @ h2 + b2)
    assert np.max(np.abs(W @ np.concatenate([h, h2]) + b - ref)) <= 1e-12


def test_conv_rules():
    rng = np.random.default_rng(3)
    K1, K2 = rng.standard_normal((2, 3, 1, 1)), rng.standard_normal((4, 1, 1, 1))
    K, _ = couple_conv(K1, None, K2, None)
    Wl, _ = couple_linear_blockdiag(K1[..., 0, 0], None, K2[..., 0, 0], None)
    np.testing.assert_array_equal(K[..., 0, 0], Wl)
    K, _ = couple_conv(np.full((1, 1, 3, 3), 5.0), None, np.full((1, 1, 3, 3), 7.0), None)
    np.testing.assert_array_equal(K[:, :, 0, 0], [[5, 0], [0, 7]])
    with pytest.raises(ShapeError):
        couple_conv(np.ones((1, 1, 3, 3)), None, np.ones((1, 1, 1, 1)), None)


def test_conv_bn_channels_match_narrow_stacks():
    rng = np.random.default_rng(4)
    C_, O = 2, 3

    def bn():
        return {"weight": rng.standard_normal(O) + 1, "bias": rng.standard_normal(O),
                "running_mean": rng.standard_normal(O), "running_var": rng.uniform(0.5, 2, O)}

    K1, K2 = rng.standard_normal((O, C_, 3, 3)), rng.standard_normal((O, C_, 3, 3))
    bn1, bn2 = bn(), bn()
    x1, x2 = rng.standard_normal((2, C_, 5, 5)), rng.standard_normal((2, C_, 5, 5))

    def stack(x, K, p, dtype):
        y = T.conv2d(Tensor(x.astype(dtype)), Tensor(K.astype(dtype)), padding=1)
        ps = {k: Tensor(v.astype(dtype)) for k, v in p.items()}
        return L.layer_semantics("batch_norm", y, ps, mode="eval").data

    K, _ = couple_conv(K1, None, K2, None)
    Bn = couple_norm(bn1, bn2, "batch_norm")
    for dtype in (np.float32, np.float64):
        wide = stack(np.concatenate([x1, x2], 1), K, Bn, dtype)
        tol = 1e-6 if dtype == np.float32 else 1e-12
        np.testing.assert_allclose(wide[:, :O], stack(x1, K1, bn1, dtype), rtol=0, atol=tol)
        np.testing.assert_allclose(wide[:, O:], stack(x2, K2, bn2, dtype), rtol=0, atol=tol)


def test_norm_rules():
    p1 = {"weight": [1.0], "bias": [0.0], "running_mean": [0.1], "running_var": [1.0]}
    p2 = {"weight": [1.0], "bias": [0.0], "running_mean": [0.3], "running_var": [2.0]}
    out = couple_norm(p1, p2, "batch_norm")
    np.testing.assert_array_equal(out["running_mean"], [0.1, 0.3])
    ln = couple_norm({"weight": np.ones(3), "bias": np.zeros(3)}, {"weight": np.ones(3), "bias": np.zeros(3)},
                     "layer_norm")
    np.testing.assert_array_equal(ln["weight"], np.ones(6))
    with pytest.raises(RuleError):
        couple_norm(p1, p2, "layer_norm")
    with pytest.raises(RuleError):
        couple_norm(p1, p2, "group_norm")


def test_bn_eval_per_channel_exact():
    rng = np.random.default_rng(5)
    ps = [{"weight": rng.standard_normal(2), "bias": rng.standard_normal(2),
           "running_mean": rng.standard_normal(2), "running_var": rng.uniform(0.5, 2, 2)} for _ in range(2)]
    wide = couple_norm(ps[0], ps[1], "batch_norm")
    x1, x2 = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    run = lambda x, p: L.layer_semantics("batch_norm", x, {k: Tensor(v) for k, v in p.items()}, "eval").data
    out = run(np.concatenate([x1, x2], 1), wide)
    assert out[:, :2].tobytes() == run(x1, ps[0]).tobytes()
    assert out[:, 2:].tobytes() == run(x2, ps[1]).tobytes()


def test_stem_and_embeddings():
    rng = np.random.default_rng(6)
    k1, k2 = rng.standard_normal((4, 3, 2, 2)), rng.standard_normal((4, 3, 2, 2))
    k = couple_stem_and_embeddings(k1, k2, "conv_stem")
    assert k.shape == (8, 3, 2, 2) and (k[:4] == k1).all() and (k[4:] == k2).all()
    np.testing.assert_array_equal(couple_stem_and_embeddings([[[1.5]]], [[[2.5]]], "class_token"), [[[1.5, 2.5]]])
    with pytest.raises(RuleError):
        couple_stem_and_embeddings(k1, k2, "head")
    with pytest.raises(RuleError):
        couple_stem_and_embeddings(k1, k2, "nonsense")


def test_patch_embed_outputs_concat():
    rng = np.random.default_rng(7)
    w1, w2 = rng.standard_normal((3, 1, 4, 4)), rng.standard_normal((3, 1, 4, 4))
    b1, b2 = rng.standard_normal(3), rng.standard_normal(3)
    x = Tensor(rng.standard_normal((2, 1, 8, 8)))
    w = couple_stem_and_embeddings(w1, w2, "conv_stem")
    b = couple_stem_and_embeddings(b1, b2, "conv_stem")
    wide = L.patch_embed(x, Tensor(w), Tensor(b), 4).data
    ref = np.concatenate([L.patch_embed(x, Tensor(w1), Tensor(b1), 4).data,
                          L.patch_embed(x, Tensor(w2), Tensor(b2), 4).data], -1)
    assert np.max(np.abs(wide - ref)) <= 1e-6


@pytest.mark.parametrize("family", sorted(NARROW))
def test_couple_identical_equals_narrow(family):
    spec = NARROW[family]
    c = perturbed_checkpoint(spec, 1)
    wide = couple_checkpoint(c, c)
    x = probes(spec, 16)
    groups = 2 if family == "mini_vit" else 1
    lw = C.to_model(wide)(x, norm_groups=groups).data
    ln = C.to_model(c)(x).data
    assert np.max(np.abs(lw - ln)) <= 1e-12


@pytest.mark.parametrize("family", sorted(NARROW))
def test_param_count_identity(family):
    spec = NARROW[family]
    c1, c2 = perturbed_checkpoint(spec, 1), perturbed_checkpoint(spec, 2)
    wide = couple_checkpoint(c1, c2)
    # the averaged head bias keeps its length, so one copy of it is not duplicated
    assert wide.param_count() == c1.param_count() + c2.param_count() + padding_count(spec) - spec.num_classes


@pytest.mark.parametrize("family", sorted(NARROW))
def test_argument_order_symmetry(family):
    spec = NARROW[family]
    c1, c2 = perturbed_checkpoint(spec, 1), perturbed_checkpoint(spec, 2)
    x = probes(spec, 128)
    a = C.to_model(couple_checkpoint(c1, c2))(x).data
    b = C.to_model(couple_checkpoint(c2, c1))(x).data
    assert a.tobytes() == b.tobytes()


def test_compatibility_errors():
    a = perturbed_checkpoint(NARROW["mlp"], 1)
    with pytest.raises(CompatibilityError):
        couple_checkpoint(a, perturbed_checkpoint(ModelSpec("mlp", 16), 1))
    with pytest.raises(CompatibilityError):
        couple_checkpoint(a, perturbed_checkpoint(NARROW["mlp"], 2, dtype=np.float32))


@pytest.mark.parametrize("family,mode", [("mlp", "exact"), ("mini_cnn", "exact"),
                                         ("mini_vit", "split_norm_debug")])
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_verify_passes(family, mode, dtype):
    spec = NARROW[family]
    c1, c2 = perturbed_checkpoint(spec, 1, dtype), perturbed_checkpoint(spec, 2, dtype)
    wide = couple_checkpoint(c1, c2)
    rep = verify_ensemble_equivalence(wide, c1, c2, probes(spec), mode)
    assert rep.passed, rep.to_dict()
    assert rep.max_deviation <= (1e-5 if dtype == np.float32 else 1e-10)
    assert rep.zero_audit["nonzero"] == 0 and rep.diagonal_audit["mismatches"] == 0


def test_verify_joint_norm_reports_deviation():
    spec = NARROW["mini_vit"]
    c1, c2 = perturbed_checkpoint(spec, 1), perturbed_checkpoint(spec, 2)
    wide = couple_checkpoint(c1, c2)
    joint = verify_ensemble_equivalence(wide, c1, c2, probes(spec), "joint_norm")
    assert joint.passed and joint.pre_norm_exact
    assert np.isfinite(joint.max_deviation) and joint.tolerance is None
    exact = verify_ensemble_equivalence(wide, c1, c2, probes(spec), "exact")
    assert exact.max_deviation == joint.max_deviation
    assert not exact.passed


def test_verify_accepts_swapped_narrows_and_refuses_strangers():
    spec = NARROW["mlp"]
    c1, c2, c3 = (perturbed_checkpoint(spec, s) for s in (1, 2, 3))
    wide = couple_checkpoint(c1, c2)
    assert verify_ensemble_equivalence(wide, c2, c1, probes(spec, 8)).passed
    with pytest.raises(VerificationRefused):
        verify_ensemble_equivalence(wide, c1, c3, probes(spec, 8))


def test_verify_detects_tampering():
    spec = NARROW["mlp"]
    c1, c2 = perturbed_checkpoint(spec, 1), perturbed_checkpoint(spec, 2)
    wide = couple_checkpoint(c1, c2)
    arrays = wide.arrays()
    arrays["block.0.fc1.weight"][0, -1] = 0.5
    tampered = C.Checkpoint.from_arrays(wide.spec, arrays, wide.metadata)
    rep = verify_ensemble_equivalence(tampered, c1, c2, probes(spec, 32))
    assert not rep.passed and rep.zero_audit["nonzero"] == 1


def test_random_padding_statistics():
    spec = ModelSpec("mlp", 16)
    c1, c2 = perturbed_checkpoint(spec, 1), perturbed_checkpoint(spec, 2)
    wide = couple_checkpoint(c1, c2, RANDOM, seed=3)
    rep = verify_ensemble_equivalence(wide, c1, c2, probes(spec, 8))
    assert rep.diagonal_audit["ok"]
    assert not rep.zero_audit["checked"]
    n = rep.zero_audit["elements"]
    # truncated at 2 sigma the std is about 0.88 * 0.02
    assert abs(rep.zero_audit["mean"]) <= 3 * 0.02 / np.sqrt(n)
    assert wide.metadata["padding"] == {"kind": "random", "std": 0.02}


def test_padding_mode_parse():
    assert PaddingMode.parse("zero") == ZERO
    assert PaddingMode.parse({"kind": "random", "std": 0.02}) == RANDOM
    with pytest.raises(ValueError):
        PaddingMode.parse("gaussian")


def test_off_diagonals_train():
    spec = NARROW["mlp"]
    wide = couple_checkpoint(perturbed_checkpoint(spec, 1), perturbed_checkpoint(spec, 2))
    m = C.to_model(wide)
    w = m.params["block.0.fc1.weight"]
    before = w.data.copy()
    x = probes(spec, 16)
    with GradientTape() as tape:
        loss = T.cross_entropy(m(x), np.arange(16) % spec.num_classes)
    g = tape.backward(loss, [w])[w]
    w.data = w.data - 0.1 * g
    off = np.zeros_like(before, bool)
    off[:32, 8:] = off[32:, :8] = True
    assert np.all(before[off] == 0) and np.any(w.data[off] != 0)


@pytest.mark.parametrize("family", sorted(NARROW))
def test_recursive_coupling_two_levels(family):
    spec = NARROW[family]
    leaves = [perturbed_checkpoint(spec, s) for s in range(4)]
    mid = [couple_checkpoint(leaves[0], leaves[1]), couple_checkpoint(leaves[2], leaves[3])]
    top = couple_checkpoint(*mid)
    assert top.spec.width == 4 * spec.width
    if family != "mini_vit":
        rep = verify_ensemble_equivalence(top, *mid, probes(spec, 32))
        assert rep.passed
