# %% [markdown]
# # Block-diagonal coupling, by hand
#
# Two narrow MLPs are stitched into one twice-as-wide model. With zero
# off-diagonal blocks and an averaged head, the wide model starts out as
# the average of its two parents.

# %%
import numpy as np

from rbdc import checkpoint as C
from rbdc.coupling import block_diag, couple_checkpoint, verify_ensemble_equivalence
from rbdc.zoo import ModelSpec, build

# %%
# the matrix rule on its own
W1 = np.arange(6.0).reshape(2, 3)
W2 = -np.ones((1, 2))
print(block_diag(W1, W2))

# %%
spec = ModelSpec("mlp", 8)
n1 = C.from_model(build(spec, seed=1, dtype=np.float64), {"seed": 1})
n2 = C.from_model(build(spec, seed=2, dtype=np.float64), {"seed": 2})
wide = couple_checkpoint(n1, n2)
print(wide.spec.width, n1.param_count(), n2.param_count(), wide.param_count())

# %%
x = np.random.default_rng(0).standard_normal((128, *spec.input_shape))
lw = C.to_model(wide)(x).data
avg = (C.to_model(n1)(x).data + C.to_model(n2)(x).data) / 2
print("max |wide - mean|:", np.abs(lw - avg).max())

# %%
report = verify_ensemble_equivalence(wide, n1, n2, x)
print({k: report.to_dict()[k] for k in ("pass", "max_deviation", "tolerance")})
print(report.zero_audit, report.diagonal_audit)

# %% [markdown]
# Joint layer norm in the transformer mixes both halves, so the exact
# average only holds when normalising each half separately.

# %%
vit = ModelSpec("mini_vit", 8, heads=1, head_dim=8, patch_size=4)
v1, v2 = (C.from_model(build(vit, s, dtype=np.float64)) for s in (1, 2))
vw = couple_checkpoint(v1, v2)
for mode in ("exact", "split_norm_debug", "joint_norm"):
    r = verify_ensemble_equivalence(vw, v1, v2, x[:32], mode)
    print(f"{mode:17s} pass={r.passed} dev={r.max_deviation:.2e} pre-norm exact={r.pre_norm_exact}")
