# %% [markdown]
# # Planning a training budget
#
# FLOPs are counted as 2 per multiply-accumulate, and a training step costs
# three forward passes. The forward costs below are the ResNet-50 family
# numbers at widths 1, 1/2, 1/4 and 1/8.

# %%
from rbdc import budget as B

forward = (8.7e9, 2.20e9, 0.56e9, 1.4408e8)
cost = B.CostModel(forward, dataset_size=1, widths=(64, 32, 16, 8))

# %%
for epochs in [(44, 22), (42, 21, 10), (42, 20, 10, 5)]:
    plan = B.plan_from_epochs(cost, epochs, len(epochs) - 1, r=2, baseline_epochs=90)
    print(epochs, f"{plan.normalized:.4f}")

# %%
plan = B.plan_from_epochs(cost, (42, 20, 10, 5), 3, r=2, baseline_epochs=90)
print(plan.to_csv())

# %% [markdown]
# Going the other way: given the baseline's FLOPs, how long can the target
# train when every halving trains half as long?

# %%
budget = B.training_flops(forward[0], 90, 1)
for S in range(4):
    e0 = B.epochs_from_flops_budget(budget, B.CostModel(forward[:S + 1], 1), r=2, S=S, rounded=False)
    print(S, [round(e, 2) for e in B.level_epochs(e0, 2, S)])

# %%
print(B.split_epoch_budget(300, 2), B.split_epoch_budget(300, 1))
