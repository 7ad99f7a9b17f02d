# %% [markdown]
# # Accuracy against FLOPs on a toy task
#
# Eight Gaussian classes on 8x8 inputs. A width-32 MLP trained normally is
# compared with one grown from two width-16 models at the same FLOPs
# budget. Takes about fifteen seconds on one core.

# %%
from rbdc import protocol as P
from rbdc.data import synthetic_splits
from rbdc.zoo import ModelSpec, build

data = synthetic_splits(num_classes=8, per_class_train=64, per_class_eval=32, seed=0)
spec = ModelSpec("mlp", 32)
config = P.TrainConfig(lr=3e-3, warmup_epochs=2)

# %%
plans = [P.ExperimentPlan("baseline", spec, 20, 20, seeds=(0, 1, 2)),
         P.ExperimentPlan("rbdc", spec, 20, 20, seeds=(0, 1, 2), steps=1, mode="flops_split")]
rows, records = P.run_experiment(plans, data, config)
print(P.curve_csv(rows))

# %%
rbdc = records[3]
print("epochs per level:", P.realized_level_epochs(rbdc))
random_loss, _ = P.evaluate(build(spec, P.node_seed(rbdc.seed, "root")), data.eval)
print(f"eval loss at init: coupled {rbdc.init_eval_loss:.3f}, random {random_loss:.3f}")

# %%
for node in rbdc.nodes():
    accs = [h["eval_accuracy"] for h in node.history]
    print(f"{node.path:7s} width {node.width:2d} epochs {node.epochs:2d} final acc {accs[-1]:.3f}")
