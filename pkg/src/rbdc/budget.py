"""FLOPs accounting and epoch-budget planning.

Conventions: one multiply-accumulate counts as 2 FLOPs; norms, activations
and pooling count as zero; one training step costs three forward passes.
Recursion level ``i`` holds ``2**i`` models, level 0 being the target.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

from .errors import DomainError, PlanError
from .zoo import MLP_RATIO, ModelSpec, cnn_stage_widths, num_patches

FLOPS_PER_MAC = 2
TRAIN_FORWARD_MULTIPLE = 3
CONVENTION = "2 FLOPs per MAC; norms/activations/pooling = 0; train step = 3x forward"


def linear_flops(d_in: int, d_out: int, tokens: int = 1) -> int:
    return FLOPS_PER_MAC * d_in * d_out * tokens


def conv_flops(c_in: int, c_out: int, k: int, h_out: int, w_out: int) -> int:
    return FLOPS_PER_MAC * c_out * c_in * k * k * h_out * w_out


def attention_core_flops(tokens: int, width: int) -> int:
    """Scores plus weighted sum, summed over heads (independent of head count)."""
    return FLOPS_PER_MAC * 2 * tokens * tokens * width


def flops_breakdown(spec: ModelSpec) -> list[tuple[str, int]]:
    """Per-layer forward FLOPs for one input."""
    W, C = spec.width, spec.num_classes
    out: list[tuple[str, int]] = []
    if spec.family == "mlp":
        d_in = math.prod(spec.input_shape)
        out.append(("stem", linear_flops(d_in, W)))
        for i in range(spec.depth):
            out.append((f"block.{i}.fc1", linear_flops(W, MLP_RATIO * W)))
            out.append((f"block.{i}.fc2", linear_flops(MLP_RATIO * W, W)))
        out.append(("head", linear_flops(W, C)))
    elif spec.family == "mini_cnn":
        c_in, H, Wd = spec.input_shape
        out.append(("stem", conv_flops(c_in, W, 3, H, Wd)))
        prev = W
        for s, width in enumerate(cnn_stage_widths(spec)):
            for j in range(spec.depth):
                if s > 0 and j == 0:
                    H, Wd = (H - 1) // 2 + 1, (Wd - 1) // 2 + 1
                out.append((f"stage.{s}.block.{j}.conv", conv_flops(prev, width, 3, H, Wd)))
                prev = width
        out.append(("head", linear_flops(prev, C)))
    else:
        c_in = spec.input_shape[0]
        n = num_patches(spec)
        t = n + 1
        out.append(("patch_embed", conv_flops(c_in, W, spec.patch_size, 1, n)))
        for i in range(spec.depth):
            out.append((f"block.{i}.attn_qkv", linear_flops(W, 3 * W, t)))
            out.append((f"block.{i}.attn_core", attention_core_flops(t, W)))
            out.append((f"block.{i}.attn_proj", linear_flops(W, W, t)))
            out.append((f"block.{i}.fc1", linear_flops(W, MLP_RATIO * W, t)))
            out.append((f"block.{i}.fc2", linear_flops(MLP_RATIO * W, W, t)))
        out.append(("head", linear_flops(W, C)))
    return out


def forward_flops(spec: ModelSpec) -> int:
    return sum(f for _, f in flops_breakdown(spec))


def training_flops(forward, epochs, dataset_size):
    return TRAIN_FORWARD_MULTIPLE * forward * epochs * dataset_size


@dataclass(frozen=True)
class CostModel:
    """Forward FLOPs per image at each recursion level (index 0 = target)."""

    forward: tuple
    dataset_size: int
    widths: tuple | None = None
    convention: str = CONVENTION

    def __post_init__(self):
        object.__setattr__(self, "forward", tuple(self.forward))
        if self.widths is not None:
            object.__setattr__(self, "widths", tuple(self.widths))
        if not self.forward or any(f <= 0 for f in self.forward):
            raise DomainError("forward costs must be positive")
        if any(b > a for a, b in zip(self.forward, self.forward[1:])):
            raise DomainError("forward costs must not increase with the level")
        if self.dataset_size <= 0:
            raise DomainError("dataset size must be positive")

    @property
    def levels(self) -> int:
        return len(self.forward)

    @classmethod
    def from_spec(cls, spec: ModelSpec, steps: int, dataset_size: int) -> "CostModel":
        specs = [spec]
        for _ in range(steps):
            specs.append(specs[-1].halve())
        return cls(tuple(forward_flops(s) for s in specs), dataset_size, tuple(s.width for s in specs))


def _check_levels(cost: CostModel, S: int) -> None:
    if S < 0:
        raise PlanError("number of halvings must be >= 0")
    if cost.levels < S + 1:
        raise PlanError(f"cost model has {cost.levels} levels, plan needs {S + 1}")


def pipeline_flops(cost: CostModel, epochs, S: int):
    """Total training FLOPs of every model at levels 0..S."""
    _check_levels(cost, S)
    epochs = list(epochs)
    if len(epochs) < S + 1:
        raise PlanError(f"epochs given for {len(epochs)} levels, plan needs {S + 1}")
    return sum(2 ** i * training_flops(cost.forward[i], epochs[i], cost.dataset_size) for i in range(S + 1))


def normalized_flops(pipeline, baseline_epochs, cost: CostModel) -> float:
    if baseline_epochs <= 0:
        raise DomainError("baseline epochs must be positive")
    return pipeline / training_flops(cost.forward[0], baseline_epochs, cost.dataset_size)


def round_epochs(x: float) -> int:
    """Nearest integer (halves up), at least 1 for any positive allocation."""
    if x < 0:
        raise DomainError(f"negative epochs {x}")
    if x == 0:
        return 0
    return max(1, math.floor(x + 0.5))


def split_epoch_budget(epochs, r):
    """Split one node's epochs into (each narrow model, the wide model)."""
    if r <= 0:
        raise DomainError(f"training ratio must be positive, got {r}")
    if epochs < 0:
        raise DomainError(f"epochs must be >= 0, got {epochs}")
    return epochs / (r + 2), epochs * r / (r + 2)


def epoch_split_levels(epochs, r, S: int) -> list[float]:
    """Per-level epochs when the split rule is applied recursively S times."""
    out = []
    remaining = epochs
    for _ in range(S):
        narrow, wide = split_epoch_budget(remaining, r)
        out.append(wide)
        remaining = narrow
    out.append(remaining)
    return out


def _geometric_denominator(cost: CostModel, r, S: int):
    return sum((2 / r) ** i * cost.forward[i] for i in range(S + 1))


def epochs_from_flops_budget(budget, cost: CostModel, r, S: int, rounded: bool = True):
    """Target-model epochs that spend ``budget`` FLOPs over S halvings."""
    if budget <= 0:
        raise DomainError("budget must be positive")
    if r <= 0:
        raise DomainError(f"training ratio must be positive, got {r}")
    _check_levels(cost, S)
    target = budget / (TRAIN_FORWARD_MULTIPLE * cost.dataset_size * _geometric_denominator(cost, r, S))
    return round_epochs(target) if rounded else target


def epochs_from_alpha(alpha, epochs_baseline, r, S: int, cost: CostModel | None = None):
    """Target epochs for a budget of ``alpha`` baseline trainings.

    With ``cost`` the exact form is used; without it each halving is assumed
    to divide the forward cost by four.
    """
    if alpha <= 0:
        raise DomainError("alpha must be positive")
    if r <= 0:
        raise DomainError(f"training ratio must be positive, got {r}")
    if cost is None:
        return alpha * epochs_baseline / sum((1 / (2 * r)) ** i for i in range(S + 1))
    _check_levels(cost, S)
    return alpha * epochs_baseline * cost.forward[0] / _geometric_denominator(cost, r, S)


def level_epochs(epochs_target, r, S: int) -> list[float]:
    return [epochs_target / r ** i for i in range(S + 1)]


@dataclass
class LevelPlan:
    level: int
    count: int
    width: object
    epochs: float
    epochs_rounded: int
    flops: float


@dataclass
class BudgetPlan:
    S: int
    r: float
    epochs_target: float
    levels: list[LevelPlan]
    total_flops: float
    baseline_epochs: float | None = None
    normalized: float | None = None
    alpha: float | None = None
    convention: str = CONVENTION
    cost: CostModel | None = field(default=None, repr=False)

    def epochs(self, rounded: bool = True) -> list:
        return [lv.epochs_rounded if rounded else lv.epochs for lv in self.levels]

    def rows(self) -> list[dict]:
        """CSV rows in training order (narrowest level first)."""
        base = None
        if self.baseline_epochs and self.cost is not None:
            base = training_flops(self.cost.forward[0], self.baseline_epochs, self.cost.dataset_size)
        rows, cum = [], 0
        for lv in sorted(self.levels, key=lambda lv: -lv.level):
            cum += lv.flops
            rows.append({"level": lv.level, "count": lv.count, "width": lv.width,
                         "epochs": lv.epochs_rounded, "flops": lv.flops, "cumulative_flops": cum,
                         "normalized": cum / base if base else None})
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["level", "count", "width", "epochs", "flops", "cumulative_flops", "normalized"]
        writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        writer.writeheader()
        for row in self.rows():
            writer.writerow({k: "" if row[k] is None else row[k] for k in cols})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "S": self.S, "r": self.r, "epochs_target": self.epochs_target,
            "total_flops": self.total_flops, "baseline_epochs": self.baseline_epochs,
            "normalized_flops": self.normalized, "alpha": self.alpha, "convention": self.convention,
            "forward_flops": list(self.cost.forward) if self.cost else None,
            "dataset_size": self.cost.dataset_size if self.cost else None,
            "levels": [{"level": lv.level, "count": lv.count, "width": lv.width, "epochs": lv.epochs,
                        "epochs_rounded": lv.epochs_rounded, "flops": lv.flops} for lv in self.levels],
        }


def plan_from_epochs(cost: CostModel, epochs, S: int, r: float, baseline_epochs=None,
                     rounded: bool = True, alpha=None) -> BudgetPlan:
    """Plan for explicit per-level epochs (rounded before costing unless told otherwise)."""
    _check_levels(cost, S)
    epochs = list(epochs)
    if len(epochs) < S + 1:
        raise PlanError(f"epochs given for {len(epochs)} levels, plan needs {S + 1}")
    realized = [round_epochs(e) if rounded else e for e in epochs[:S + 1]]
    levels = [LevelPlan(i, 2 ** i, cost.widths[i] if cost.widths else None, epochs[i], round_epochs(epochs[i]),
                        2 ** i * training_flops(cost.forward[i], realized[i], cost.dataset_size))
              for i in range(S + 1)]
    total = pipeline_flops(cost, realized, S)
    norm = normalized_flops(total, baseline_epochs, cost) if baseline_epochs else None
    return BudgetPlan(S, r, epochs[0], levels, total, baseline_epochs, norm, alpha, cost=cost)


def plan_from_target(cost: CostModel, epochs_target, S: int, r: float, baseline_epochs=None) -> BudgetPlan:
    return plan_from_epochs(cost, level_epochs(epochs_target, r, S), S, r, baseline_epochs)


def plan_from_budget(cost: CostModel, budget, S: int, r: float, baseline_epochs=None) -> BudgetPlan:
    target = epochs_from_flops_budget(budget, cost, r, S, rounded=False)
    return plan_from_epochs(cost, level_epochs(target, r, S), S, r, baseline_epochs)


def plan_from_alpha(cost: CostModel, alpha, baseline_epochs, S: int, r: float) -> BudgetPlan:
    target = epochs_from_alpha(alpha, baseline_epochs, r, S, cost)
    return plan_from_epochs(cost, level_epochs(target, r, S), S, r, baseline_epochs, alpha=alpha)


def plan_from_epoch_split(cost: CostModel, epochs, S: int, r: float, baseline_epochs=None) -> BudgetPlan:
    return plan_from_epochs(cost, epoch_split_levels(epochs, r, S), S, r, baseline_epochs)
