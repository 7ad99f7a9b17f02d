"""Training loops: the standard baseline and the recursive coupling driver."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from . import tensor as T
from .budget import (CostModel, epoch_split_levels, epochs_from_flops_budget, forward_flops,
                     level_epochs, round_epochs, training_flops)
from .checkpoint import Checkpoint
from .coupling import PaddingMode, couple_checkpoint
from .data import Dataset, DataSplits
from .errors import ConfigError, DomainError, NumericError, SpecError, TrainingError
from .zoo import Model, ModelSpec, build

OPTIMIZERS = ("adamw", "sgd")
MODES = ("epoch_split", "flops_split")
EVAL_BATCH = 256


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 0.05
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 64
    warmup_epochs: float = 2
    epochs: int = 10
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        self.validate()

    def validate(self) -> None:
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if min(self.lr, self.weight_decay, self.momentum, *self.betas, self.eps, self.warmup_epochs) < 0:
            raise ConfigError("rates, betas and warmup must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be positive and epochs nonnegative")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigError(f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}")
        if self.precision not in ckpt_io.PRECISIONS:
            raise ConfigError(f"precision must be one of {list(ckpt_io.PRECISIONS)}")

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.precision)

    def phase(self, epochs: int, seed: int | None = None) -> "TrainConfig":
        """The same recipe for a phase of ``epochs``; warmup shrinks to fit short phases."""
        warmup = min(self.warmup_epochs, max(epochs - 1, 0) / 2) if epochs <= self.warmup_epochs \
            else self.warmup_epochs
        return dataclasses.replace(self, epochs=epochs, warmup_epochs=warmup,
                                   seed=self.seed if seed is None else seed)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


def warmup_steps(config: TrainConfig, steps_per_epoch: int) -> int:
    total = config.epochs * steps_per_epoch
    return max(1, min(round(config.warmup_epochs * steps_per_epoch), total // 2))


def lr_schedule(step: int, total_steps: int, warmup: int, base_lr: float) -> float:
    """Linear warmup from 0, then cosine decay reaching 0 at the last step."""
    if step < warmup:
        return base_lr * step / warmup
    span = total_steps - 1 - warmup
    progress = 1.0 if span <= 0 else min(1.0, (step - warmup) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay applied uniformly to every parameter."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.betas, self.eps, self.weight_decay = betas, eps, weight_decay
        self.t = 0
        self.state = {k: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)} for k, p in params.items()}

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for k, p in self.params.items():
            g, s = grads[k], self.state[k]
            s["m"] = b1 * s["m"] + (1 - b1) * g
            s["v"] = b2 * s["v"] + (1 - b2) * g * g
            update = (s["m"] / c1) / (np.sqrt(s["v"] / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype)


class SGD:
    """SGD with heavy-ball momentum and L2 weight decay."""

    def __init__(self, params: dict, momentum=0.9, weight_decay=0.0):
        self.params = params
        self.momentum, self.weight_decay = momentum, weight_decay
        self.t = 0
        self.state = {k: {"momentum": np.zeros_like(p.data)} for k, p in params.items()}

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        for k, p in self.params.items():
            s = self.state[k]
            s["momentum"] = self.momentum * s["momentum"] + grads[k] + self.weight_decay * p.data
            p.data = (p.data - lr * s["momentum"]).astype(p.dtype)


def make_optimizer(params: dict, config: TrainConfig):
    if config.optimizer == "adamw":
        return AdamW(params, config.betas, config.eps, config.weight_decay)
    return SGD(params, config.momentum, config.weight_decay)


@dataclass
class RunRecord:
    """Training history of one node of the coupling tree (or of a baseline run)."""

    path: str
    width: int
    seed: int
    epochs: int
    config: dict
    init_eval_loss: float
    init_eval_accuracy: float
    history: list[dict] = field(default_factory=list)
    flops: int = 0
    cumulative_flops: int = 0
    digest: str | None = None
    checkpoint_path: str | None = None
    children: list["RunRecord"] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.history[-1]["eval_accuracy"] if self.history else self.init_eval_accuracy

    def nodes(self):
        yield self
        for child in self.children:
            yield from child.nodes()

    def level_widths(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}

        def walk(rec, level):
            out.setdefault(level, []).append(rec.width)
            for c in rec.children:
                walk(c, level + 1)

        walk(self, 0)
        return out

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "children"}
        d["children"] = [c.to_dict() for c in self.children]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        d = dict(d)
        children = [cls.from_dict(c) for c in d.pop("children", [])]
        return cls(**d, children=children)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(model: Model, data: Dataset, batch: int = EVAL_BATCH) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in eval mode."""
    total, correct = 0.0, 0
    x_all = data.samples.astype(model.dtype, copy=False)
    for start in range(0, len(data), batch):
        x, y = x_all[start:start + batch], data.labels[start:start + batch]
        logits = model(x, train=False)
        total += float(T.cross_entropy(logits, y).data) * len(y)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return total / len(data), correct / len(data)


def _splits(data) -> DataSplits:
    if isinstance(data, DataSplits):
        return data
    if isinstance(data, Dataset):
        return DataSplits(data, data)
    raise TypeError(f"expected Dataset or DataSplits, got {type(data).__name__}")


def train(model: Model, data, config: TrainConfig, on_step: Callable | None = None, path: str = "root",
          base_flops: int = 0, metadata: dict | None = None) -> tuple[Checkpoint, RunRecord]:
    """Minibatch training with a fresh optimizer and a fresh warmup+cosine schedule.

    ``on_step(path, step, lr, optimizer)`` is called before every update.
    ``base_flops`` is added to the cumulative FLOPs column (children's cost).
    """
    splits = _splits(data)
    train_set = splits.train.astype(model.dtype)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    warmup = warmup_steps(config, steps_per_epoch)
    params = model.trainable()
    opt = make_optimizer(params, config)
    rng = np.random.default_rng([config.seed, 0x5EED])
    fwd = forward_flops(model.spec)

    init_loss, init_acc = evaluate(model, splits.eval)
    record = RunRecord(path, model.spec.width, config.seed, config.epochs, config.to_dict(),
                       init_loss, init_acc, cumulative_flops=base_flops)
    step = 0
    for epoch in range(config.epochs):
        loss_sum = 0.0
        for batch_idx, (x, y) in enumerate(train_set.batches(config.batch_size, rng)):
            lr = lr_schedule(step, total_steps, warmup, config.lr)
            if on_step is not None:
                on_step(path, step, lr, opt)
            try:
                with T.GradientTape() as tape:
                    loss = T.cross_entropy(model(x, train=True), y)
                grads = tape.backward(loss, list(params.values()))
            except NumericError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch}, batch {batch_idx}: {exc}",
                                    epoch, batch_idx) from exc
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {batch_idx}", epoch, batch_idx)
            opt.step({k: grads[p] for k, p in params.items()}, lr)
            loss_sum += float(loss.data) * len(y)
            step += 1
        try:
            eval_loss, eval_acc = evaluate(model, splits.eval)
        except NumericError as exc:
            raise TrainingError(f"non-finite value evaluating after epoch {epoch}, batch {batch_idx}: {exc}",
                                epoch, batch_idx) from exc
        record.flops = training_flops(fwd, epoch + 1, n)
        record.cumulative_flops = base_flops + record.flops
        record.history.append({"epoch": epoch, "train_loss": loss_sum / n, "eval_loss": eval_loss,
                               "eval_accuracy": eval_acc, "cumulative_flops": record.cumulative_flops})
    meta = dict(metadata or {})
    meta.update(seed=config.seed, epochs_trained=config.epochs)
    ckpt = ckpt_io.from_model(model, meta)
    record.digest = ckpt.digest()
    return ckpt, record


def node_seed(root_seed: int, path: str) -> int:
    """Seed for a tree node, derived from the root seed and the node's path only."""
    h = hashlib.sha256(f"{root_seed}:{path}".encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def recursion_depth(spec: ModelSpec, min_size: int) -> int:
    """Number of halvings until the width drops below ``min_size``."""
    S, s = 0, spec
    while s.width >= min_size:
        if s.width % 2:
            raise SpecError(f"width {s.width} must be halved but is odd")
        s = s.halve()
        S += 1
    return S


def rbdc_level_epochs(spec: ModelSpec, epochs, min_size: int, r: float, mode: str,
                      dataset_size: int) -> list[float]:
    """Pre-rounding epochs per level (index 0 = target) for either allocation mode.

    In ``flops_split`` mode ``epochs`` names a baseline run whose FLOPs the
    whole tree is allowed to spend.
    """
    if r <= 0:
        raise DomainError(f"training ratio must be positive, got {r}")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    S = recursion_depth(spec, min_size)
    if mode == "epoch_split":
        return epoch_split_levels(epochs, r, S)
    cost = CostModel.from_spec(spec, S, dataset_size)
    budget = training_flops(cost.forward[0], epochs, dataset_size)
    return level_epochs(epochs_from_flops_budget(budget, cost, r, S, rounded=False), r, S)


def rbdc_train(spec: ModelSpec, epochs, min_size: int, r: float = 2.0, padding="zero", data=None,
               config: TrainConfig | None = None, mode: str = "epoch_split", seed: int | None = None,
               save_dir=None, on_step: Callable | None = None,
               on_couple: Callable | None = None) -> tuple[Checkpoint, RunRecord]:
    """Train narrow models recursively, couple them, and train each wide model.

    Subtrees run one after another; every node's seed comes from
    :func:`node_seed`, so the result does not depend on that order.
    ``on_couple(path, wide, narrow1, narrow2)`` sees each freshly coupled checkpoint.
    """
    config = config or TrainConfig()
    splits = _splits(data)
    padding = PaddingMode.parse(padding)
    root_seed = config.seed if seed is None else seed
    levels = rbdc_level_epochs(spec, epochs, min_size, r, mode, len(splits.train))
    save_dir = Path(save_dir) if save_dir is not None else None

    def finish(ckpt, record):
        if save_dir is not None:
            target = save_dir / (record.path.replace("/", "_") + ".ckpt")
            ckpt_io.save(ckpt, target)
            record.checkpoint_path = str(target)
        return ckpt, record

    def node(spec: ModelSpec, level: int, path: str):
        s = node_seed(root_seed, path)
        phase = config.phase(round_epochs(levels[level]), seed=s)
        if level == len(levels) - 1:
            model = build(spec, s, dtype=config.dtype)
            return finish(*train(model, splits, phase, on_step, path))
        narrow = spec.halve()
        c1, rec1 = node(narrow, level + 1, f"{path}/0")
        c2, rec2 = node(narrow, level + 1, f"{path}/1")
        wide = couple_checkpoint(c1, c2, padding, seed=s)
        if on_couple is not None:
            on_couple(path, wide, c1, c2)
        model = ckpt_io.to_model(wide, dtype=config.dtype)
        base = rec1.cumulative_flops + rec2.cumulative_flops
        ckpt, rec = train(model, splits, phase, on_step, path, base, metadata=wide.metadata)
        rec.children = [rec1, rec2]
        return finish(ckpt, rec)

    ckpt, record = node(spec, 0, "root")
    if save_dir is not None:
        ckpt_io.write_atomic(save_dir / "record.json", record.to_json().encode())
    return ckpt, record


def realized_level_epochs(record: RunRecord) -> list[int]:
    out, rec = [], record
    while True:
        out.append(rec.epochs)
        if not rec.children:
            return out
        rec = rec.children[0]


# ---------------------------------------------------------------------------
# experiments

CURVE_COLUMNS = ("protocol", "steps", "r", "normalized_flops", "accuracy", "seed")


@dataclass(frozen=True)
class ExperimentPlan:
    """One point family of an accuracy-vs-FLOPs curve.

    ``protocol`` is ``baseline`` or ``rbdc``. For ``rbdc`` the tree has
    ``steps`` halvings and ``epochs`` is interpreted per ``mode``.
    """

    protocol: str
    spec: ModelSpec
    epochs: int
    baseline_epochs: int
    seeds: tuple[int, ...] = (0,)
    steps: int = 0
    r: float = 2.0
    mode: str = "epoch_split"
    padding: str = "zero"

    def __post_init__(self):
        if self.protocol not in ("baseline", "rbdc"):
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        object.__setattr__(self, "seeds", tuple(self.seeds))


def run_experiment(plans, data, config: TrainConfig | None = None,
                   save_dir=None) -> tuple[list[dict], list[RunRecord]]:
    """Run every (plan, seed) from scratch; return curve rows and run records."""
    config = config or TrainConfig()
    splits = _splits(data)
    n = len(splits.train)
    rows, records = [], []
    for p_idx, plan in enumerate(plans):
        baseline = training_flops(forward_flops(plan.spec), plan.baseline_epochs, n)
        for seed in plan.seeds:
            run_dir = Path(save_dir) / f"plan{p_idx}_seed{seed}" if save_dir is not None else None
            if plan.protocol == "baseline" or plan.steps == 0:
                model = build(plan.spec, seed, dtype=config.dtype)
                ckpt, rec = train(model, splits, config.phase(plan.epochs, seed=seed))
                if run_dir is not None:
                    ckpt_io.save(ckpt, run_dir / "root.ckpt")
                    rec.checkpoint_path = str(run_dir / "root.ckpt")
                    ckpt_io.write_atomic(run_dir / "record.json", rec.to_json().encode())
            else:
                min_size = plan.spec.width // 2 ** plan.steps + 1
                ckpt, rec = rbdc_train(plan.spec, plan.epochs, min_size, plan.r, plan.padding, splits,
                                       config, plan.mode, seed, save_dir=run_dir)
            rows.append({"protocol": plan.protocol, "steps": plan.steps, "r": plan.r,
                         "normalized_flops": rec.cumulative_flops / baseline,
                         "accuracy": rec.final_accuracy, "seed": seed})
            records.append(rec)
    return rows, records


def curve_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CURVE_COLUMNS, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def read_curve_csv(text: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CURVE_COLUMNS:
        raise ConfigError(f"curve CSV must have columns {CURVE_COLUMNS}, got {reader.fieldnames}")
    return [{"protocol": row["protocol"], "steps": int(row["steps"]), "r": float(row["r"]),
             "normalized_flops": float(row["normalized_flops"]), "accuracy": float(row["accuracy"]),
             "seed": int(row["seed"])} for row in reader]
