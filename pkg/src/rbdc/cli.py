"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (config, spec, file format,
compatibility), 2 verification failure, 3 numeric failure during training.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import budget as B
from . import checkpoint as ckpt_io
from .coupling import VERIFY_MODES, couple_checkpoint, verify_ensemble_equivalence
from .data import DataSplits, load_dataset, load_idx, synthetic_splits
from .errors import ConfigError, InputError, NumericError, TrainingError
from .protocol import (MODES, ExperimentPlan, TrainConfig, curve_csv, read_curve_csv, recursion_depth,
                       run_experiment)
from .zoo import ModelSpec

EXIT_OK, EXIT_INPUT, EXIT_VERIFY, EXIT_TRAINING = 0, 1, 2, 3

_num = {"type": "number"}
_int = {"type": "integer"}
_pos_int = {"type": "integer", "minimum": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": {
            "type": "object", "additionalProperties": False, "required": ["family", "width"],
            "properties": {
                "family": {"enum": ["mlp", "mini_cnn", "mini_vit"]}, "width": _pos_int, "depth": _pos_int,
                "input_shape": {"type": "array", "items": _pos_int, "minItems": 1},
                "num_classes": _pos_int, "heads": _pos_int, "head_dim": _pos_int, "patch_size": _pos_int,
                "min_width": _pos_int,
            },
        },
        "train": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "optimizer": {"enum": ["adamw", "sgd"]}, "lr": _num, "weight_decay": _num, "momentum": _num,
                "betas": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}, "eps": _num,
                "batch_size": _pos_int, "warmup_epochs": _num, "epochs": _int, "seed": _int,
                "precision": {"enum": ["float32", "float64"]},
            },
        },
        "plan": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "protocol": {"enum": ["baseline", "rbdc"]}, "r": {"type": "number", "exclusiveMinimum": 0},
                "steps": {"type": "integer", "minimum": 0}, "min_size": _pos_int,
                "mode": {"enum": list(MODES)}, "padding": {"enum": ["zero", "random"]},
                "budget": {"type": "number", "exclusiveMinimum": 0},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "epochs_target": {"type": "number", "minimum": 0},
                "epochs_per_level": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "baseline_epochs": {"type": "number", "exclusiveMinimum": 0},
                "forward_flops": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "dataset_size": _pos_int,
                "seeds": {"type": "array", "items": _int, "minItems": 1},
            },
        },
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "source": {"enum": ["synthetic", "idx", "cached"]}, "num_classes": _pos_int,
                "per_class_train": _pos_int, "per_class_eval": _pos_int, "seed": _int,
                "signal": _num, "noise": _num,
                "train_images": {"type": "string"}, "train_labels": {"type": "string"},
                "eval_images": {"type": "string"}, "eval_labels": {"type": "string"},
                "train_path": {"type": "string"}, "eval_path": {"type": "string"},
            },
        },
    },
}

DEFAULT_MODEL = {"family": "mlp", "width": 32}


def load_config(path) -> dict:
    if path is None:
        cfg: dict = {}
    else:
        try:
            cfg = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None


def apply_flags(cfg: dict, args) -> dict:
    """Flags override the matching config keys."""
    cfg = json.loads(json.dumps(cfg))
    plan = cfg.setdefault("plan", {})
    train = cfg.setdefault("train", {})
    if getattr(args, "seed", None) is not None:
        train["seed"] = args.seed
        plan["seeds"] = [args.seed]
    for flag, key in (("ratio", "r"), ("steps", "steps"), ("mode", "mode"), ("padding", "padding")):
        value = getattr(args, flag, None)
        if value is not None:
            plan[key] = value
    validate_config(cfg)
    return cfg


def model_spec(cfg: dict) -> ModelSpec:
    return ModelSpec.from_dict(cfg.get("model", DEFAULT_MODEL))


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg.get("train", {}))


def load_data(cfg: dict, spec: ModelSpec) -> DataSplits:
    d = dict(cfg.get("data", {}))
    source = d.pop("source", "synthetic")
    if source == "synthetic":
        return synthetic_splits(num_classes=d.get("num_classes", spec.num_classes),
                                per_class_train=d.get("per_class_train", 64),
                                per_class_eval=d.get("per_class_eval", 32), input_shape=spec.input_shape,
                                seed=d.get("seed", 0), signal=d.get("signal", 0.35), noise=d.get("noise", 1.0))
    try:
        if source == "idx":
            return DataSplits(load_idx(d["train_images"], d["train_labels"], "train", spec.num_classes),
                              load_idx(d["eval_images"], d["eval_labels"], "eval", spec.num_classes))
        return DataSplits(load_dataset(d["train_path"]), load_dataset(d["eval_path"]))
    except KeyError as exc:
        raise ConfigError(f"data source {source!r} needs {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read data: {exc}") from None


def dataset_size(cfg: dict, spec: ModelSpec) -> int:
    plan = cfg.get("plan", {})
    if "dataset_size" in plan:
        return plan["dataset_size"]
    d = cfg.get("data", {})
    if d.get("source", "synthetic") == "synthetic":
        return d.get("num_classes", spec.num_classes) * d.get("per_class_train", 64)
    return len(load_data(cfg, spec).train)


def build_plan(cfg: dict) -> B.BudgetPlan:
    """Budget plan from config; the first present of epochs_per_level,
    epochs_target, budget, alpha decides, else train.epochs is split."""
    plan = cfg.get("plan", {})
    S = plan.get("steps", 1)
    r = plan.get("r", 2.0)
    baseline = plan.get("baseline_epochs")
    if "forward_flops" in plan:
        cost = B.CostModel(plan["forward_flops"], plan.get("dataset_size", 1))
    else:
        spec = model_spec(cfg)
        cost = B.CostModel.from_spec(spec, S, dataset_size(cfg, spec))
    if "epochs_per_level" in plan:
        return B.plan_from_epochs(cost, plan["epochs_per_level"], S, r, baseline)
    if "epochs_target" in plan:
        return B.plan_from_target(cost, plan["epochs_target"], S, r, baseline)
    if "budget" in plan:
        return B.plan_from_budget(cost, plan["budget"], S, r, baseline)
    if "alpha" in plan:
        if baseline is None:
            raise ConfigError("alpha planning needs plan.baseline_epochs")
        return B.plan_from_alpha(cost, plan["alpha"], baseline, S, r)
    epochs = cfg.get("train", {}).get("epochs", TrainConfig().epochs)
    return B.plan_from_epoch_split(cost, epochs, S, r, baseline or epochs)


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    ckpt_io.write_atomic(path, text.encode())
    return path


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def cmd_plan(args) -> int:
    cfg = apply_flags(load_config(args.config), args)
    plan = build_plan(cfg)
    out = Path(args.out)
    _write(out, "plan.json", _dump(plan.to_dict()))
    _write(out, "plan.csv", plan.to_csv())
    summary = {"total_flops": plan.total_flops, "normalized_flops": plan.normalized,
               "epochs": plan.epochs(), "out": str(out)}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = apply_flags(load_config(args.config), args)
    spec = model_spec(cfg)
    n = dataset_size(cfg, spec)
    epochs = cfg.get("train", {}).get("epochs", TrainConfig().epochs)
    fwd = B.forward_flops(spec)
    result = {"spec": spec.to_dict(), "forward_flops": fwd,
              "breakdown": dict(B.flops_breakdown(spec)), "epochs": epochs, "dataset_size": n,
              "training_flops": B.training_flops(fwd, epochs, n), "convention": B.CONVENTION}
    _write(Path(args.out), "flops.json", _dump(result))
    print(json.dumps({"forward_flops": fwd, "training_flops": result["training_flops"]}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = apply_flags(load_config(args.config), args)
    spec = model_spec(cfg)
    config = train_config(cfg)
    plan = cfg.get("plan", {})
    protocol = plan.get("protocol", "rbdc")
    if protocol == "baseline":
        steps = 0
    elif "min_size" in plan:
        steps = recursion_depth(spec, plan["min_size"])
    else:
        steps = plan.get("steps", 1)
    exp = ExperimentPlan(protocol, spec, epochs=config.epochs,
                         baseline_epochs=plan.get("baseline_epochs", config.epochs),
                         seeds=tuple(plan.get("seeds", [config.seed])), steps=steps, r=plan.get("r", 2.0),
                         mode=plan.get("mode", "epoch_split"), padding=plan.get("padding", "zero"))
    out = Path(args.out)
    rows, records = run_experiment([exp], load_data(cfg, spec), config, save_dir=out)
    _write(out, "curve.csv", curve_csv(rows))
    for row in rows:
        print(json.dumps(row))
    return EXIT_OK


def _probes(spec: ModelSpec, n: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, *spec.input_shape))


def cmd_couple(args) -> int:
    c1, c2 = ckpt_io.load(args.narrow1), ckpt_io.load(args.narrow2)
    seed = args.seed if args.seed is not None else 0
    wide = couple_checkpoint(c1, c2, args.padding or "zero", seed=seed)
    out = Path(args.out)
    ckpt_io.save(wide, out / "wide.ckpt")
    report = verify_ensemble_equivalence(wide, c1, c2, _probes(c1.spec, args.probes, seed), args.verify_mode)
    _write(out, "report.json", _dump(report.to_dict()))
    print(json.dumps({"wide": str(out / "wide.ckpt"), "pass": report.passed,
                      "max_deviation": report.max_deviation}))
    return EXIT_OK


def cmd_verify(args) -> int:
    wide = ckpt_io.load(args.wide)
    n1, n2 = ckpt_io.load(args.narrow1), ckpt_io.load(args.narrow2)
    seed = args.seed if args.seed is not None else 0
    report = verify_ensemble_equivalence(wide, n1, n2, _probes(n1.spec, args.probes, seed), args.verify_mode)
    _write(Path(args.out), "report.json", _dump(report.to_dict()))
    print(json.dumps({"pass": report.passed, "max_deviation": report.max_deviation,
                      "tolerance": report.tolerance}))
    return EXIT_OK if report.passed else EXIT_VERIFY


def cmd_report(args) -> int:
    rows = []
    for src in args.inputs:
        path = Path(src)
        if path.is_dir():
            path = path / "curve.csv"
        try:
            rows.extend(read_curve_csv(path.read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
    rows.sort(key=lambda r: (r["protocol"], r["steps"], r["r"], r["normalized_flops"], r["seed"]))
    text = curve_csv(rows)
    _write(Path(args.out), "report.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    """Usage errors exit 1; code 2 is reserved for verification failures."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rbdc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, planning=True):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=".", help="output directory")
        if planning:
            p.add_argument("--ratio", type=float, help="training ratio r")
            p.add_argument("--steps", type=int, help="number of width halvings S")
            p.add_argument("--mode", choices=MODES)
            p.add_argument("--padding", choices=("zero", "random"))
        return p

    common(sub.add_parser("plan", help="epoch/FLOPs plan as JSON and CSV")).set_defaults(func=cmd_plan)
    common(sub.add_parser("flops", help="forward and training FLOPs")).set_defaults(func=cmd_flops)
    common(sub.add_parser("train", help="run the configured protocol")).set_defaults(func=cmd_train)

    for name, func, positional in (("couple", cmd_couple, ("narrow1", "narrow2")),
                                   ("verify", cmd_verify, ("wide", "narrow1", "narrow2"))):
        p = sub.add_parser(name)
        for pos in positional:
            p.add_argument(pos)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=".")
        p.add_argument("--probes", type=int, default=128)
        p.add_argument("--verify-mode", choices=VERIFY_MODES, default="exact")
        if name == "couple":
            p.add_argument("--padding", choices=("zero", "random"))
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="merge curve CSVs from train runs")
    p.add_argument("inputs", nargs="+", help="curve CSV files or train output directories")
    p.add_argument("--out", default=".")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TrainingError, NumericError) as exc:
        print(f"rbdc: training failed: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (InputError, ValueError) as exc:
        print(f"rbdc: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
