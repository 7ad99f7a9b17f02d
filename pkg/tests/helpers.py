"""Shared builders for tests."""
from __future__ import annotations

import numpy as np

from rbdc import checkpoint as C
from rbdc.zoo import ModelSpec, build, model_from_arrays

NARROW = {
    "mlp": ModelSpec("mlp", 8),
    "mini_cnn": ModelSpec("mini_cnn", 4, depth=1),
    "mini_vit": ModelSpec("mini_vit", 8, heads=1, head_dim=8, patch_size=4),
}


def perturbed_checkpoint(spec: ModelSpec, seed: int, dtype=np.float64) -> C.Checkpoint:
    """A checkpoint whose every tensor (biases, norms, running stats) is non-trivial,
    standing in for a trained model."""
    rng = np.random.default_rng([seed, 99])
    arrays = {}
    for name, arr in build(spec, seed, dtype=dtype).arrays().items():
        kind = name.rsplit(".", 1)[-1]
        if kind == "running_var":
            arrays[name] = rng.uniform(0.5, 2.0, arr.shape)
        elif kind == "running_mean":
            arrays[name] = 0.3 * rng.standard_normal(arr.shape)
        elif "norm" in name or name.endswith("bn.weight") or name.startswith("stem_bn"):
            arrays[name] = arr + 0.2 * rng.standard_normal(arr.shape)
        else:
            arrays[name] = arr + 0.15 * rng.standard_normal(arr.shape)
    model = model_from_arrays(spec, arrays, dtype=dtype)
    return C.from_model(model, {"seed": seed, "epochs_trained": 1})


def probes(spec: ModelSpec, n: int = 128, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, *spec.input_shape))
