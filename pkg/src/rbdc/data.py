"""Synthetic classification data and an IDX (MNIST-style) reader/writer."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import pack, unpack, write_atomic
from .errors import DomainError, FormatError

SPLITS = ("train", "eval")
_SPLIT_SALT = {"train": 0, "eval": 1}

# IDX type codes -> (big-endian dtype, name); only unsigned bytes carry images/labels
IDX_TYPES = {0x08: np.dtype(">u1")}


@dataclass(frozen=True)
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        if self.num_classes is None:
            object.__setattr__(self, "num_classes", int(labels.max()) + 1 if labels.size else 0)
        if len(self.samples) != len(labels):
            raise DomainError(f"{len(self.samples)} samples but {len(labels)} labels")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DomainError(f"labels outside [0, {self.num_classes})")
        if self.split not in SPLITS:
            raise DomainError(f"split must be one of {SPLITS}, got {self.split!r}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.samples.shape[1:])

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        """Yield (x, y) minibatches, shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            yield self.samples[idx], self.labels[idx]

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.samples.astype(dtype), self.labels, self.split, self.num_classes)


@dataclass(frozen=True)
class DataSplits:
    train: Dataset
    eval: Dataset


def class_means(num_classes: int, input_shape, seed: int, signal: float = 0.35) -> np.ndarray:
    rng = np.random.default_rng([seed, 0xC1A55])
    return signal * rng.standard_normal((num_classes, *input_shape))


def gen_synthetic(num_classes: int, per_class: int, input_shape=(1, 8, 8), seed: int = 0,
                  split: str = "train", signal: float = 0.35, noise: float = 1.0,
                  dtype=np.float64) -> Dataset:
    """Class-conditional Gaussians: fixed per-class means plus isotropic noise.

    The means depend only on ``seed``; the noise also depends on ``split``, so
    train and eval draws from the same seed share classes but not samples.
    """
    if num_classes < 1 or per_class < 1:
        raise DomainError("num_classes and per_class must be positive")
    if split not in SPLITS:
        raise DomainError(f"split must be one of {SPLITS}, got {split!r}")
    input_shape = tuple(input_shape)
    means = class_means(num_classes, input_shape, seed, signal)
    rng = np.random.default_rng([seed, _SPLIT_SALT[split]])
    labels = np.repeat(np.arange(num_classes), per_class)
    samples = means[labels] + noise * rng.standard_normal((len(labels), *input_shape))
    order = rng.permutation(len(labels))
    return Dataset(samples[order].astype(dtype), labels[order], split, num_classes)


def synthetic_splits(num_classes: int = 8, per_class_train: int = 64, per_class_eval: int = 32,
                     input_shape=(1, 8, 8), seed: int = 0, **kw) -> DataSplits:
    return DataSplits(gen_synthetic(num_classes, per_class_train, input_shape, seed, "train", **kw),
                      gen_synthetic(num_classes, per_class_eval, input_shape, seed, "eval", **kw))


# ---------------------------------------------------------------------------
# IDX


def parse_idx(buf: bytes, kind: str | None = None) -> np.ndarray:
    """Decode an IDX buffer.

    ``kind="images"`` scales bytes to [0, 1]; ``kind="labels"`` returns exact
    integers. By default a 1-d file is treated as labels, anything else as
    images.
    """
    buf = bytes(buf)
    if len(buf) < 4:
        raise FormatError(f"IDX header truncated at byte offset {len(buf)} (need 4 bytes)")
    if buf[0] != 0 or buf[1] != 0:
        raise FormatError(f"bad IDX magic at byte offset 0: {buf[:2].hex()} (expected 0000)")
    code, ndim = buf[2], buf[3]
    if code not in IDX_TYPES:
        raise FormatError(f"unsupported IDX type code 0x{code:02x} at byte offset 2")
    if ndim == 0:
        raise FormatError("IDX dimension count at byte offset 3 is zero")
    header_end = 4 + 4 * ndim
    if len(buf) < header_end:
        raise FormatError(f"IDX dimension sizes truncated at byte offset {len(buf)} (need {header_end})")
    dims = struct.unpack(f">{ndim}I", buf[4:header_end])
    dtype = IDX_TYPES[code]
    count = int(np.prod(dims, dtype=np.int64))
    end = header_end + count * dtype.itemsize
    if len(buf) < end:
        raise FormatError(f"IDX payload truncated at byte offset {len(buf)}: dims {dims} need {end} bytes")
    if len(buf) > end:
        warnings.warn(f"IDX buffer has {len(buf) - end} trailing bytes after offset {end}; ignored",
                      stacklevel=2)
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=header_end).reshape(dims)
    if kind is None:
        kind = "labels" if ndim == 1 else "images"
    if kind == "labels":
        return data.astype(np.int64)
    if kind == "images":
        return data.astype(np.float64) / 255.0
    raise ValueError(f"kind must be 'images' or 'labels', got {kind!r}")


def serialize_idx(array: np.ndarray, kind: str | None = None) -> bytes:
    """Encode labels (integers 0..255) or images in [0, 1] as unsigned-byte IDX."""
    array = np.asarray(array)
    if kind is None:
        kind = "labels" if np.issubdtype(array.dtype, np.integer) else "images"
    if kind == "images":
        if array.size and (array.min() < 0 or array.max() > 1):
            raise DomainError("image values must lie in [0, 1]")
        payload = np.rint(array * 255.0).astype(np.uint8)
    elif kind == "labels":
        if array.size and (array.min() < 0 or array.max() > 255):
            raise DomainError("labels must fit in one unsigned byte")
        payload = array.astype(np.uint8)
    else:
        raise ValueError(f"kind must be 'images' or 'labels', got {kind!r}")
    header = bytes([0, 0, 0x08, payload.ndim]) + struct.pack(f">{payload.ndim}I", *payload.shape)
    return header + payload.tobytes()


def load_idx(images_path, labels_path, split: str = "train", num_classes: int | None = None) -> Dataset:
    """Build a dataset from an image file and a label file; images gain a channel axis."""
    images = parse_idx(Path(images_path).read_bytes(), "images")
    labels = parse_idx(Path(labels_path).read_bytes(), "labels")
    if images.ndim == 3:
        images = images[:, None]
    return Dataset(images, labels, split, num_classes)


# ---------------------------------------------------------------------------
# caching in the checkpoint container


def encode_dataset(ds: Dataset) -> bytes:
    samples = np.ascontiguousarray(ds.samples, dtype="<f8")
    labels = np.ascontiguousarray(ds.labels, dtype="<i8")
    manifest = {"kind": "dataset", "split": ds.split, "num_classes": ds.num_classes,
                "samples": {"shape": list(samples.shape), "precision": "float64", "byte_offset": 0},
                "labels": {"shape": list(labels.shape), "precision": "int64", "byte_offset": samples.nbytes}}
    return pack(manifest, samples.tobytes() + labels.tobytes())


def decode_dataset(raw: bytes) -> Dataset:
    manifest, blob = unpack(raw)
    if manifest.get("kind") != "dataset":
        raise FormatError(f"not a dataset file (kind={manifest.get('kind')!r})")
    try:
        s, l = manifest["samples"], manifest["labels"]
        n_s, n_l = int(np.prod(s["shape"])), int(np.prod(l["shape"]))
        if s["byte_offset"] + 8 * n_s > len(blob) or l["byte_offset"] + 8 * n_l > len(blob):
            raise FormatError("dataset record runs past the blob")
        samples = np.frombuffer(blob, "<f8", n_s, s["byte_offset"]).reshape(s["shape"]).astype(np.float64)
        labels = np.frombuffer(blob, "<i8", n_l, l["byte_offset"]).reshape(l["shape"]).astype(np.int64)
        return Dataset(samples, labels, manifest["split"], manifest["num_classes"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed dataset manifest: {exc}") from None


def save_dataset(ds: Dataset, path) -> None:
    write_atomic(path, encode_dataset(ds))


def load_dataset(path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())
