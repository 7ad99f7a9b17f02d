"""Single-file checkpoint format.

Layout (all integers little-endian)::

    8 bytes   magic  b"RBDCCKPT"
    4 bytes   format version (uint32, currently 1)
    8 bytes   manifest length in bytes (uint64)
    n bytes   UTF-8 JSON manifest, keys sorted
    rest      blob: raw little-endian tensor data

The manifest holds ``kind`` ("checkpoint" or "dataset"), the model spec, free
metadata and one record per tensor: ``name``, ``role``, ``shape``,
``precision`` ("float32" / "float64") and ``byte_offset`` into the blob.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .zoo import LayerRole, Model, ModelSpec, model_from_arrays, param_layout

MAGIC = b"RBDCCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")
PRECISIONS = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def precision_name(dtype) -> str:
    dtype = np.dtype(dtype)
    for name, dt in PRECISIONS.items():
        if dt == dtype.newbyteorder("<"):
            return name
    raise FormatError(f"unsupported precision {dtype}")


def _canonical(obj) -> dict:
    """JSON round-trip so tuples become lists and equality survives save/load."""
    return json.loads(json.dumps(obj, sort_keys=True))


@dataclass(frozen=True)
class TensorRecord:
    name: str
    role: LayerRole
    shape: tuple[int, ...]
    precision: str
    byte_offset: int

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * PRECISIONS[self.precision].itemsize

    def to_dict(self) -> dict:
        return {"name": self.name, "role": self.role.value, "shape": list(self.shape),
                "precision": self.precision, "byte_offset": self.byte_offset}

    @classmethod
    def from_dict(cls, d: dict) -> "TensorRecord":
        name = d.get("name", "?")
        try:
            role = LayerRole(d["role"])
        except (KeyError, ValueError):
            raise FormatError(f"record {name!r}: unknown role {d.get('role')!r}") from None
        if d.get("precision") not in PRECISIONS:
            raise FormatError(f"record {name!r}: unknown precision {d.get('precision')!r}")
        try:
            shape = tuple(int(s) for s in d["shape"])
            offset = int(d["byte_offset"])
        except (KeyError, TypeError, ValueError):
            raise FormatError(f"record {name!r}: malformed shape or offset") from None
        return cls(name, role, shape, d["precision"], offset)


@dataclass
class Checkpoint:
    spec: ModelSpec
    records: list[TensorRecord]
    blob: bytes
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.metadata = _canonical(self.metadata)

    @classmethod
    def from_arrays(cls, spec: ModelSpec, arrays: dict[str, np.ndarray], metadata: dict | None = None,
                    precision: str | None = None) -> "Checkpoint":
        records, chunks, offset = [], [], 0
        for name, role, shape in param_layout(spec):
            arr = np.asarray(arrays[name])
            prec = precision or precision_name(arr.dtype)
            raw = np.ascontiguousarray(arr, dtype=PRECISIONS[prec]).tobytes()
            records.append(TensorRecord(name, role, tuple(shape), prec, offset))
            chunks.append(raw)
            offset += len(raw)
        ckpt = cls(spec, records, b"".join(chunks), metadata or {})
        ckpt.validate()
        return ckpt

    @property
    def precision(self) -> str:
        return self.records[0].precision

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for rec in self.records:
            dt = PRECISIONS[rec.precision]
            out[rec.name] = np.frombuffer(self.blob, dtype=dt, count=int(np.prod(rec.shape, dtype=np.int64)),
                                          offset=rec.byte_offset).reshape(rec.shape).astype(dt.newbyteorder("="))
        return out

    def roles(self) -> dict[str, LayerRole]:
        return {rec.name: rec.role for rec in self.records}

    def param_count(self) -> int:
        return int(sum(np.prod(rec.shape, dtype=np.int64) for rec in self.records))

    def digest(self) -> str:
        """Content hash over spec, records and blob (metadata excluded)."""
        h = hashlib.sha256()
        h.update(json.dumps(self.spec.to_dict(), sort_keys=True).encode())
        h.update(json.dumps([r.to_dict() for r in self.records], sort_keys=True).encode())
        h.update(self.blob)
        return h.hexdigest()

    def with_metadata(self, **updates) -> "Checkpoint":
        return dataclasses.replace(self, metadata={**self.metadata, **updates})

    def validate(self) -> None:
        """Check records against the blob, the spec layout and the lineage tree."""
        names = set()
        end = 0
        for rec in sorted(self.records, key=lambda r: r.byte_offset):
            if rec.name in names:
                raise FormatError(f"duplicate record {rec.name!r}")
            names.add(rec.name)
            if rec.byte_offset < end:
                raise FormatError(f"record {rec.name!r} overlaps the previous record")
            end = rec.byte_offset + rec.nbytes
            if end > len(self.blob):
                raise FormatError(f"record {rec.name!r} runs past the blob "
                                  f"(needs bytes {rec.byte_offset}..{end}, blob has {len(self.blob)})")
        expected = [(n, r, tuple(s)) for n, r, s in param_layout(self.spec)]
        actual = [(rec.name, rec.role, rec.shape) for rec in self.records]
        if actual != expected:
            missing = [e for e in expected if e not in actual]
            extra = [a for a in actual if a not in expected]
            first = (missing or extra or [("ordering",)])[0][0]
            raise FormatError(f"records do not match the layout of the spec (first offending record: {first!r})")
        _check_lineage(self.metadata.get("lineage", []), self.spec.width)


def _check_lineage(children, width) -> None:
    if len(children) not in (0, 2):
        raise FormatError(f"lineage node at width {width} has {len(children)} children")
    for child in children:
        if child.get("width") != width // 2:
            raise FormatError(f"lineage child width {child.get('width')} under parent width {width}")
        _check_lineage(child.get("lineage", []), child["width"])


def lineage_entry(ckpt: Checkpoint) -> dict:
    return {"digest": ckpt.digest(), "width": ckpt.spec.width, "seed": ckpt.metadata.get("seed"),
            "lineage": ckpt.metadata.get("lineage", [])}


def lineage_depth(ckpt_or_lineage) -> int:
    children = ckpt_or_lineage.metadata.get("lineage", []) if isinstance(ckpt_or_lineage, Checkpoint) \
        else ckpt_or_lineage
    return 0 if not children else 1 + max(lineage_depth(c.get("lineage", [])) for c in children)


# ---------------------------------------------------------------------------
# container encoding shared with dataset caching


def pack(manifest: dict, blob: bytes) -> bytes:
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(text)) + text + blob


def unpack(raw: bytes) -> tuple[dict, bytes]:
    if len(raw) < _HEADER.size:
        raise FormatError(f"file too short for header ({len(raw)} bytes)")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} (expected {VERSION})")
    start = _HEADER.size
    if start + mlen > len(raw):
        raise FormatError(f"manifest length {mlen} exceeds file size {len(raw)}")
    try:
        manifest = json.loads(raw[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid JSON: {exc}") from None
    return manifest, raw[start + mlen:]


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(ckpt: Checkpoint) -> bytes:
    ckpt.validate()
    manifest = {"kind": "checkpoint", "spec": ckpt.spec.to_dict(), "metadata": ckpt.metadata,
                "records": [r.to_dict() for r in ckpt.records]}
    return pack(manifest, ckpt.blob)


def decode(raw: bytes, precision: str | None = None) -> Checkpoint:
    manifest, blob = unpack(raw)
    if manifest.get("kind") != "checkpoint":
        raise FormatError(f"not a checkpoint file (kind={manifest.get('kind')!r})")
    try:
        spec = ModelSpec.from_dict(manifest["spec"])
        records = [TensorRecord.from_dict(r) for r in manifest["records"]]
    except KeyError as exc:
        raise FormatError(f"manifest missing {exc}") from None
    for rec in records:
        if rec.byte_offset + rec.nbytes > len(blob):
            raise FormatError(f"record {rec.name!r} is out of range: needs bytes "
                              f"{rec.byte_offset}..{rec.byte_offset + rec.nbytes}, blob has {len(blob)}")
    ckpt = Checkpoint(spec, records, blob, manifest.get("metadata", {}))
    ckpt.validate()
    if precision is not None and precision != ckpt.precision:
        ckpt = Checkpoint.from_arrays(spec, ckpt.arrays(), ckpt.metadata, precision=precision)
    return ckpt


def save(ckpt: Checkpoint, path) -> None:
    write_atomic(path, encode(ckpt))


def load(path, precision: str | None = None) -> Checkpoint:
    """Read a checkpoint, optionally converting tensors to ``precision``."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    return decode(raw, precision)


def from_model(model: Model, metadata: dict | None = None) -> Checkpoint:
    return Checkpoint.from_arrays(model.spec, {k: v.data for k, v in model.params.items()}, metadata)


def to_model(ckpt: Checkpoint, dtype=None) -> Model:
    return model_from_arrays(ckpt.spec, ckpt.arrays(), dtype=dtype)
