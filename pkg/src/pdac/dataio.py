"""Feature files, model/buffer persistence and experiment configuration.

Feature file layout (all little-endian)::

    header  : b"PDACFEAT" | version u32 | D u32 | record count u64   (24 bytes)
    record  : task_id u32 | label u32 | D x float32                  (8 + 4D bytes)

Models and buffers are stored as JSON with every real written using 17
significant digits, so a save/load cycle reproduces the float64 state bit
for bit.
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator

import jsonschema
import numpy as np

from . import pgm
from .coreset import BufferEntry, MemoryBuffer
from .errors import FeatureFileError, InputError

MAGIC = b"PDACFEAT"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sIIQ")
HEADER_SIZE = HEADER.size
CHUNK_RECORDS = 4096


def record_size(dim: int) -> int:
    return 8 + 4 * dim


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("task", "<u4"), ("label", "<u4"), ("feature", "<f4", (dim,))])


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def write_features(path, records: Iterable) -> int:
    """Write ``(task_id, label, feature)`` records; returns the record count."""
    path = Path(path)
    count = 0
    dim = None
    try:
        with open(path, "wb") as fh:
            fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, 0, 0))
            for task, label, feature in records:
                vec = np.asarray(feature, dtype="<f4").ravel()
                if dim is None:
                    dim = vec.shape[0]
                elif vec.shape[0] != dim:
                    raise InputError(f"record {count} has dimension {vec.shape[0]}, expected {dim}")
                fh.write(struct.pack("<II", int(task), int(label)))
                fh.write(vec.tobytes())
                count += 1
            fh.seek(0)
            fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, dim or 0, count))
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    return count


def write_feature_arrays(path, tasks, labels, features) -> int:
    """Array form of :func:`write_features`."""
    X = np.atleast_2d(np.asarray(features, dtype="<f4"))
    tasks = np.asarray(tasks)
    labels = np.asarray(labels)
    if not (tasks.shape[0] == labels.shape[0] == X.shape[0]):
        raise InputError("tasks, labels and features differ in length")
    rec = np.empty(X.shape[0], dtype=_record_dtype(X.shape[1]))
    rec["task"] = tasks
    rec["label"] = labels
    rec["feature"] = X
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, FORMAT_VERSION, X.shape[1], X.shape[0]))
        fh.write(rec.tobytes())
    return int(X.shape[0])


@dataclass(frozen=True)
class FeatureHeader:
    version: int
    dim: int
    count: int


def read_header(path, expected_dim: int | None = None) -> FeatureHeader:
    """Parse and validate the header, including the file length it implies."""
    path = Path(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_SIZE)
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise FeatureFileError("bad magic bytes", 0, path)
    if len(raw) < HEADER_SIZE:
        raise FeatureFileError("truncated header", len(raw), path)
    magic, version, dim, count = HEADER.unpack(raw)
    if magic != MAGIC:
        raise FeatureFileError("bad magic bytes", 0, path)
    if version != FORMAT_VERSION:
        raise FeatureFileError(f"unsupported format version {version}", 8, path)
    if expected_dim is not None and dim != expected_dim:
        raise FeatureFileError(f"feature dimension {dim} does not match expected {expected_dim}", 12, path)
    if count and dim == 0:
        raise FeatureFileError("non-empty file with zero feature dimension", 12, path)
    rs = record_size(dim)
    expected = HEADER_SIZE + count * rs
    if size < expected:
        complete = (size - HEADER_SIZE) // rs
        raise FeatureFileError(
            f"file truncated: header announces {count} records, only {complete} complete",
            HEADER_SIZE + complete * rs,
            path,
        )
    if size > expected:
        raise FeatureFileError(f"{size - expected} unexpected trailing bytes", expected, path)
    return FeatureHeader(version, dim, count)


def read_features(path, expected_dim: int | None = None) -> Iterator[tuple[int, int, np.ndarray]]:
    """Yield ``(task_id, label, feature)`` in file order, reading fixed-size chunks."""
    header = read_header(path, expected_dim)
    dtype = _record_dtype(header.dim)
    remaining = header.count
    with open(path, "rb") as fh:
        fh.seek(HEADER_SIZE)
        while remaining:
            n = min(remaining, CHUNK_RECORDS)
            offset = fh.tell()
            buf = fh.read(n * dtype.itemsize)
            if len(buf) != n * dtype.itemsize:
                # file shrank after the header check
                done = len(buf) // dtype.itemsize
                raise FeatureFileError("file truncated", offset + done * dtype.itemsize, path)
            chunk = np.frombuffer(buf, dtype=dtype)
            for rec in chunk:
                yield int(rec["task"]), int(rec["label"]), rec["feature"].copy()
            remaining -= n


def load_feature_arrays(path, expected_dim: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Whole file as ``(task_ids, labels, features)`` arrays (features as float64)."""
    header = read_header(path, expected_dim)
    dtype = _record_dtype(header.dim)
    rec = np.fromfile(path, dtype=dtype, count=header.count, offset=HEADER_SIZE)
    return (
        rec["task"].astype(np.int64),
        rec["label"].astype(np.int64),
        rec["feature"].astype(np.float64).reshape(header.count, header.dim),
    )


# ---------------------------------------------------------------------------
# JSON with full-precision reals
# ---------------------------------------------------------------------------


def _fmt_float(x: float) -> str:
    if math.isnan(x):
        return "null"
    if math.isinf(x):
        return '"inf"' if x > 0 else '"-inf"'
    s = format(x, ".17g")
    if not any(ch in s for ch in ".en"):
        s += ".0"
    return s


def _is_flat(obj) -> bool:
    return all(not isinstance(v, (dict, list, tuple)) for v in obj)


def _encode(obj, indent: int) -> str:
    pad = "  " * indent
    inner = "  " * (indent + 1)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{inner}{json.dumps(str(k))}: {_encode(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        if _is_flat(obj):
            return "[" + ", ".join(_encode(v, indent + 1) for v in obj) + "]"
        return "[\n" + ",\n".join(inner + _encode(v, indent + 1) for v in obj) + "\n" + pad + "]"
    if isinstance(obj, (bool, np.bool_)) or obj is None:
        return json.dumps(bool(obj) if obj is not None else None)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(float(obj))
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dump_json(obj) -> str:
    """Deterministic JSON text; reals carry 17 significant digits, NaN becomes null."""
    return _encode(obj, 0) + "\n"


def _float(v) -> float:
    return float("nan") if v is None else float(v)


def _array(v) -> np.ndarray:
    return np.array(v, dtype=float) if v is not None else None


# ---------------------------------------------------------------------------
# registry persistence
# ---------------------------------------------------------------------------


def registry_to_dict(registry: pgm.PGMRegistry) -> dict:
    classes = []
    for label in sorted(registry.models):
        m = registry.models[label]
        classes.append({
            "label": int(label),
            "count": m.count,
            "d": m.d,
            "L": m.n_components,
            "initialized": m.initialized,
            "stats_count": m.stats.count,
            "mean": m.stats.mean,
            "cov": m.stats.cov,
            "W": m.projection.W if m.projection is not None else None,
            "center": m.projection.center if m.projection is not None else None,
            "components": [{"weight": c.weight, "mean": c.mean, "cov": c.cov} for c in m.components],
            "staging_pool": [row for row in m.staging_pool],
        })
    return {
        "format": "pdac-pgm",
        "version": 1,
        "d": registry.d,
        "L": registry.n_components,
        "total_count": registry.total_count,
        "classes": classes,
    }


def registry_from_dict(doc: dict) -> pgm.PGMRegistry:
    if doc.get("format") != "pdac-pgm":
        raise InputError("not a PGM registry document")
    registry = pgm.PGMRegistry(d=int(doc["d"]), n_components=int(doc["L"]), total_count=int(doc["total_count"]))
    for c in doc["classes"]:
        mean = _array(c["mean"])
        dim = mean.shape[0]
        stats = pgm.ClassStats(int(c["stats_count"]), mean, _array(c["cov"]).reshape(dim, dim))
        proj = None
        if c["W"] is not None:
            proj = pgm.ProjectionMatrix(_array(c["W"]).reshape(dim, int(c["d"])), _array(c["center"]))
        comps = []
        for comp in c["components"]:
            mu = _array(comp["mean"])
            comps.append(pgm.GaussianComponent(float(comp["weight"]), mu, _array(comp["cov"]).reshape(mu.shape[0], mu.shape[0])))
        registry.models[int(c["label"])] = pgm.ClassPGM(
            stats=stats,
            d=int(c["d"]),
            n_components=int(c["L"]),
            projection=proj,
            components=comps,
            initialized=bool(c["initialized"]),
            staging_pool=[_array(row) for row in c["staging_pool"]],
        )
    return registry


def save_registry(registry: pgm.PGMRegistry, path) -> None:
    Path(path).write_text(dump_json(registry_to_dict(registry)), encoding="utf-8")


def load_registry(path) -> pgm.PGMRegistry:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    return registry_from_dict(doc)


# ---------------------------------------------------------------------------
# buffer persistence
# ---------------------------------------------------------------------------

BUFFER_COLUMNS = ("sample_id", "task_id", "label", "log_density")


def buffer_to_dict(buffer: MemoryBuffer) -> dict:
    return {
        "format": "pdac-buffer",
        "version": 1,
        "capacity": buffer.capacity,
        "allocation": {str(k): v for k, v in sorted(buffer.allocation.items())},
        "entries": [
            {"sample_id": e.sample_id, "task_id": e.task_id, "label": e.label, "log_density": e.log_density}
            for e in buffer.entries
        ],
    }


def buffer_from_dict(doc: dict) -> MemoryBuffer:
    if doc.get("format") != "pdac-buffer":
        raise InputError("not a buffer document")
    entries = [
        BufferEntry(e["sample_id"], int(e["task_id"]), int(e["label"]), _float(e["log_density"]))
        for e in doc["entries"]
    ]
    allocation = {int(k): int(v) for k, v in doc["allocation"].items()}
    return MemoryBuffer(int(doc["capacity"]), entries, allocation)


def save_buffer(buffer: MemoryBuffer, path) -> None:
    Path(path).write_text(dump_json(buffer_to_dict(buffer)), encoding="utf-8")


def load_buffer(path) -> MemoryBuffer:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
    return buffer_from_dict(doc)


def export_buffer_csv(buffer: MemoryBuffer, path) -> None:
    """One row per entry: sample_id, task_id, label, log_density."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(BUFFER_COLUMNS)
        for e in buffer.entries:
            writer.writerow([e.sample_id, e.task_id, e.label, repr(float(e.log_density))])


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Defaults for the selector and the synthetic harness; overridable from a JSON file and CLI flags."""

    d: int = 10
    L: int = 7
    G: int = 20
    G_stream: int = 1
    beta: float = 0.5
    N: int = 500
    batch_size: int = 32
    seed: int = 0
    strategies: list[str] = field(default_factory=lambda: ["uniform", "prop_p", "prop_inv_p", "model_proxy"])
    n_train: int = 100_000
    n_test: int = 100_000
    trials: int = 10
    N_list: list[int] = field(default_factory=lambda: [10, 100, 1000])
    side: float = 20.0
    m: float = 0.4
    epochs: int = 50


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "d": {"type": "integer", "minimum": 1},
        "L": {"type": "integer", "minimum": 1},
        "G": {"type": "integer", "minimum": 0},
        "G_stream": {"type": "integer", "minimum": 0},
        "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "N": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "strategies": {
            "type": "array",
            "items": {"enum": ["uniform", "prop_p", "prop_inv_p", "model_proxy"]},
            "minItems": 1,
        },
        "n_train": {"type": "integer", "minimum": 1},
        "n_test": {"type": "integer", "minimum": 1},
        "trials": {"type": "integer", "minimum": 1},
        "N_list": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "side": {"type": "number", "exclusiveMinimum": 0},
        "m": {"type": "number", "exclusiveMinimum": 0},
        "epochs": {"type": "integer", "minimum": 1},
    },
}


def validate_config(doc: dict) -> None:
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"config error at {where}: {exc.message}") from exc


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Built-in defaults, then the JSON file at ``path``, then non-None ``overrides``."""
    merged = asdict(ExperimentConfig())
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}") from exc
        validate_config(doc)
        merged.update(doc)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    validate_config(merged)
    names = {f.name for f in fields(ExperimentConfig)}
    return ExperimentConfig(**{k: v for k, v in merged.items() if k in names})
