"""Sample persistence and report headers.

CSV layout: optional ``#`` header lines, then columns
``chain_id, step_index, x_1 .. x_d`` with floats at 17 significant digits.

Binary layout: 8-byte magic ``PHNEM001``, little-endian uint64 row and
column counts, then little-endian float64 rows (same columns as the CSV)
in row-major order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .em import SampleSet, Trajectory
from .errors import BadConfig

MAGIC = b"PHNEM001"


def fmt(x) -> str:
    return format(float(x), ".17g")


# run-location settings that never change results
_UNHASHED = ("output_dir", "n_workers")


def config_hash(config: dict) -> str:
    config = {k: v for k, v in config.items() if k not in _UNHASHED}
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def header_line(config: dict, master_seed) -> str:
    return f"phnlab {__version__} config_hash={config_hash(config)} master_seed={master_seed}"


def _table(obj) -> np.ndarray:
    if isinstance(obj, Trajectory):
        n = len(obj.states)
        return np.column_stack([np.full(n, obj.chain_id), obj.step_indices, obj.states])
    if isinstance(obj, SampleSet):
        n = len(obj)
        cid = obj.chain_ids if obj.chain_ids is not None else np.zeros(n)
        step = obj.step_indices if obj.step_indices is not None else np.arange(n)
        return np.column_stack([cid, step, obj.points])
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_samples_csv(path, obj, header_lines=()) -> None:
    table = _table(obj)
    d = table.shape[1] - 2
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain_id", "step_index"] + [f"x_{i}" for i in range(1, d + 1)])
        for row in table:
            w.writerow([int(row[0]), int(row[1])] + [fmt(x) for x in row[2:]])


def read_samples_csv(path) -> SampleSet:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    head = next(reader)
    if head[:2] != ["chain_id", "step_index"]:
        raise BadConfig(f"{path}: unexpected CSV columns {head}")
    rows = np.array([[float(x) for x in r] for r in reader if r])
    rows = rows.reshape(-1, len(head))
    return SampleSet(points=rows[:, 2:], chain_ids=rows[:, 0].astype(int), step_indices=rows[:, 1].astype(int))


def write_samples_binary(path, obj) -> None:
    table = np.ascontiguousarray(_table(obj), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", table.shape[0], table.shape[1]))
        fh.write(table.tobytes(order="C"))


def read_samples_binary(path) -> SampleSet:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise BadConfig(f"{path}: bad magic {raw[:8]!r}")
    n_rows, n_cols = struct.unpack("<QQ", raw[8:24])
    table = np.frombuffer(raw, dtype="<f8", offset=24, count=n_rows * n_cols).reshape(n_rows, n_cols)
    return SampleSet(points=table[:, 2:].copy(), chain_ids=table[:, 0].astype(int), step_indices=table[:, 1].astype(int))


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_rows_csv(path, columns, rows, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([fmt(x) if isinstance(x, (float, np.floating)) else x for x in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if x != x or x in (float("inf"), float("-inf")):
            return str(x)
        return x
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj
