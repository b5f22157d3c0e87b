"""On-disk formats: the model container, key=value configs, traces, manifests.

Model container layout (all integers little-endian)::

    offset  size  content
    0       8     magic b"EXMTTMOD"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length H in bytes
    16      H     UTF-8 JSON header, keys sorted:
                  {"dtype": "<f8", "format_version": 1,
                   "mode_sizes": [n_1, ..., n_d], "schema": "<schema text>",
                   "tt_ranks": [1, r_1, ..., 1]}
    16 + H  ...   cores G_1 .. G_d, each of shape (r_{k-1}, n_k, r_k), as
                  float64 little-endian in row-major (C) order, back to back

The file length must equal ``16 + H + 8 * sum_k r_{k-1} n_k r_k`` exactly.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import FeatureSchema, SchemaError
from .optim import ConfigError, TrainConfig, TrainTrace
from .tt import TTError, TTTensor

MAGIC = b"EXMTTMOD"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


class FormatError(ValueError):
    """A file does not follow the expected layout."""


def model_bytes(w: TTTensor, schema: FeatureSchema | None = None) -> bytes:
    if schema is not None and schema.mode_sizes != w.mode_sizes:
        raise SchemaError(f"schema mode sizes {schema.mode_sizes} do not match the tensor's {w.mode_sizes}")
    header = {
        "dtype": "<f8",
        "format_version": FORMAT_VERSION,
        "mode_sizes": list(w.mode_sizes),
        "schema": schema.to_text() if schema is not None else None,
        "tt_ranks": list(w.tt_ranks),
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(c, dtype="<f8").tobytes() for c in w.cores)
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(head)) + head + body


def model_from_bytes(data: bytes) -> tuple[TTTensor, FeatureSchema | None]:
    if len(data) < _PREFIX.size:
        raise FormatError("file too short for a model container")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise FormatError("not a model container (bad magic)")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported container version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(data[start : start + hlen].decode())
        modes = [int(n) for n in header["mode_sizes"]]
        ranks = [int(r) for r in header["tt_ranks"]]
    except (ValueError, KeyError, TypeError) as err:
        raise FormatError(f"malformed container header: {err}") from None
    if header.get("dtype", "<f8") != "<f8" or len(ranks) != len(modes) + 1:
        raise FormatError("inconsistent container header")
    sizes = [ranks[k] * modes[k] * ranks[k + 1] for k in range(len(modes))]
    offset = start + hlen
    if len(data) != offset + 8 * sum(sizes):
        raise FormatError(f"container holds {len(data) - offset} core bytes, header implies {8 * sum(sizes)}")
    cores = []
    for k, size in enumerate(sizes):
        flat = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
        cores.append(flat.reshape(ranks[k], modes[k], ranks[k + 1]).astype(np.float64))
        offset += 8 * size
    try:
        w = TTTensor(cores)
    except TTError as err:
        raise FormatError(str(err)) from None
    schema = FeatureSchema.from_text(header["schema"]) if header.get("schema") else None
    return w, schema


def save_model(path, w: TTTensor, schema: FeatureSchema | None = None) -> None:
    Path(path).write_bytes(model_bytes(w, schema))


def load_model(path) -> tuple[TTTensor, FeatureSchema | None]:
    return model_from_bytes(Path(path).read_bytes())


def parse_config_text(text: str) -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    problems = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            problems.append(f"line {lineno}: expected key=value, got {raw.strip()!r}")
            continue
        if key in out:
            problems.append(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    if problems:
        raise ConfigError("bad config file: " + "; ".join(problems))
    return out


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def config_text(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())


def write_trace(path, trace: TrainTrace, include_wall: bool = True) -> None:
    Path(path).write_text(trace.to_csv(include_wall=include_wall))


def read_trace(path) -> dict[str, np.ndarray]:
    """Columns of a trace CSV as float arrays (empty cells become NaN)."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty trace")
    names = lines[0].split(",")
    cols = {n: [] for n in names}
    for line in lines[1:]:
        for n, cell in zip(names, line.split(",")):
            cols[n].append(float(cell) if cell else np.nan)
    return {n: np.array(v) for n, v in cols.items()}


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
