"""On-disk formats: CMK1 tensor files, checkpoints and CSV tables.

TensorFile layout (little-endian)::

    b"CMK1" | u8 dtype code | u8 ndim | ndim x u32 dims | row-major payload

Dtype codes: 0 = float32, 1 = uint8.

A checkpoint is a directory holding ``manifest.json`` plus ``params.bin``
and ``optimizer.bin`` (raw little-endian float32, offsets in the manifest)
and ``rng.cmk`` (torch generator state as uint8).
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CMK1"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}
CHECKPOINT_FORMAT = "shapereg-checkpoint/1"


class FormatError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    if a.dtype not in CODES:
        raise FormatError(f"unsupported dtype {a.dtype}; use float32 or uint8")
    if a.ndim > 255:
        raise FormatError("too many dimensions")
    header = MAGIC + struct.pack("<BB", CODES[a.dtype], a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype=DTYPES[CODES[a.dtype]]).tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if data[:4] != MAGIC:
        raise FormatError("bad magic; not a CMK1 tensor file")
    code, ndim = struct.unpack_from("<BB", data, 4)
    if code not in DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", data, 6)
    offset = 6 + 4 * ndim
    dtype = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) - offset != expected:
        raise FormatError(f"payload is {len(data) - offset} bytes, header implies {expected}")
    return np.frombuffer(data, dtype=dtype, offset=offset).reshape(dims).astype(dtype.newbyteorder("="))


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _pack(tensors: list[tuple[str, torch.Tensor]]) -> tuple[bytes, list[dict]]:
    buf = io.BytesIO()
    entries = []
    for name, t in tensors:
        arr = t.detach().cpu().numpy().astype("<f4")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f32", "offset": buf.tell(), "nbytes": arr.nbytes})
        buf.write(arr.tobytes())
    return buf.getvalue(), entries


def _unpack(data: bytes, entry: dict) -> torch.Tensor:
    arr = np.frombuffer(data, dtype="<f4", count=int(np.prod(entry["shape"], dtype=np.int64)), offset=entry["offset"])
    return torch.from_numpy(arr.reshape(entry["shape"]).astype(np.float32))


def save_checkpoint(directory, model: torch.nn.Module, optimizer=None, generator=None, extra: dict | None = None) -> Path:
    """Write model (+ optimizer, RNG) state; bit-stable for identical inputs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = list(model.named_parameters())
    params, entries = _pack(named)
    for entry, (name, p) in zip(entries, named):
        entry["block"] = name.split(".", 1)[0]
        entry["frozen"] = not p.requires_grad
    (directory / "params.bin").write_bytes(params)
    manifest = {"format": CHECKPOINT_FORMAT, "params": entries, "extra": extra or {}}

    if optimizer is not None:
        index = {id(p): name for name, p in named}
        state = optimizer.state_dict()
        groups = []
        tensors = []
        for group, raw_group in zip(state["param_groups"], optimizer.param_groups):
            g = {k: (list(v) if isinstance(v, tuple) else v) for k, v in group.items() if k != "params"}
            g["params"] = [index[id(p)] for p in raw_group["params"]]
            groups.append(g)
            for pid, p in zip(group["params"], raw_group["params"]):
                for key, value in sorted(state["state"].get(pid, {}).items()):
                    if torch.is_tensor(value):
                        tensors.append((f"{index[id(p)]}::{key}", value.reshape(-1) if value.dim() == 0 else value))
        blob, opt_entries = _pack(tensors)
        (directory / "optimizer.bin").write_bytes(blob)
        manifest["optimizer"] = {"param_groups": groups, "state": opt_entries}

    if generator is not None:
        write_tensor(directory / "rng.cmk", generator.get_state().numpy())
        manifest["rng"] = "rng.cmk"
    write_json(directory / "manifest.json", manifest)
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_params(directory, model: torch.nn.Module, prefix: str | None = None, apply_frozen: bool = False) -> dict:
    """Copy stored parameters into ``model``; optionally only names under ``prefix``.

    Raises on missing names or shape mismatches. Returns the manifest.
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    data = (directory / "params.bin").read_bytes()
    stored = {e["name"]: e for e in manifest["params"]}
    for name, p in model.named_parameters():
        if prefix is not None and not name.startswith(prefix):
            continue
        if name not in stored:
            raise FormatError(f"checkpoint lacks parameter {name}")
        entry = stored[name]
        if list(p.shape) != entry["shape"]:
            raise FormatError(f"shape mismatch for {name}: model {list(p.shape)} vs checkpoint {entry['shape']}")
        with torch.no_grad():
            p.copy_(_unpack(data, entry).to(p.dtype))
        if apply_frozen:
            p.requires_grad_(not entry["frozen"])
    return manifest


def load_optimizer(directory, model: torch.nn.Module, optimizer) -> None:
    directory = Path(directory)
    manifest = read_manifest(directory)
    if "optimizer" not in manifest:
        raise FormatError("checkpoint has no optimizer state")
    data = (directory / "optimizer.bin").read_bytes()
    by_name = dict(model.named_parameters())
    positions = {}
    groups = []
    for group in manifest["optimizer"]["param_groups"]:
        g = {k: (tuple(v) if k == "betas" else v) for k, v in group.items() if k != "params"}
        ids = []
        for name in group["params"]:
            positions[name] = len(positions)
            ids.append(positions[name])
        g["params"] = ids
        groups.append(g)
    state: dict = {}
    for entry in manifest["optimizer"]["state"]:
        name, key = entry["name"].split("::")
        value = _unpack(data, entry).to(by_name[name].dtype)
        if key == "step":
            value = value.reshape(())
        state.setdefault(positions[name], {})[key] = value
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def load_generator(directory, generator: torch.Generator) -> None:
    path = Path(directory) / "rng.cmk"
    generator.set_state(torch.from_numpy(read_tensor(path).copy()))


def write_csv(path, rows: list[dict], fieldnames) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: format_value(row.get(k)) for k in fieldnames})


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    return str(v)


def parse_value(s: str):
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: parse_value(v) for k, v in row.items()} for row in csv.DictReader(f)]


class CsvLog:
    """Append-only CSV log flushed after every row."""

    def __init__(self, path, fieldnames, append: bool = False):
        self.path = Path(path)
        self.fieldnames = list(fieldnames)
        exists = append and self.path.exists()
        self._f = open(self.path, "a" if exists else "w", newline="")
        self._w = csv.DictWriter(self._f, fieldnames=self.fieldnames, lineterminator="\n")
        if not exists:
            self._w.writeheader()
            self._flush()

    def write(self, row: dict) -> None:
        self._w.writerow({k: format_value(row.get(k)) for k in self.fieldnames})
        self._flush()

    def _flush(self):
        self._f.flush()
        os.fsync(self._f.fileno())

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
