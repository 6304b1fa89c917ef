"""Checkpoint container: versioned header, named parameter manifest,
little-endian payload with a CRC, and an embedded config snapshot so a
model can be rebuilt from the file alone.

Layout: magic "MSCK" | u32 version | u32 header length | header JSON |
payload bytes. The header carries the training step, the model config,
per-array manifest entries (name, dtype, shape, offset, nbytes) and the
payload crc32. Optimizer state rides along under an ``optim/`` prefix.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .config import ModelConfig
from .errors import ConfigError, DataError

MAGIC = b"MSCK"
VERSION = 1
_DTYPES = {"<f4": "<f4", "<f8": "<f8"}


def _flatten(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def save_checkpoint(model, path, step: int = 0, optimizer=None) -> None:
    arrays = [(name, p.data) for name, p in model.named_parameters()]
    if optimizer is not None:
        arrays.extend((f"optim/{k}", v) for k, v in optimizer.state_arrays().items())
    manifest = []
    chunks = []
    offset = 0
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        code = "<f8" if arr.dtype == np.float64 else "<f4"
        buf = arr.astype(code, copy=False).tobytes()
        manifest.append({"name": name, "dtype": code, "shape": list(arr.shape),
                         "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    header = {
        "format_version": VERSION,
        "step": int(step),
        "config": model.cfg.to_dict(),
        "params": manifest,
        "crc32": zlib.crc32(payload) & 0xFFFFFFFF,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def _read_header(path) -> Tuple[dict, bytes]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint not found: {p}")
    raw = p.read_bytes()
    if raw[:4] != MAGIC:
        raise DataError(f"{p}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise DataError(f"{p}: truncated header")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise DataError(f"{p}: unsupported checkpoint version {version}, "
                        f"expected {VERSION}")
    if len(raw) < 12 + hlen:
        raise DataError(f"{p}: header short: expected {hlen} bytes")
    header = json.loads(raw[12:12 + hlen].decode())
    payload = raw[12 + hlen:]
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != header.get("crc32"):
        raise DataError(f"{p}: payload CRC mismatch "
                        f"(stored {header.get('crc32')}, computed {crc})")
    return header, payload


def load_checkpoint(path, expect_config: Optional[ModelConfig] = None):
    """Rebuild the model from the embedded config snapshot and restore all
    parameters byte-exactly. Returns (model, step, optimizer_arrays).

    With ``expect_config`` the snapshot is compared field by field and a
    mismatch raises naming the offending field.
    """
    from .model import MSCloudCAM  # local import to avoid a cycle

    header, payload = _read_header(path)
    cfg = ModelConfig.from_dict(header["config"])
    if expect_config is not None:
        stored = dict(_flatten(header["config"]))
        wanted = dict(_flatten(expect_config.to_dict()))
        for key in sorted(set(stored) | set(wanted)):
            if stored.get(key) != wanted.get(key):
                raise ConfigError(f"checkpoint config mismatch at {key}: "
                                  f"stored {stored.get(key)!r} != expected {wanted.get(key)!r}")
    model = MSCloudCAM(cfg)
    entries = {e["name"]: e for e in header["params"]}
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(entries))
    if missing:
        raise DataError(f"checkpoint: parameters missing from manifest: {missing[:5]}")
    for name, p in params.items():
        e = entries[name]
        arr = _entry_array(e, payload, path)
        if tuple(e["shape"]) != p.shape:
            raise DataError(f"checkpoint: parameter {name} has shape {e['shape']}, "
                            f"model expects {list(p.shape)}")
        p.data = arr.reshape(p.shape).astype(p.dtype, copy=False)
    optim_arrays: Dict[str, np.ndarray] = {}
    for name, e in entries.items():
        if name.startswith("optim/"):
            optim_arrays[name[len("optim/"):]] = _entry_array(e, payload, path).reshape(e["shape"])
    return model, int(header.get("step", 0)), (optim_arrays or None)


def _entry_array(entry: dict, payload: bytes, path) -> np.ndarray:
    dtype = _DTYPES.get(entry["dtype"])
    if dtype is None:
        raise DataError(f"{path}: unknown payload dtype {entry['dtype']!r}")
    lo, n = entry["offset"], entry["nbytes"]
    if lo + n > len(payload):
        raise DataError(f"{path}: payload short: entry {entry['name']} needs "
                        f"bytes {lo}..{lo + n}, payload has {len(payload)}")
    return np.frombuffer(payload, dtype=dtype, count=n // np.dtype(dtype).itemsize,
                         offset=lo).copy()
