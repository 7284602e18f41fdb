"""Named-tensor checkpoint files.

Layout (all integers little-endian)::

    b"CFMN"  u32 version  u32 entry_count
    per entry: u16 name_len, name (UTF-8), u8 rank, u32 dims[rank], f32 payload

Run metadata (network config, precision, fusion status, optimiser cursor)
travels as an ordinary rank-1 entry named ``__meta__`` whose payload holds
the UTF-8 bytes of a JSON document, one byte per f32 value.
"""

from __future__ import annotations

import io
import json
import os
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .errors import CheckpointError

MAGIC = b"CFMN"
VERSION = 1
META_KEY = "__meta__"


def encode_store(entries: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> bytes:
    items = list(entries.items())
    if meta is not None:
        raw = json.dumps(meta, sort_keys=True).encode("utf-8")
        items.insert(0, (META_KEY, np.frombuffer(raw, dtype=np.uint8).astype(np.float32)))
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(items)))
    for name, arr in items:
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointError(f"entry {name!r} cannot be encoded")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def decode_store(data: bytes) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    view = memoryview(data)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"file truncated while reading {what}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("bad magic bytes; not a CFMN checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    entries: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"entry #{i} name length"))
        name = bytes(take(name_len, f"entry #{i} name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"entry {name!r} rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"entry {name!r} dims"))
        size = int(np.prod(dims)) if rank else 1
        payload = take(4 * size, f"entry {name!r} payload")
        if name in entries:
            raise CheckpointError(f"duplicate entry {name!r}")
        entries[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after the last entry")
    meta = {}
    if META_KEY in entries:
        raw = entries.pop(META_KEY).astype(np.uint8).tobytes()
        meta = json.loads(raw.decode("utf-8"))
    return entries, meta


def write_store(path, entries: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Write atomically: a crash never leaves a half-written file under ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_store(entries, meta))
    os.replace(tmp, path)


def read_store(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    return decode_store(data)


def model_meta(net) -> dict:
    return {
        "config": net.config.to_dict(),
        "precision": str(net.tail.weight.dtype),
        "fused": bool(net.fused),
    }


def save(net, path, extra_meta: Optional[dict] = None, extra_entries: Optional[Mapping[str, np.ndarray]] = None
         ) -> None:
    meta = model_meta(net)
    if extra_meta:
        meta.update(extra_meta)
    entries = OrderedDict(net.state_dict())
    if extra_entries:
        entries.update(extra_entries)
    write_store(path, entries, meta)


def load(path, config=None, with_extras: bool = False):
    """Rebuild a network from ``path``.

    ``config`` defaults to the one recorded in the file; when given, every
    tensor must match it and the first mismatch is reported by name.
    Returns the network, or ``(net, meta, extra_entries)`` with ``with_extras``.
    """
    from .network import CFMNetConfig, build, strip_batch_norm

    entries, meta = read_store(path)
    if config is None:
        if "config" not in meta:
            raise CheckpointError(f"{path}: no network config recorded; pass one explicitly")
        config = CFMNetConfig.from_dict(meta["config"])
    net = build(config, seed=0)
    if meta.get("fused"):
        strip_batch_norm(net)
    own = net.state_dict()
    for name, arr in own.items():
        if name not in entries:
            raise CheckpointError(f"tensor {name!r} missing from {path}")
        if entries[name].shape != arr.shape:
            raise CheckpointError(
                f"tensor {name!r}: file has shape {entries[name].shape}, config expects {arr.shape}")
    net.load_state_dict(OrderedDict((k, entries[k]) for k in own))
    if meta.get("precision") == "float64":
        net.astype(np.float64)
    if with_extras:
        extras = OrderedDict((k, v) for k, v in entries.items() if k not in own)
        return net, meta, extras
    return net
