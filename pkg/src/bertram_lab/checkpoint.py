"""Checkpoint container: length-prefixed JSON header, then raw float32 arrays.

Layout::

    8 bytes   little-endian uint64, header length H
    H bytes   UTF-8 JSON: {"meta": {...}, "params": [{name, shape, frozen, offset, nbytes}]}
    ...       little-endian float32 arrays in header order; offsets are
              relative to the first byte after the header
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

MAGIC = "bertram-lab-ckpt/1"


def atomic_write_bytes(path, data: bytes) -> None:
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


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def pack(entries: list[tuple[str, torch.Tensor, bool]], meta: dict | None = None) -> bytes:
    """Serialise ``(name, tensor, frozen)`` triples plus a metadata dict."""
    blobs = []
    records = []
    offset = 0
    for name, t, frozen in entries:
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        records.append({"name": name, "shape": list(arr.shape), "frozen": bool(frozen),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"format": MAGIC, "meta": meta or {}, "params": records},
                        sort_keys=True).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + b"".join(blobs)


def unpack(data: bytes) -> tuple[dict, dict[str, tuple[np.ndarray, bool]]]:
    (hlen,) = struct.unpack("<Q", data[:8])
    header = json.loads(data[8:8 + hlen].decode("utf-8"))
    if header.get("format") != MAGIC:
        raise ValueError(f"not a checkpoint container (format={header.get('format')!r})")
    body = memoryview(data)[8 + hlen:]
    arrays = {}
    for rec in header["params"]:
        chunk = body[rec["offset"]:rec["offset"] + rec["nbytes"]]
        arr = np.frombuffer(chunk, dtype="<f4").reshape(rec["shape"]).copy()
        arrays[rec["name"]] = (arr, rec["frozen"])
    return header["meta"], arrays


def save_module(path, module: torch.nn.Module, meta: dict | None = None) -> None:
    entries = [(n, p, not p.requires_grad) for n, p in module.named_parameters()]
    atomic_write_bytes(path, pack(entries, meta))


def read_checkpoint(path) -> tuple[dict, dict[str, tuple[np.ndarray, bool]]]:
    return unpack(Path(path).read_bytes())


def load_into_module(module: torch.nn.Module, arrays: dict, names=None, strict: bool = True) -> None:
    """Copy arrays into matching parameters; frozen flags are restored too."""
    params = dict(module.named_parameters())
    wanted = params.keys() if names is None else names
    with torch.no_grad():
        for n in wanted:
            if n not in arrays:
                if strict:
                    raise KeyError(f"checkpoint lacks parameter {n!r}")
                continue
            arr, frozen = arrays[n]
            p = params[n]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"{n}: shape {arr.shape} != {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr).to(p.dtype))
            p.requires_grad_(not frozen)
