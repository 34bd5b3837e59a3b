"""Little-endian checkpoint container shared by the DPV1/DPL1/DPG1 formats.

Layout::

    magic            4 bytes ("DPV1", "DPL1" or "DPG1")
    n_header         uint32
    header           n_header x int64
    n_tensors        uint32
    per tensor:      uint16 name length, utf-8 name, uint8 ndim,
                     ndim x int64 dims, prod(dims) x float64
    meta_len         uint32
    meta             utf-8 JSON (config hash, provenance, ...)

Tensors appear in the order they were given, which each format documents.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import InvalidInput


def write_checkpoint(path, magic: bytes, header, tensors: dict, meta: dict | None = None) -> None:
    if len(magic) != 4:
        raise InvalidInput("magic must be 4 bytes")
    out = bytearray(magic)
    out += struct.pack("<I", len(header))
    out += struct.pack(f"<{len(header)}q", *[int(h) for h in header])
    out += struct.pack("<I", len(tensors))
    for name, t in tensors.items():
        arr = np.ascontiguousarray(torch.as_tensor(t).detach().cpu().numpy(), dtype="<f8")
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}q", *arr.shape)
        out += arr.tobytes()
    m = json.dumps(meta or {}, sort_keys=True).encode()
    out += struct.pack("<I", len(m)) + m
    Path(path).write_bytes(bytes(out))


def read_checkpoint(path, magic: bytes):
    """Return ``(header, tensors, meta)``; raises on a magic mismatch."""
    buf = Path(path).read_bytes()
    if buf[:4] != magic:
        raise InvalidInput(f"{path}: expected magic {magic!r}, found {buf[:4]!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, buf, pos)
        pos += struct.calcsize(fmt)
        return vals

    (nh,) = take("<I")
    header = list(take(f"<{nh}q"))
    (nt,) = take("<I")
    tensors = {}
    for _ in range(nt):
        (ln,) = take("<H")
        name = buf[pos:pos + ln].decode()
        pos += ln
        (ndim,) = take("<B")
        shape = take(f"<{ndim}q")
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        tensors[name] = torch.tensor(arr.copy(), dtype=torch.float64)
    (ml,) = take("<I")
    meta = json.loads(buf[pos:pos + ml].decode())
    return header, tensors, meta
