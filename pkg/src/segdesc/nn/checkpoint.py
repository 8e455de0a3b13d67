"""Binary checkpoint format.

Layout: the 4 magic bytes ``SDN1``, a little-endian uint32 header length, the
header as UTF-8 JSON, then every parameter array as little-endian float32 in
declaration order (stacks in header order, layers in order, parameter names
sorted).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..exceptions import DataFormatError
from .stack import LayerStack

MAGIC = b"SDN1"


def save_checkpoint(path, stacks: dict[str, LayerStack], meta: dict | None = None) -> None:
    header = {
        "meta": meta or {},
        "stacks": [{"name": name, **stack.config()} for name, stack in stacks.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for stack in stacks.values():
            for _, _, p in stack.parameters():
                fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float64) -> tuple[dict[str, LayerStack], dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise DataFormatError("not a checkpoint (bad magic)", offset=0)
    if len(data) < 8:
        raise DataFormatError("truncated header length", offset=4)
    (n,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + n:
        raise DataFormatError("truncated header", offset=len(data))
    try:
        header = json.loads(data[8 : 8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"malformed header: {exc}", offset=8) from None
    pos = 8 + n
    stacks = {}
    for spec in header["stacks"]:
        stack = LayerStack.from_config(spec, dtype=dtype)
        for _, _, p in stack.parameters():
            nbytes = 4 * p.size
            if pos + nbytes > len(data):
                raise DataFormatError(f"truncated parameters for stack {spec['name']!r}", offset=len(data))
            p[...] = np.frombuffer(data, dtype="<f4", count=p.size, offset=pos).reshape(p.shape)
            pos += nbytes
        stacks[spec["name"]] = stack
    if pos != len(data):
        raise DataFormatError(f"{len(data) - pos} trailing bytes after parameters", offset=pos)
    return stacks, header["meta"]
