"""Binary tensor container.

Layout: one line of UTF-8 JSON terminated by ``\\n``, then the payload of
raw little-endian float64 values. The header object holds ``tensors`` (a list
of ``{name, shape, byte_offset}`` with offsets relative to the payload start)
and a free-form ``meta`` object. The loader checks that the payload length
matches the header exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractError

_DTYPE = np.dtype("<f8")


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.array(arr, dtype=_DTYPE, order="C")
        entries.append({"name": name, "shape": list(a.shape), "byte_offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True)
    if "\n" in header:
        raise ContractError("checkpoint header must be a single line")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8") + b"\n")
        for c in chunks:
            fh.write(c)


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise ContractError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
        entries = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ContractError(f"{path}: malformed checkpoint header ({exc})") from None
    payload = raw[nl + 1:]
    expected = 0
    out = {}
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(e["byte_offset"])
        if start != expected:
            raise ContractError(f"{path}: tensor {e['name']} at offset {start}, expected {expected}")
        stop = start + count * _DTYPE.itemsize
        if stop > len(payload):
            raise ContractError(f"{path}: payload truncated at tensor {e['name']}")
        out[e["name"]] = np.frombuffer(payload[start:stop], dtype=_DTYPE).reshape(shape).astype(np.float64)
        expected = stop
    if expected != len(payload):
        raise ContractError(f"{path}: payload has {len(payload)} bytes, header describes {expected}")
    return out, header.get("meta", {})
