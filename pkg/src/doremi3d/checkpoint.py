"""Versioned checkpoint files: a JSON header followed by raw little-endian f64 blobs.

Layout::

    doremi3d-ckpt v1\\n
    <header json>\\n
    <blob 0><blob 1>...

The header lists each tensor's name, shape and byte offset plus free-form
metadata. Writing is canonical (sorted JSON keys, insertion-ordered tensors),
so equal states produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from doremi3d.errors import FormatError

MAGIC = b"doremi3d-ckpt v1\n"


def encode_checkpoint(state: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, value in state.items():
        arr = np.array(value, dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    header = {"meta": meta or {}, "tensors": entries, "nbytes": offset}
    return MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + b"".join(blobs)


def decode_checkpoint(raw: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if not raw.startswith(MAGIC):
        raise FormatError("missing checkpoint magic (wrong file or version)")
    head, sep, body = raw[len(MAGIC):].partition(b"\n")
    if not sep:
        raise FormatError("truncated checkpoint header")
    try:
        header = json.loads(head)
    except ValueError as exc:
        raise FormatError("checkpoint header is not valid JSON") from exc
    if len(body) != header.get("nbytes", -1):
        raise FormatError(f"checkpoint body has {len(body)} bytes, header says {header.get('nbytes')}")
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(body, "<f8", count, entry["offset"]).reshape(tuple(entry["shape"]))
        state[entry["name"]] = arr.astype(np.float64)
    return state, header["meta"]


def save_checkpoint(path: str | Path, state: dict[str, np.ndarray], meta: dict | None = None) -> str:
    """Write the checkpoint and return its sha256."""
    raw = encode_checkpoint(state, meta)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_checkpoint(Path(path).read_bytes())


def state_digest(state: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(encode_checkpoint(state)).hexdigest()
