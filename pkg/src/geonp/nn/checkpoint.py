"""Single-file parameter container.

Layout: one line of UTF-8 JSON (terminated by ``\\n``) describing every
tensor as ``{"name", "shape", "offset", "nbytes"}`` plus free-form metadata,
followed by the concatenated little-endian float32 payload. Offsets are
relative to the first payload byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .params import ParamStore

FORMAT = "geonp-params-v1"
_DTYPE = np.dtype("<f4")


def save_params(path, store: ParamStore, meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, t in store.items():
        blob = np.ascontiguousarray(t.data, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"format": FORMAT, "dtype": "float32-le", "params": entries, "meta": meta or {}}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def read_params(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays_by_name, meta)`` from a container file."""
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise ValueError(f"{path}: missing checkpoint header")
    header = json.loads(raw[:newline].decode("utf-8"))
    if header.get("format") != FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    payload = memoryview(raw)[newline + 1:]
    arrays = {}
    for entry in header["params"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise ValueError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(payload[start:start + nbytes], dtype=_DTYPE).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float32)
    return arrays, header.get("meta", {})


def load_params(path, store: ParamStore) -> dict:
    arrays, meta = read_params(path)
    store.load_state_dict(arrays)
    return meta
