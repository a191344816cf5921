"""Named-tensor container: one JSON manifest line followed by raw little-endian arrays.

Layout::

    {"format": "oat-ckpt-v1", "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...], "meta": {...}}\\n
    <concatenated array bytes; offsets are relative to the first byte after the newline>
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

CHECKPOINT_TAG = "oat-ckpt-v1"
PE_TAG = "oat-pe-v1"

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4", "uint8": "|u1"}


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode(arrays: dict[str, np.ndarray], meta: dict | None = None, tag: str = CHECKPOINT_TAG) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        key = arr.dtype.name
        if key not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {key} for tensor {name!r}")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[key])).tobytes()
        entries.append({"name": name, "dtype": key, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": tag, "tensors": entries, "meta": meta or {}}
    return json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n" + b"".join(chunks)


def decode(payload: bytes, tag: str | None = CHECKPOINT_TAG) -> tuple[dict[str, np.ndarray], dict]:
    head, sep, body = payload.partition(b"\n")
    if not sep:
        raise CheckpointError("missing manifest terminator")
    try:
        manifest = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    if tag is not None and manifest.get("format") != tag:
        raise CheckpointError(f"expected format {tag!r}, found {manifest.get('format')!r}")
    arrays = {}
    for entry in manifest["tensors"]:
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if stop > len(body):
            raise CheckpointError(f"tensor {entry['name']!r} extends past end of file")
        arr = np.frombuffer(body[start:stop], dtype=np.dtype(_DTYPES[entry["dtype"]]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(entry["dtype"])
    return arrays, manifest.get("meta", {})


def save(path, arrays: dict[str, np.ndarray], meta: dict | None = None, tag: str = CHECKPOINT_TAG) -> None:
    atomic_write_bytes(path, encode(arrays, meta, tag))


def load(path, tag: str | None = CHECKPOINT_TAG) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes(), tag)
