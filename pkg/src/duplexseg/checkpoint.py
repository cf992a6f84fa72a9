"""Byte-stable checkpoint container.

Layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON header
(sorted keys), then the raw little-endian array payloads concatenated in the
order listed by the header. Identical contents always produce identical bytes,
so save -> load -> save round-trips bit-for-bit.
"""

import json
import struct
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from .errors import ConfigurationError, InputError

MAGIC = b"DSEGCKPT"
FORMAT_VERSION = 1


def save_raw(path, meta: Dict[str, Any], arrays: Dict[str, np.ndarray]) -> None:
    """Write a checkpoint with JSON-serializable meta and named arrays."""
    names = sorted(arrays)
    manifest = []
    payloads = []
    for name in names:
        arr = np.asarray(arrays[name])
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        manifest.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
        payloads.append(arr.tobytes())
    header = dict(meta)
    header["format_version"] = FORMAT_VERSION
    header["arrays"] = manifest
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for payload in payloads:
            fh.write(payload)


def load_raw(path) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise InputError(f"{path} is not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", data[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    if len(data) < start + hlen:
        raise InputError(f"{path} is truncated (header)")
    header = json.loads(data[start : start + hlen].decode("utf-8"))
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigurationError(
            f"checkpoint format version {version} does not match supported version {FORMAT_VERSION}"
        )
    offset = start + hlen
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = dtype.itemsize * count
        if len(data) < offset + nbytes:
            raise InputError(f"{path} is truncated (array {entry['name']!r})")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.copy()
        offset += nbytes
    meta = {k: v for k, v in header.items() if k != "arrays"}
    return meta, arrays
