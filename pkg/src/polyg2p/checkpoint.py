"""Binary parameter checkpoints.

Layout: magic ``PG2P``, u32 format version, u32 parameter count, then per
parameter a u16-length UTF-8 name, u8 dtype code, u8 ndim, ndim u32 extents,
and the raw little-endian values.  Loaders reject unknown magic or versions.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"PG2P"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODE_FOR_KIND = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class CheckpointError(RuntimeError):
    """Malformed, truncated, or unsupported checkpoint file."""


def save_checkpoint(path, params) -> None:
    """Write every parameter, sorted by name for reproducible bytes."""
    entries = sorted(params, key=lambda p: p.name)
    names = [p.name for p in entries]
    if len(set(names)) != len(names):
        raise CheckpointError(f"duplicate parameter names: {sorted(names)}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for p in entries:
            raw = p.name.encode("utf-8")
            dtype = np.dtype(p.data.dtype).newbyteorder("<")
            code = _CODE_FOR_KIND.get(np.dtype(p.data.dtype))
            if code is None:
                raise CheckpointError(f"unsupported dtype {p.data.dtype} for {p.name!r}")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", code, p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype=dtype).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    """Read a checkpoint into a name -> array table."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown checkpoint version {version}")
    table: dict[str, np.ndarray] = {}
    off = 12
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        code, ndim = struct.unpack_from("<BB", blob, off)
        off += 2
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        data = np.frombuffer(blob[off:off + nbytes], dtype=dtype).reshape(shape)
        off += nbytes
        if name in table:
            raise CheckpointError(f"{path}: duplicate entry {name!r}")
        table[name] = data.astype(np.float64) if code == 0 else data.copy()
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes after parameter table")
    return table


def load_into(params, path, strict: bool = True) -> None:
    """Assign checkpoint values to matching parameters in place."""
    table = load_checkpoint(path)
    seen = set()
    for p in params:
        if p.name not in table:
            if strict:
                raise CheckpointError(f"{path}: missing parameter {p.name!r}")
            continue
        value = table[p.name]
        if value.shape != p.data.shape:
            raise CheckpointError(
                f"{path}: shape mismatch for {p.name!r}: checkpoint {value.shape}, model {p.data.shape}")
        p.data = value.astype(p.data.dtype)
        seen.add(p.name)
    extra = set(table) - seen
    if strict and extra:
        raise CheckpointError(f"{path}: unused checkpoint entries {sorted(extra)}")


def param_fingerprint(params) -> str:
    """SHA-256 over the sorted (name, shape, bytes) parameter table."""
    h = hashlib.sha256()
    for p in sorted(params, key=lambda p: p.name):
        h.update(p.name.encode("utf-8"))
        h.update(str(p.data.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()
