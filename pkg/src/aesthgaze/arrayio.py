"""Binary array container used by every tool in the pipeline.

Layout (little-endian throughout):

    bytes 0-3   magic "ARR1"
    byte  4     dtype code (0 = float32, 1 = uint8)
    byte  5     rank (1..5)
    next        rank * int64 shape
    rest        row-major payload

The format is deliberately minimal: bit-exact round trips, no compression,
readable from any language.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import ArrayFormatError

MAGIC = b"ARR1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1}
MAX_RANK = 5

# Registered callables receive every path passed to read_array / read audit
# points; used by tests to prove a code path never touches certain files.
_read_hooks = []


def register_read_hook(fn):
    _read_hooks.append(fn)


def unregister_read_hook(fn):
    _read_hooks.remove(fn)


def _notify_read(path):
    for fn in _read_hooks:
        fn(str(path))


def write_array(path, array) -> None:
    """Write ``array`` (float32 or uint8, rank <= 5) to ``path``."""
    a = np.asarray(array)
    if a.dtype == np.float64:
        raise TypeError("ARR1 stores float32 or uint8; cast explicitly first")
    dtype = np.dtype("<f4") if a.dtype.kind == "f" else a.dtype.newbyteorder("<")
    if dtype not in _CODES:
        raise TypeError(f"unsupported dtype {a.dtype}")
    if not 1 <= a.ndim <= MAX_RANK:
        raise ValueError(f"rank must be 1..{MAX_RANK}, got {a.ndim}")
    a = np.ascontiguousarray(a, dtype=dtype)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<BB", _CODES[dtype], a.ndim))
        f.write(struct.pack(f"<{a.ndim}q", *a.shape))
        f.write(a.tobytes())


def read_array(path, dtype=None, shape=None) -> np.ndarray:
    """Read an ARR1 file.

    Optional ``dtype`` / ``shape`` assert the stored type; a mismatch raises
    TypeError so callers can rely on the declared contract.
    """
    _notify_read(path)
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ArrayFormatError(f"array file not found: {path}") from None
    if len(raw) < 6 or raw[:4] != MAGIC:
        raise ArrayFormatError(f"not an ARR1 file: {path}")
    code, rank = struct.unpack_from("<BB", raw, 4)
    if code not in _DTYPES:
        raise ArrayFormatError(f"unknown dtype code {code} in {path}")
    if not 1 <= rank <= MAX_RANK:
        raise ArrayFormatError(f"bad rank {rank} in {path}")
    header_end = 6 + 8 * rank
    if len(raw) < header_end:
        raise ArrayFormatError(f"truncated header in {path}")
    shp = struct.unpack_from(f"<{rank}q", raw, 6)
    if any(s < 0 for s in shp):
        raise ArrayFormatError(f"negative shape {shp} in {path}")
    dt = _DTYPES[code]
    expected = int(np.prod(shp)) * dt.itemsize
    payload = raw[header_end:]
    if len(payload) != expected:
        raise ArrayFormatError(
            f"truncated payload in {path}: {len(payload)} bytes, expected {expected}"
        )
    a = np.frombuffer(payload, dtype=dt).reshape(shp)
    if dtype is not None and np.dtype(dtype) != dt:
        raise TypeError(f"{path}: stored dtype {dt}, expected {np.dtype(dtype)}")
    if shape is not None and tuple(shape) != tuple(shp):
        raise TypeError(f"{path}: stored shape {shp}, expected {tuple(shape)}")
    return a.copy()
