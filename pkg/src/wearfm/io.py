"""Binary tensor containers.

Single-tensor blob layout (also embedded in the multi-tensor containers),
bit-exact and little-endian throughout:

    magic "CMFT" | version u32 | element type u32 (1 = float32) |
    rank u32 | dims u64 * rank | row-major float32 payload

Multi-tensor containers share the pattern: a magic, a version, a
length-prefixed UTF-8 JSON metadata blob, then a u32 tensor count followed by
(length-prefixed name, tensor blob) records. Checkpoints use magic "CMFC",
adapter bundles "CMFB". Writers are atomic (temp file + rename) so a failed
write never leaves a partial artifact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .errors import FormatError, VersionError

MAGIC_TENSOR = b"CMFT"
MAGIC_CHECKPOINT = b"CMFC"
MAGIC_BUNDLE = b"CMFB"
FORMAT_VERSION = 1
ELEM_FLOAT32 = 1

_MAX_RANK = 32
_MAX_NAME = 1 << 16
_MAX_META = 1 << 28


def _read_exact(fh, n: int, what: str) -> bytes:
    off = fh.tell()
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file while reading {what}", offset=off)
    return buf


def write_tensor(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(MAGIC_TENSOR)
    fh.write(struct.pack("<III", FORMAT_VERSION, ELEM_FLOAT32, arr.ndim))
    for dim in arr.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(arr.tobytes(order="C"))


def read_tensor(fh) -> np.ndarray:
    off = fh.tell()
    magic = _read_exact(fh, 4, "tensor magic")
    if magic != MAGIC_TENSOR:
        raise FormatError(f"bad tensor magic {magic!r}", offset=off)
    version, etype, rank = struct.unpack("<III", _read_exact(fh, 12, "tensor header"))
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported tensor format version {version}", offset=off)
    if etype != ELEM_FLOAT32:
        raise FormatError(f"unsupported element type code {etype}", offset=off)
    if rank > _MAX_RANK:
        raise FormatError(f"implausible tensor rank {rank}", offset=off)
    dims = []
    for _ in range(rank):
        (d,) = struct.unpack("<Q", _read_exact(fh, 8, "tensor dimension"))
        dims.append(int(d))
    count = 1
    for d in dims:
        count *= d
    payload = _read_exact(fh, 4 * count, "tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_tensor_blob(path, arr: np.ndarray) -> None:
    with atomic_write(path) as fh:
        write_tensor(fh, arr)


def load_tensor_blob(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        _expect_eof(fh)
    return arr


def _write_str(fh, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)


def _read_str(fh, what: str, limit: int = _MAX_NAME) -> str:
    off = fh.tell()
    (n,) = struct.unpack("<I", _read_exact(fh, 4, f"{what} length"))
    if n > limit:
        raise FormatError(f"implausible {what} length {n}", offset=off)
    return _read_exact(fh, n, what).decode("utf-8")


def _expect_eof(fh) -> None:
    off = fh.tell()
    if fh.read(1):
        raise FormatError("trailing bytes after container payload", offset=off)


def write_container(fh, magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    fh.write(magic)
    fh.write(struct.pack("<I", FORMAT_VERSION))
    _write_str(fh, json.dumps(meta, sort_keys=True, separators=(",", ":")))
    fh.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        _write_str(fh, name)
        write_tensor(fh, tensors[name])


def read_container(fh, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    got = _read_exact(fh, 4, "container magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", offset=0)
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "container version"))
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported container version {version}", offset=4)
    meta = json.loads(_read_str(fh, "container metadata", limit=_MAX_META))
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = _read_str(fh, "tensor name")
        tensors[name] = read_tensor(fh)
    _expect_eof(fh)
    return meta, tensors


def save_container(path, magic: bytes, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    with atomic_write(path) as fh:
        write_container(fh, magic, meta, tensors)


def load_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return read_container(fh, magic)


@contextmanager
def atomic_write(path):
    """Write to a temp file in the target directory, rename on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def file_fingerprint(path) -> str:
    """Short sha256 hex digest of a file's bytes."""
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
