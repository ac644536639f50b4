"""Little-endian ``UCRN`` record container shared by every artifact.

Layout: magic ``b"UCRN"``, u32 version, then records of
(u32 name length, UTF-8 name, u32 rank, u64 dims[rank], f64 payload).
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

MAGIC = b"UCRN"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_records(fh: BinaryIO, records: Mapping[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<I", VERSION))
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        if arr.ndim:
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def records_to_bytes(records: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    write_records(buf, records)
    return buf.getvalue()


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def read_records(fh: BinaryIO) -> dict[str, np.ndarray]:
    if _read_exact(fh, 4, "magic") != MAGIC:
        raise CheckpointError("not a UCRN container (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported UCRN version {version}")
    out: dict[str, np.ndarray] = {}
    while True:
        head = fh.read(4)
        if not head:
            return out
        if len(head) != 4:
            raise CheckpointError("truncated checkpoint while reading record header")
        (nlen,) = struct.unpack("<I", head)
        name = _read_exact(fh, nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(fh, 4, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, f"dims of {name}")) if rank else ()
        count = int(np.prod(dims)) if rank else 1
        payload = _read_exact(fh, 8 * count, f"payload of {name}")
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def save(path, records: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        write_records(fh, records)


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_records(fh)


def digest(records: Mapping[str, np.ndarray]) -> str:
    return hashlib.sha256(records_to_bytes(records)).hexdigest()


def digest_to_array(hexdigest: str) -> np.ndarray:
    """A sha256 hex digest as 32 byte values, storable as an f64 record."""
    return np.frombuffer(bytes.fromhex(hexdigest), dtype=np.uint8).astype(np.float64)


def array_to_digest(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).hex()
