"""Binary tensor container shared by language-model and energy-network checkpoints.

Layout::

    8 bytes   magic  b"APDTNSR\\x01"
    4 bytes   little-endian uint32 header length H
    H bytes   UTF-8 JSON header (format_version, kind, tensors, payload_crc32, ...)
    payload   row-major little-endian float32 tensors, in header order
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"APDTNSR\x01"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """Raised for unreadable, corrupted or incompatible container files."""


def write_container(path, header: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    arrays = [(name, np.ascontiguousarray(t, dtype="<f4")) for name, t in tensors]
    payload = b"".join(a.tobytes(order="C") for _, a in arrays)
    full = dict(header)
    full["format_version"] = FORMAT_VERSION
    full["tensors"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    full["payload_crc32"] = zlib.crc32(payload)
    blob = json.dumps(full, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(payload)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise ContainerError(f"{path}: not a tensor container (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if 12 + hlen > len(raw):
        raise ContainerError(f"{path}: header truncated at byte {len(raw)}")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: corrupted header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise ContainerError(
            f"{path}: format version {header.get('format_version')!r}, expected {FORMAT_VERSION}"
        )
    payload = raw[12 + hlen :]
    expected = sum(4 * int(np.prod(t["shape"], dtype=np.int64)) for t in header["tensors"])
    if len(payload) != expected:
        raise ContainerError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    if zlib.crc32(payload) != header["payload_crc32"]:
        raise ContainerError(f"{path}: payload checksum mismatch")
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        tensors[spec["name"]] = (
            np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape).copy()
        )
        offset += 4 * n
    return header, tensors
