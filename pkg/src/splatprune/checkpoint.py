"""Versioned flat binary checkpoint for named float32 tensors.

Layout (little-endian)::

    b"SPCK"  uint32 version
    uint32 manifest_bytes, manifest (UTF-8 ``key = value`` lines)
    uint32 tensor_count
    per tensor: uint16 name_bytes, name, uint8 ndim, uint32 dims[ndim], float32 payload (C order)

Tensors are written in sorted name order so identical parameters always
produce identical files.
"""

from __future__ import annotations

import dataclasses
import os
import struct
import tempfile

import numpy as np

from .config import ConfigError, from_kv, parse_kv, split_sections, to_kv

MAGIC = b"SPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def manifest_text(sections: dict[str, object]) -> str:
    """Prefix each dataclass's ``to_kv`` lines with ``section.``."""
    lines = []
    for section in sorted(sections):
        obj = sections[section]
        if dataclasses.is_dataclass(obj):
            text = to_kv(obj)
        else:
            text = "".join(f"{k} = {v}\n" for k, v in sorted(obj.items()))
        lines.extend(f"{section}.{line}" for line in text.splitlines())
    return "\n".join(lines) + ("\n" if lines else "")


def section_config(manifest: dict[str, str], section: str, cls):
    values = split_sections(manifest).get(section)
    if values is None:
        raise CheckpointError(f"checkpoint manifest has no [{section}] entries")
    try:
        return from_kv(cls, values)
    except ConfigError as exc:
        raise CheckpointError(str(exc)) from None


def save_checkpoint(path, params: dict[str, np.ndarray], manifest: str = "") -> None:
    blob = bytearray(MAGIC)
    blob += struct.pack("<I", VERSION)
    mbytes = manifest.encode("utf-8")
    blob += struct.pack("<I", len(mbytes)) + mbytes
    blob += struct.pack("<I", len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        nbytes = name.encode("utf-8")
        blob += struct.pack("<H", len(nbytes)) + nbytes
        blob += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.tobytes()
    directory = os.path.dirname(os.path.abspath(os.fspath(path)))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(bytes(blob))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        out = data[pos:pos + n]
        pos += n
        return out

    if take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (mlen,) = struct.unpack("<I", take(4))
    try:
        manifest = parse_kv(take(mlen).decode("utf-8"), source=str(path))
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"bad manifest: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last tensor")
    return params, manifest
