"""PNG and raw float image files.

Float dump layout: ``b"GSFD"``, uint32 height, width, channels, then
float32 little-endian pixels in row-major order.
"""

from __future__ import annotations

import os
import struct

import numpy as np
from PIL import Image

FLOAT_MAGIC = b"GSFD"


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_float_dump(path, img: np.ndarray) -> None:
    arr = np.asarray(img, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(FLOAT_MAGIC + struct.pack("<3I", h, w, c) + np.ascontiguousarray(arr).tobytes())


def read_float_dump(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != FLOAT_MAGIC or len(data) < 16:
        raise ValueError(f"{path}: not a float dump")
    h, w, c = struct.unpack("<3I", data[4:16])
    if len(data) != 16 + 4 * h * w * c:
        raise ValueError(f"{path}: expected {16 + 4 * h * w * c} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c).astype(np.float32)


def read_image(path) -> np.ndarray:
    """PNG or float dump, chosen by extension (``.fd`` / ``.bin`` are float dumps)."""
    ext = os.path.splitext(os.fspath(path))[1].lower()
    return read_float_dump(path) if ext in (".fd", ".bin") else read_png(path)


def list_images(directory) -> dict[str, str]:
    """Map view name (file stem) to path; float dumps win over PNGs of the same name."""
    out: dict[str, str] = {}
    for name in sorted(os.listdir(directory)):
        stem, ext = os.path.splitext(name)
        if ext.lower() == ".png" and stem not in out:
            out[stem] = os.path.join(directory, name)
        elif ext.lower() == ".fd":
            out[stem] = os.path.join(directory, name)
    return out
