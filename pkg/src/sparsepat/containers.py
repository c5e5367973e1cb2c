"""Binary containers for images, sinograms and checkpoints.

Layout shared by all three: 8 magic bytes, a little-endian uint32 header
length, a UTF-8 JSON header, then little-endian float32 payload.  Checkpoints
follow the header with named records::

    uint32 name_len | name | uint32 ndim | uint32 dims[ndim] | float32 data
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = b"PATIMG01"
SINOGRAM_MAGIC = b"PATSINO1"
CHECKPOINT_MAGIC = b"PATCKPT1"

_F32 = np.dtype("<f4")


class ContainerError(ValueError):
    pass


def _dump_header(header: dict) -> bytes:
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _read_header(buf: bytes, magic: bytes, path):
    if buf[:8] != magic:
        raise ContainerError(f"{path}: bad magic {buf[:8]!r}, expected {magic!r}")
    if len(buf) < 12:
        raise ContainerError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", buf, 8)
    try:
        header = json.loads(buf[12 : 12 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable header: {exc}") from None
    return header, 12 + n


def _write_array_file(path, magic, header, array):
    arr = np.ascontiguousarray(array, dtype=_F32)
    header = dict(header, shape=list(arr.shape), dtype="float32")
    Path(path).write_bytes(magic + _dump_header(header) + arr.tobytes())


def _read_array_file(path, magic):
    buf = Path(path).read_bytes()
    header, off = _read_header(buf, magic, path)
    shape = tuple(header["shape"])
    count = int(np.prod(shape)) if shape else 1
    if len(buf) - off != count * 4:
        raise ContainerError(f"{path}: payload has {len(buf) - off} bytes, expected {count * 4}")
    data = np.frombuffer(buf, dtype=_F32, count=count, offset=off).reshape(shape).astype(np.float32)
    return data, header


def write_image(path, image, extent=None, provenance=None):
    header = {"extent_m": extent, "provenance": provenance or {}}
    _write_array_file(path, IMAGE_MAGIC, header, image)


def read_image(path):
    """Return ``(image, header)``."""
    return _read_array_file(path, IMAGE_MAGIC)


def write_sinogram(path, samples, meta: dict):
    _write_array_file(path, SINOGRAM_MAGIC, meta, samples)


def read_sinogram(path):
    return _read_array_file(path, SINOGRAM_MAGIC)


def write_checkpoint(path, header: dict, arrays: dict):
    """Write named float32 arrays in sorted-name order after the header."""
    parts = [CHECKPOINT_MAGIC, _dump_header(header)]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=_F32)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_checkpoint(path):
    """Return ``(header, arrays)``; raises ContainerError on any malformed record."""
    buf = Path(path).read_bytes()
    header, off = _read_header(buf, CHECKPOINT_MAGIC, path)
    arrays = {}
    try:
        while off < len(buf):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if off + 4 * count > len(buf):
                raise ContainerError(f"{path}: record {name!r} truncated")
            arrays[name] = np.frombuffer(buf, dtype=_F32, count=count, offset=off).reshape(shape).copy()
            off += 4 * count
    except struct.error as exc:
        raise ContainerError(f"{path}: truncated record: {exc}") from None
    return header, arrays


def write_png(path, image):
    """8-bit grayscale preview; [0,1] mapped to [0,255] with round-half-up."""
    from PIL import Image

    q = np.floor(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(q, mode="L").save(path)
