"""Binary raster, stack and checkpoint file formats.

All multi-byte fields are little-endian. Headers::

    DPTH  u32 height, u32 width, u32 reserved        then f32 depth values
    LBLS  u32 height, u32 width, u32 max_blur        then i8 labels
    HSTK  u32 h, u32 w, u32 depth, u32 channels, u32 n, 24 x i8 slice labels
          then f32 values in [h, w, depth, channels] order
    NET3  u32 version, u32 tensor count, then per tensor
          u16 name length, utf-8 name, u32 ndim, ndim x u32 dims, f32 values
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError

CHECKPOINT_VERSION = 1


def _read(path, magic: bytes, header: int) -> bytes:
    data = Path(path).read_bytes()
    if data[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {data[:4]!r}")
    if len(data) < header:
        raise FormatError(f"{path}: truncated header")
    return data


def _payload(data: bytes, offset: int, dtype: str, shape, path) -> np.ndarray:
    count = int(np.prod(shape))
    size = count * np.dtype(dtype).itemsize
    if len(data) - offset != size:
        raise FormatError(f"{path}: payload is {len(data) - offset} bytes, expected {size}")
    return np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape).copy()


# -- grayscale images ---------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Load an 8- or 16-bit grayscale PNG/PGM as float64 in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{path}: cannot read image ({exc})") from exc
    if arr.ndim == 3:
        raise FormatError(f"{path}: expected a single-channel image")
    scale = 255.0 if arr.dtype == np.uint8 else 65535.0
    return arr.astype(np.float64) / scale


def write_image(path, image: np.ndarray, bits: int = 16) -> None:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    if bits == 8:
        Image.fromarray(np.round(img * 255).astype(np.uint8)).save(path)
    elif bits == 16:
        Image.fromarray(np.round(img * 65535).astype(np.uint16)).save(path)
    else:
        raise ConfigError("bits must be 8 or 16")


def read_mask(path, name=None):
    from .optics import ApertureMask

    return ApertureMask(read_image(path), name=name or Path(path).stem)


# -- depth and label rasters --------------------------------------------------

def write_depth(path, depth: np.ndarray) -> None:
    h, w = depth.shape
    header = b"DPTH" + struct.pack("<III", h, w, 0)
    Path(path).write_bytes(header + np.asarray(depth, dtype="<f4").tobytes())


def read_depth(path) -> np.ndarray:
    data = _read(path, b"DPTH", 16)
    h, w, _ = struct.unpack_from("<III", data, 4)
    return _payload(data, 16, "<f4", (h, w), path).astype(np.float64)


def write_labels(path, labels: np.ndarray, max_blur: int) -> None:
    h, w = labels.shape
    header = b"LBLS" + struct.pack("<III", h, w, int(max_blur))
    Path(path).write_bytes(header + np.asarray(labels, dtype="i1").tobytes())


def read_labels(path) -> tuple[np.ndarray, int]:
    data = _read(path, b"LBLS", 16)
    h, w, max_blur = struct.unpack_from("<III", data, 4)
    return _payload(data, 16, "i1", (h, w), path).astype(np.int64), max_blur


# -- hypothesis stacks --------------------------------------------------------

def write_stack(path, stack) -> None:
    h, w, depth, channels = stack.data.shape
    header = b"HSTK" + struct.pack("<IIIII", h, w, depth, channels, stack.n)
    header += np.asarray(stack.slice_labels, dtype="i1").tobytes()
    Path(path).write_bytes(header + np.asarray(stack.data, dtype="<f4").tobytes())


def read_stack(path):
    from .deconv import STACK_DEPTH, HypothesisStack

    data = _read(path, b"HSTK", 24 + STACK_DEPTH)
    h, w, depth, channels, n = struct.unpack_from("<IIIII", data, 4)
    if depth != STACK_DEPTH:
        raise FormatError(f"{path}: stack depth {depth}, expected {STACK_DEPTH}")
    labels = np.frombuffer(data, dtype="i1", count=STACK_DEPTH, offset=24).astype(np.int64)
    values = _payload(data, 24 + STACK_DEPTH, "<f4", (h, w, depth, channels), path)
    return HypothesisStack(values, labels, n)


# -- network checkpoints ------------------------------------------------------

def write_checkpoint(path, tensors: dict) -> None:
    parts = [b"NET3", struct.pack("<II", CHECKPOINT_VERSION, len(tensors))]
    for name, value in tensors.items():
        raw = name.encode()
        arr = np.asarray(value, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> dict:
    data = _read(path, b"NET3", 12)
    version, count = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
        )
    tensors = {}
    pos = 12
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape)) * 4
            if pos + size > len(data):
                raise FormatError(f"{path}: truncated tensor {name!r}")
            tensors[name] = np.frombuffer(data, "<f4", int(np.prod(shape)), pos).reshape(shape).astype(np.float32)
            pos += size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return tensors
