"""Binary and text file formats.

``.tns``  tensor container::

    b"TNS1" | u8 dtype (1 = float32 LE) | u8 rank | rank x u32 LE dims | payload

``.ecw``  error-correction-network weights::

    b"ECW1" | u32 LE x 5: classes, width, blocks, stem kernel, depthwise kernel
            | one embedded .tns record per parameter tensor, in ``EcnWeights`` order

Images are binary PPM (P6), label maps binary PGM (P5), both 8-bit.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

TNS_MAGIC = b"TNS1"
ECW_MAGIC = b"ECW1"
DTYPE_F32 = 1


class CorruptFileError(ValueError):
    """A file does not parse as the format it claims to be."""

    def __init__(self, path, reason):
        self.path = str(path)
        super().__init__(f"{self.path}: {reason}")


def _read_exact(fh, n, path):
    data = fh.read(n)
    if len(data) != n:
        raise CorruptFileError(path, f"truncated (wanted {n} bytes, got {len(data)})")
    return data


def write_tns_record(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.ndim > 255:
        raise ValueError("rank above 255 cannot be stored")
    fh.write(TNS_MAGIC)
    fh.write(struct.pack("<BB", DTYPE_F32, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tns_record(fh, path="<stream>") -> np.ndarray:
    magic = _read_exact(fh, 4, path)
    if magic != TNS_MAGIC:
        raise CorruptFileError(path, f"bad magic {magic!r}, expected {TNS_MAGIC!r}")
    dtype, rank = struct.unpack("<BB", _read_exact(fh, 2, path))
    if dtype != DTYPE_F32:
        raise CorruptFileError(path, f"unsupported dtype code {dtype}")
    dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, path))
    count = int(np.prod(dims, dtype=np.int64))
    payload = _read_exact(fh, 4 * count, path)
    return np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)


def write_tns(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tns_record(fh, arr)


def read_tns(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tns_record(fh, path)
        if fh.read(1):
            raise CorruptFileError(path, "trailing bytes after payload")
    return arr


def tns_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tns_record(buf, arr)
    return buf.getvalue()


def write_ecw(path, weights) -> None:
    with open(path, "wb") as fh:
        fh.write(ECW_MAGIC)
        fh.write(struct.pack("<5I", weights.classes, weights.width, weights.blocks,
                             weights.stem_kernel, weights.dw_kernel))
        for name in weights.names():
            write_tns_record(fh, weights.params[name])


def read_ecw(path):
    from .ecm import EcnWeights

    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, path)
        if magic != ECW_MAGIC:
            raise CorruptFileError(path, f"bad magic {magic!r}, expected {ECW_MAGIC!r}")
        classes, width, blocks, ks, kd = struct.unpack("<5I", _read_exact(fh, 20, path))
        try:
            shapes = EcnWeights.param_shapes(classes, width, blocks, ks, kd)
        except ValueError as exc:
            raise CorruptFileError(path, f"inconsistent header: {exc}") from None
        params = {}
        for name, shape in shapes.items():
            arr = read_tns_record(fh, path)
            if arr.shape != shape:
                raise CorruptFileError(path, f"{name} has shape {arr.shape}, expected {shape}")
            params[name] = arr
        if fh.read(1):
            raise CorruptFileError(path, "trailing bytes after last tensor")
    try:
        return EcnWeights(classes, params, width=width, blocks=blocks,
                          stem_kernel=ks, dw_kernel=kd)
    except ValueError as exc:
        raise CorruptFileError(path, str(exc)) from None


def _pnm_header(fh, path):
    tokens = []
    while len(tokens) < 4:
        line = fh.readline()
        if not line:
            raise CorruptFileError(path, "truncated header")
        line = line.split(b"#", 1)[0]
        tokens.extend(line.split())
    magic, w, h, maxval = tokens[:4]
    if len(tokens) > 4:
        raise CorruptFileError(path, "pixel data must start on a new line after maxval")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise CorruptFileError(path, "non-integer header field") from None
    if maxval != 255:
        raise CorruptFileError(path, f"only 8-bit maps are supported (maxval {maxval})")
    return magic, h, w


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, h, w = _pnm_header(fh, path)
        if magic != b"P6":
            raise CorruptFileError(path, f"expected P6, found {magic!r}")
        data = _read_exact(fh, h * w * 3, path)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def write_pgm(path, labels: np.ndarray) -> None:
    h, w = labels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(labels, dtype=np.uint8).tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic, h, w = _pnm_header(fh, path)
        if magic != b"P5":
            raise CorruptFileError(path, f"expected P5, found {magic!r}")
        data = _read_exact(fh, h * w, path)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
