"""File formats: PFM float maps, 8/16-bit grayscale PGM/PNG, grid checkpoints.

All writers go through :func:`atomic_write` (temp file in the target
directory, then rename).
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .density_grid import DensityGrid


class FormatError(ValueError):
    """Malformed or unsupported file content."""


def _default_mode() -> int:
    umask = os.umask(0)
    os.umask(umask)
    return 0o666 & ~umask


@contextmanager
def atomic_write(path, mode: str = "wb"):
    """Write to a temporary file beside ``path`` and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.chmod(tmp, _default_mode())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> None:
    with atomic_write(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- PFM ---------------------------------------------------------------------

_PFM_HEADER = re.compile(rb"^(P[Ff])\s+(\d+)\s+(\d+)\s+(\S+)\s")


def write_pfm(path, array, little_endian: bool = True) -> None:
    """Single-channel float32 PFM, rows stored bottom-to-top."""
    a = np.asarray(array, dtype=np.float32)
    if a.ndim != 2:
        raise ValueError("write_pfm expects a 2-D array")
    h, w = a.shape
    scale = -1.0 if little_endian else 1.0
    dt = "<f4" if little_endian else ">f4"
    with atomic_write(path) as fh:
        fh.write(f"Pf\n{w} {h}\n{scale:g}\n".encode("ascii"))
        fh.write(np.flipud(a).astype(dt).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PFM_HEADER.match(data)
    if not m:
        raise FormatError(f"{path}: malformed PFM header at byte 0")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), m.group(4)
    try:
        scale = float(scale)
    except ValueError:
        raise FormatError(f"{path}: bad PFM scale at byte {m.start(4)}") from None
    if scale == 0:
        raise FormatError(f"{path}: PFM scale must be nonzero (byte {m.start(4)})")
    channels = 3 if kind == b"PF" else 1
    offset = m.end()
    need = w * h * channels * 4
    if len(data) - offset < need:
        raise FormatError(
            f"{path}: truncated PFM payload at byte {len(data)}, expected {offset + need} bytes"
        )
    dt = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dt, count=w * h * channels, offset=offset)
    arr = arr.reshape((h, w, channels) if channels == 3 else (h, w))
    return np.flipud(arr).astype(np.float32)


# -- grayscale images ----------------------------------------------------------


def _read_pgm(data: bytes, path) -> tuple[np.ndarray, int]:
    # header tokens with optional comments
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header at byte {pos}")
        tokens.append(data[start:pos])
    magic = tokens[0]
    if magic == b"P6":
        raise FormatError(f"{path}: color PPM images are unsupported")
    if magic != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {magic!r} at byte 0)")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1  # single whitespace after maxval
    bits = 8 if maxval < 256 else 16
    dt = np.uint8 if bits == 8 else np.dtype(">u2")
    count = w * h
    if len(data) - pos < count * np.dtype(dt).itemsize:
        raise FormatError(f"{path}: truncated PGM payload at byte {len(data)}")
    img = np.frombuffer(data, dtype=dt, count=count, offset=pos).reshape(h, w)
    return img, maxval


def read_gray(path) -> np.ndarray:
    """Grayscale PGM (P5) or PNG, 8 or 16 bit, mapped to [0, 1] float64."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P5", b"P6", b"P2", b"P3"):
        img, maxval = _read_pgm(data, path)
        return img.astype(np.float64) / maxval
    from PIL import Image

    with Image.open(path) as im:
        if im.mode in ("L",):
            return np.asarray(im, dtype=np.float64) / 255.0
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            return arr / 65535.0
        raise FormatError(f"{path}: unsupported image mode {im.mode} (grayscale only)")


def write_gray(path, image, bits: int = 8) -> None:
    """Write [0, 1] intensities as PGM or PNG (by extension) at 8 or 16 bits."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 2:
        raise FormatError("write_gray expects a single-channel image")
    maxval = (1 << bits) - 1
    q = np.round(np.clip(a, 0.0, 1.0) * maxval)
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        im = Image.fromarray(q.astype(np.uint8)) if bits == 8 else Image.fromarray(q.astype(np.uint16))
        with atomic_write(path) as fh:
            im.save(fh, format="PNG")
        return
    h, w = a.shape
    payload = q.astype(np.uint8).tobytes() if bits == 8 else q.astype(">u2").tobytes()
    with atomic_write(path) as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(payload)


# -- grid checkpoint -------------------------------------------------------------

MAGIC = b"VSLG"
CHECKPOINT_VERSION = 1
_HEAD = struct.Struct("<4sI3Id")


def write_checkpoint(path, grid: DensityGrid) -> None:
    """Magic, u32 version, u32 dims[3], f64 bias, raw values as little-endian f32 (z fastest)."""
    nx, ny, nz = grid.dims
    with atomic_write(path) as fh:
        fh.write(_HEAD.pack(MAGIC, CHECKPOINT_VERSION, nx, ny, nz, float(grid.bias)))
        fh.write(np.ascontiguousarray(grid.raw, dtype="<f4").tobytes())


def read_checkpoint(path) -> DensityGrid:
    data = Path(path).read_bytes()
    if len(data) < _HEAD.size:
        raise FormatError(f"{path}: truncated checkpoint header at byte {len(data)}")
    magic, version, nx, ny, nz, bias = _HEAD.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {magic!r} at byte 0")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version} at byte 4")
    need = _HEAD.size + 4 * nx * ny * nz
    if len(data) < need:
        raise FormatError(f"{path}: truncated checkpoint payload at byte {len(data)}, expected {need}")
    raw = np.frombuffer(data, dtype="<f4", count=nx * ny * nz, offset=_HEAD.size).reshape(nx, ny, nz)
    return DensityGrid(raw.astype(np.float32), bias)
