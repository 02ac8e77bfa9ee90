"""8-bit RGB image files: binary PPM (P6) and non-interlaced PNG."""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageFormatError(ValueError):
    pass


def atomic_write(path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- quantization -------------------------------------------------------------

def to_bytes(t, strict: bool = True) -> np.ndarray:
    """``[3, H, W]`` floats in [0, 1] -> ``[H, W, 3]`` uint8, rounding half up."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 3 or t.shape[0] != 3:
        raise ImageFormatError(f"expected [3, H, W], got {t.shape}")
    if not np.all(np.isfinite(t)):
        raise ImageFormatError("image contains non-finite values")
    if strict and (t.min() < 0.0 or t.max() > 1.0):
        raise ImageFormatError(f"values outside [0, 1]: [{t.min()}, {t.max()}]")
    q = np.floor(np.clip(t, 0.0, 1.0) * 255.0 + 0.5)
    return q.astype(np.uint8).transpose(1, 2, 0)


def from_bytes(pixels: np.ndarray) -> np.ndarray:
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


# -- PPM ----------------------------------------------------------------------

def _ppm_header(data: bytes):
    """Parse ``P6 <w> <h> <maxval>``; returns the fields and the payload offset."""
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise ImageFormatError("malformed PPM header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("truncated PPM header")
    return fields, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    if data[:2] != b"P6":
        raise ImageFormatError("not a binary PPM (P6) file")
    (w, h, maxval), off = _ppm_header(data)
    if maxval != 255:
        raise ImageFormatError(f"unsupported PPM maxval {maxval}; only 8-bit is supported")
    if w < 1 or h < 1:
        raise ImageFormatError(f"invalid PPM size {w}x{h}")
    need = w * h * 3
    if len(data) - off < need:
        raise ImageFormatError(f"truncated PPM payload: {len(data) - off} of {need} bytes")
    return np.frombuffer(data, np.uint8, need, off).reshape(h, w, 3)


def encode_ppm(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(pixels).tobytes()


# -- PNG ----------------------------------------------------------------------

def _chunks(data: bytes):
    pos = len(PNG_SIGNATURE)
    while pos < len(data):
        if pos + 8 > len(data):
            raise ImageFormatError("truncated PNG chunk header")
        length, ctype = struct.unpack(">I4s", data[pos:pos + 8])
        body = data[pos + 8:pos + 8 + length]
        if len(body) != length or pos + 12 + length > len(data):
            raise ImageFormatError(f"truncated PNG chunk {ctype!r}")
        (crc,) = struct.unpack(">I", data[pos + 8 + length:pos + 12 + length])
        if zlib.crc32(ctype + body) != crc:
            raise ImageFormatError(f"CRC mismatch in PNG chunk {ctype!r}")
        yield ctype, body
        pos += 12 + length


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, h: int, w: int, bpp: int) -> np.ndarray:
    stride = w * bpp
    if len(raw) < h * (stride + 1):
        raise ImageFormatError("truncated PNG image data")
    rows = np.frombuffer(raw, np.uint8, h * (stride + 1)).reshape(h, stride + 1)
    out = np.zeros((h, stride), np.int32)
    prev = np.zeros(stride, np.int32)
    for y in range(h):
        ftype = rows[y, 0]
        line = rows[y, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            # these depend on the reconstructed left neighbour, so go pixel by pixel
            up = prev.tolist()
            ln = line.tolist()
            row = [0] * stride
            for i in range(stride):
                a = row[i - bpp] if i >= bpp else 0
                c = up[i - bpp] if i >= bpp else 0
                if ftype == 1:
                    pred = a
                elif ftype == 3:
                    pred = (a + up[i]) // 2
                else:
                    pred = _paeth(a, up[i], c)
                row[i] = (ln[i] + pred) & 0xFF
            cur = np.array(row, np.int32)
        else:
            raise ImageFormatError(f"unknown PNG filter type {ftype}")
        out[y] = cur
        prev = cur
    return out.astype(np.uint8)


def decode_png(data: bytes) -> np.ndarray:
    if data[:8] != PNG_SIGNATURE:
        raise ImageFormatError("not a PNG file")
    header = None
    idat = []
    for ctype, body in _chunks(data):
        if ctype == b"IHDR":
            header = struct.unpack(">IIBBBBB", body)
        elif ctype == b"IDAT":
            idat.append(body)
        elif ctype == b"IEND":
            break
    if header is None:
        raise ImageFormatError("PNG without IHDR")
    w, h, depth, color, _, _, interlace = header
    if depth != 8:
        raise ImageFormatError(f"unsupported PNG bit depth {depth}; only 8-bit is supported")
    if color not in (2, 6):
        raise ImageFormatError(f"unsupported PNG colour type {color}; need RGB or RGBA")
    if interlace:
        raise ImageFormatError("interlaced PNG is not supported")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise ImageFormatError(f"corrupt PNG image data: {exc}") from None
    bpp = 3 if color == 2 else 4
    pixels = _unfilter(raw, h, w, bpp).reshape(h, w, bpp)
    return np.ascontiguousarray(pixels[:, :, :3])


def _chunk(ctype: bytes, body: bytes) -> bytes:
    return struct.pack(">I", len(body)) + ctype + body + struct.pack(">I", zlib.crc32(ctype + body))


def encode_png(pixels: np.ndarray) -> bytes:
    h, w, _ = pixels.shape
    rows = np.concatenate([np.zeros((h, 1), np.uint8), pixels.reshape(h, w * 3)], axis=1)
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (PNG_SIGNATURE + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib.compress(rows.tobytes(), 9)) + _chunk(b"IEND", b""))


# -- public entry points ----------------------------------------------------------

def decode(data: bytes) -> np.ndarray:
    if data[:8] == PNG_SIGNATURE:
        return decode_png(data)
    if data[:2] == b"P6":
        return decode_ppm(data)
    raise ImageFormatError("unrecognized image format (need P6 PPM or PNG)")


def read_image(path) -> np.ndarray:
    """Load an 8-bit RGB image as ``[3, H, W]`` float64 in [0, 1]."""
    try:
        return from_bytes(decode(Path(path).read_bytes()))
    except ImageFormatError as exc:
        raise ImageFormatError(f"{path}: {exc}") from None


def write_image(t, path, strict: bool = True) -> None:
    """Write ``[3, H, W]`` in [0, 1]; ``.png`` gives PNG, anything else PPM."""
    pixels = to_bytes(t, strict)
    data = encode_png(pixels) if str(path).lower().endswith(".png") else encode_ppm(pixels)
    atomic_write(path, data)


IMAGE_SUFFIXES = (".ppm", ".png")
