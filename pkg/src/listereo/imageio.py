"""Image codecs: 16-bit grayscale PNG depth maps, binary PPM/PGM."""
from __future__ import annotations

import struct
import zlib

import numpy as np

from .geometry import DepthMap

PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
DEPTH_SCALE = 256.0


class CodecError(ValueError):
    pass


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)


def encode_png16(values: np.ndarray) -> bytes:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise CodecError("encode_png16 expects a 2-D array")
    h, w = arr.shape
    rows = np.ascontiguousarray(arr.astype(">u2")).view(np.uint8).reshape(h, w * 2)
    raw = np.concatenate([np.zeros((h, 1), np.uint8), rows], axis=1).tobytes()
    ihdr = struct.pack(">IIBBBBB", w, h, 16, 0, 0, 0, 0)
    return PNG_SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", zlib.compress(raw, 9)) + _chunk(b"IEND", b"")


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.int64)
    pos = 0
    for y in range(h):
        ftype = raw[pos]
        line = np.frombuffer(raw, np.uint8, stride, pos + 1).astype(np.int64)
        pos += stride + 1
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        elif ftype in (1, 3, 4):
            cur = line.copy()
            for i in range(stride):
                left = cur[i - bpp] if i >= bpp else 0
                up = prev[i]
                if ftype == 1:
                    pred = left
                elif ftype == 3:
                    pred = (left + up) // 2
                else:
                    pred = _paeth(left, up, prev[i - bpp] if i >= bpp else 0)
                cur[i] = (cur[i] + pred) & 0xFF
        else:
            raise CodecError(f"unknown PNG filter type {ftype}")
        out[y] = cur
        prev = cur
    return out


def decode_png16(data: bytes) -> np.ndarray:
    if not data.startswith(PNG_SIGNATURE):
        raise CodecError("not a PNG stream")
    pos, ihdr, idat = len(PNG_SIGNATURE), None, []
    while pos < len(data):
        if pos + 8 > len(data):
            raise CodecError("truncated PNG chunk header")
        length, tag = struct.unpack(">I4s", data[pos:pos + 8])
        payload = data[pos + 8:pos + 8 + length]
        crc = data[pos + 8 + length:pos + 12 + length]
        if len(payload) != length or len(crc) != 4:
            raise CodecError("truncated PNG chunk")
        if struct.unpack(">I", crc)[0] != zlib.crc32(tag + payload) & 0xFFFFFFFF:
            raise CodecError(f"CRC mismatch in {tag!r} chunk")
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat.append(payload)
        elif tag == b"IEND":
            break
    if ihdr is None or not idat:
        raise CodecError("PNG missing IHDR or IDAT")
    w, h, depth, ctype, _, _, interlace = ihdr
    if depth != 16 or ctype != 0:
        raise CodecError(f"expected 16-bit grayscale PNG, got bit depth {depth}, color type {ctype}")
    if interlace:
        raise CodecError("interlaced PNG not supported")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise CodecError(f"corrupt PNG image data: {exc}") from None
    if len(raw) != h * (2 * w + 1):
        raise CodecError("PNG image data has wrong size")
    rows = _unfilter(raw, h, 2 * w, 2)
    return rows.view(">u2").reshape(h, w).astype(np.uint16)


def encode_depth_png16(depth: DepthMap) -> bytes:
    """KITTI convention: value = round(depth_m * 256), 0 = invalid."""
    if depth.count and depth.depth[depth.valid].max() >= 65535.5 / DEPTH_SCALE:
        raise CodecError("depth must be below 256 m for PNG16 encoding")
    stored = np.where(depth.valid, np.round(depth.depth * DEPTH_SCALE), 0).astype(np.uint16)
    return encode_png16(stored)


def decode_depth_png16(data: bytes) -> DepthMap:
    stored = decode_png16(data)
    return DepthMap.from_array(stored.astype(np.float64) / DEPTH_SCALE)


def quantize_depth(depth: DepthMap) -> DepthMap:
    """Apply the PNG16 quantization without a byte round trip."""
    return DepthMap.from_array(np.round(depth.depth * DEPTH_SCALE) / DEPTH_SCALE * depth.valid)


def _write_pnm(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr, dtype=np.uint8).tobytes()


def _read_pnm(data: bytes, magic: bytes, channels: int) -> np.ndarray:
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CodecError("truncated PNM header")
        fields.append(data[start:pos])
    if fields[0] != magic:
        raise CodecError(f"expected {magic.decode()} image, got {fields[0][:2]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise CodecError("only 8-bit PNM images are supported")
    pos += 1
    n = w * h * channels
    body = data[pos:pos + n]
    if len(body) != n:
        raise CodecError("truncated PNM pixel data")
    arr = np.frombuffer(body, np.uint8).reshape(h, w, channels)
    return arr if channels > 1 else arr[:, :, 0]


def encode_ppm(image: np.ndarray) -> bytes:
    """Float RGB in [0, 1] (or uint8) -> binary P6."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
    return _write_pnm(b"P6", img)


def decode_ppm(data: bytes) -> np.ndarray:
    return _read_pnm(data, b"P6", 3).astype(np.float64) / 255.0


def encode_pgm(mask: np.ndarray) -> bytes:
    m = np.asarray(mask)
    if m.dtype == bool:
        m = m.astype(np.uint8) * 255
    return _write_pnm(b"P5", m)


def decode_pgm(data: bytes) -> np.ndarray:
    return _read_pnm(data, b"P5", 1)
