"""Binary PPM (P6) / PGM (P5) reader and writer, maxval 255 only."""

from __future__ import annotations

import numpy as np

from .errors import ImageFormatError

_WS = b" \t\r\n"


def _parse_header(data: bytes):
    """Return (channels, width, height, raster_offset)."""
    if len(data) < 2:
        raise ImageFormatError("file too short for a PNM header")
    magic = data[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise ImageFormatError(f"unsupported magic {magic!r}; only binary P5/P6")

    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos] in _WS:
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] not in b"\r\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in _WS:
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PNM header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError:
            raise ImageFormatError(f"bad header token {data[start:pos]!r}") from None
    if pos >= len(data) or data[pos] not in _WS:
        raise ImageFormatError("missing whitespace before raster")
    pos += 1  # exactly one whitespace byte separates header and raster

    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    return channels, width, height, pos


def image_from_bytes(data: bytes) -> np.ndarray:
    channels, width, height, pos = _parse_header(data)
    need = width * height * channels
    raster = data[pos : pos + need]
    if len(raster) != need:
        raise ImageFormatError(f"raster has {len(raster)} bytes, expected {need}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels).copy()


def image_to_bytes(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ImageFormatError(f"image must be (H,W,1) or (H,W,3), got {img.shape}")
    if img.dtype != np.uint8:
        raise ImageFormatError(f"image must be uint8, got {img.dtype}")
    h, w, c = img.shape
    magic = b"P5" if c == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (w, h)
    return header + img.tobytes()


def read_image(path) -> np.ndarray:
    """Load a P5/P6 file as (H,W,C) uint8 with C in {1,3}."""
    with open(path, "rb") as fh:
        return image_from_bytes(fh.read())


def write_image(path, image: np.ndarray):
    from .pipeline import write_atomic

    write_atomic(path, image_to_bytes(image))
