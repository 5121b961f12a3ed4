"""Container format: header, lossy payload, per-patch residual bitstreams.

Little-endian layout:

    magic "RESC" | u16 version | u8 flags | u32 H | u32 W | u8 C | u16 p |
    u8 K | 8B checkpoint hash | [8B image checksum if flag bit 0] |
    u16 backend-id length | backend id | u32 payload length | payload |
    u32 N | N x u32 stream lengths | concatenated residual streams

The declared lengths must partition the remaining bytes exactly and N must
equal ceil(H/p) * ceil(W/p).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContainerError

MAGIC = b"RESC"
VERSION = 1
FLAG_CHECKSUM = 0x01


@dataclass
class Container:
    height: int
    width: int
    channels: int
    patch_size: int
    mixtures: int
    checkpoint_hash: bytes
    backend_id: str
    payload: bytes
    streams: list[bytes]
    image_checksum: bytes | None = None
    version: int = VERSION

    @property
    def flags(self) -> int:
        return FLAG_CHECKSUM if self.image_checksum is not None else 0

    @property
    def patch_count(self) -> int:
        p = self.patch_size
        return -(-self.height // p) * (-(-self.width // p))

    @property
    def subpixels(self) -> int:
        return self.height * self.width * self.channels


def image_checksum(image: np.ndarray) -> bytes:
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.uint8).tobytes()).digest()[:8]


def serialize(c: Container) -> bytes:
    if len(c.checkpoint_hash) != 8:
        raise ContainerError("checkpoint hash must be 8 bytes")
    if len(c.streams) != c.patch_count:
        raise ContainerError(
            f"{len(c.streams)} residual streams for {c.patch_count} patches"
        )
    out = bytearray()
    out += MAGIC
    out += struct.pack("<HB", c.version, c.flags)
    out += struct.pack("<IIBHB", c.height, c.width, c.channels, c.patch_size, c.mixtures)
    out += c.checkpoint_hash
    if c.image_checksum is not None:
        if len(c.image_checksum) != 8:
            raise ContainerError("image checksum must be 8 bytes")
        out += c.image_checksum
    bid = c.backend_id.encode()
    out += struct.pack("<H", len(bid))
    out += bid
    out += struct.pack("<I", len(c.payload))
    out += c.payload
    out += struct.pack("<I", len(c.streams))
    for s in c.streams:
        out += struct.pack("<I", len(s))
    for s in c.streams:
        out += s
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ContainerError(
                f"container truncated at byte {self.pos} (needed {n} more)"
            )
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse(data: bytes) -> Container:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise ContainerError("bad container magic")
    version, flags = r.unpack("<HB")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if flags & ~FLAG_CHECKSUM:
        raise ContainerError(f"unknown flag bits 0x{flags:02x}")
    height, width, channels, patch_size, mixtures = r.unpack("<IIBHB")
    if height < 1 or width < 1:
        raise ContainerError(f"bad dimensions {height}x{width}")
    if channels not in (1, 3):
        raise ContainerError(f"bad channel count {channels}")
    if patch_size < 1:
        raise ContainerError("bad patch size 0")
    ckpt_hash = r.take(8)
    checksum = r.take(8) if flags & FLAG_CHECKSUM else None
    bid = r.take(r.unpack("<H")[0]).decode()
    payload = r.take(r.unpack("<I")[0])
    (n,) = r.unpack("<I")
    expected_n = -(-height // patch_size) * (-(-width // patch_size))
    if n != expected_n:
        raise ContainerError(f"container lists {n} patches, dims imply {expected_n}")
    lengths = [r.unpack("<I")[0] for _ in range(n)]
    streams = [r.take(ln) for ln in lengths]
    if r.pos != len(data):
        raise ContainerError(f"{len(data) - r.pos} trailing bytes after last stream")
    return Container(height, width, channels, patch_size, mixtures, ckpt_hash,
                     bid, payload, streams, checksum, version)


@dataclass(frozen=True)
class BpspReport:
    """Bits-per-subpixel decomposition of one container."""

    total: float
    lossy: float
    residual: float
    header: float
    total_bytes: int
    payload_bytes: int
    residual_bytes: int

    def __str__(self):
        return (f"lossy {self.lossy:.4f} + residual {self.residual:.4f} + "
                f"header {self.header:.4f} = {self.total:.4f} bpsp")


def bpsp_report(data: bytes, container: Container | None = None) -> BpspReport:
    c = container if container is not None else parse(data)
    sub = c.subpixels
    total_bytes = len(data)
    payload_bytes = len(c.payload)
    residual_bytes = sum(len(s) for s in c.streams)
    total = 8.0 * total_bytes / sub
    lossy = 8.0 * payload_bytes / sub
    residual = 8.0 * residual_bytes / sub
    return BpspReport(total, lossy, residual, total - lossy - residual,
                      total_bytes, payload_bytes, residual_bytes)
