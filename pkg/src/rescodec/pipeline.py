"""Encode/decode pipeline: lossy base, residual, per-patch arithmetic coding.

Every patch is coded independently: the encoder walks its residual subpixels
in channel-major raster order, asks the entropy model (or a uniform stand-in)
for a frequency table at each position, feeds the symbol to a fresh range
coder, and records one bitstream per patch in the container.  Decoding runs
the identical model queries, so the two sides see identical tables.
"""

from __future__ import annotations

import os
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from . import container as cont
from .entropy_coder import RangeDecoder, RangeEncoder, uniform_table
from .errors import BackendError, ChecksumError, CodecError, ContainerError, HashMismatchError, ShapeError
from .gmm import NUM_SYMBOLS, RESIDUAL_LO, coding_table, residual_symbols
from .model import EntropyModel
from .ppm import image_from_bytes, image_to_bytes


def write_atomic(path, data: bytes):
    """Write-temp-then-rename so failures never leave partial files."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


# ---------------------------------------------------------------------------
# residuals and patch grid


def check_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ShapeError(f"image must be (H,W,1) or (H,W,3), got {img.shape}")
    if img.dtype != np.uint8:
        raise ShapeError(f"image must be uint8, got {img.dtype}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"zero-dimension image {img.shape}")
    return img


def compute_residual(x: np.ndarray, x_l: np.ndarray) -> np.ndarray:
    x, x_l = check_image(x), check_image(x_l)
    if x.shape != x_l.shape:
        raise ShapeError(f"image {x.shape} vs reconstruction {x_l.shape}")
    return x.astype(np.int16) - x_l.astype(np.int16)


def apply_residual(x_l: np.ndarray, r: np.ndarray) -> np.ndarray:
    out = x_l.astype(np.int16) + r.astype(np.int16)
    if out.size and (out.min() < 0 or out.max() > 255):
        raise ContainerError("decoded residual leaves the 8-bit sample range")
    return out.astype(np.uint8)


@dataclass(frozen=True)
class PatchRegion:
    y0: int
    x0: int
    h: int
    w: int


def patch_grid(height: int, width: int, p: int) -> list[PatchRegion]:
    """Row-major disjoint cover; boundary patches may be smaller than p."""
    out = []
    for y0 in range(0, height, p):
        for x0 in range(0, width, p):
            out.append(PatchRegion(y0, x0, min(p, height - y0), min(p, width - x0)))
    return out


# ---------------------------------------------------------------------------
# lossy backends


class LossyBackend(Protocol):
    id: str

    def encode(self, image: np.ndarray) -> tuple[bytes, np.ndarray]: ...

    def decode(self, payload: bytes, shape: tuple[int, int, int]) -> np.ndarray: ...


class IdentityBackend:
    """Stores raw samples; reconstruction equals the input exactly."""

    id = "identity"

    def encode(self, image):
        img = check_image(image)
        return img.tobytes(), img.copy()

    def decode(self, payload, shape):
        h, w, c = shape
        if len(payload) != h * w * c:
            raise BackendError(f"identity payload is {len(payload)} bytes, expected {h*w*c}")
        return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c).copy()


class QdownBackend:
    """Average-pool by s, then fixed-point bilinear upsample (round half up).

    All arithmetic is integer, so decoding the payload reproduces the
    encoder's reconstruction bit-exactly.
    """

    def __init__(self, factor: int):
        if factor not in (2, 4, 8):
            raise BackendError(f"qdown factor must be 2, 4 or 8, got {factor}")
        self.factor = factor
        self.id = f"qdown:{factor}"

    def encode(self, image):
        img = check_image(image)
        h, w, c = img.shape
        s = self.factor
        hd, wd = -(-h // s), -(-w // s)
        pooled = np.empty((hd, wd, c), dtype=np.uint8)
        arr = img.astype(np.int64)
        for i in range(hd):
            for j in range(wd):
                block = arr[i * s : min((i + 1) * s, h), j * s : min((j + 1) * s, w)]
                area = block.shape[0] * block.shape[1]
                pooled[i, j] = (2 * block.sum(axis=(0, 1)) + area) // (2 * area)
        payload = pooled.tobytes()
        return payload, self._upsample(pooled, h, w)

    def decode(self, payload, shape):
        h, w, c = shape
        s = self.factor
        hd, wd = -(-h // s), -(-w // s)
        if len(payload) != hd * wd * c:
            raise BackendError(
                f"qdown payload is {len(payload)} bytes, expected {hd * wd * c}"
            )
        pooled = np.frombuffer(payload, dtype=np.uint8).reshape(hd, wd, c)
        return self._upsample(pooled, h, w)

    def _upsample(self, pooled: np.ndarray, h: int, w: int) -> np.ndarray:
        s = self.factor
        hd, wd, c = pooled.shape
        p = pooled.astype(np.int64)

        def axis_weights(n_out, n_src):
            # source coordinate of output i is (2i + 1 - s) / (2s)
            num = 2 * np.arange(n_out, dtype=np.int64) + 1 - s
            i0 = num // (2 * s)
            frac = num - i0 * (2 * s)  # in units of 1/(2s)
            i1 = np.clip(i0 + 1, 0, n_src - 1)
            i0 = np.clip(i0, 0, n_src - 1)
            return i0, i1, frac

        y0, y1, fy = axis_weights(h, hd)
        x0, x1, fx = axis_weights(w, wd)
        wy1 = fy[:, None, None]
        wy0 = 2 * s - wy1
        wx1 = fx[None, :, None]
        wx0 = 2 * s - wx1
        acc = (wy0 * (wx0 * p[y0][:, x0] + wx1 * p[y0][:, x1])
               + wy1 * (wx0 * p[y1][:, x0] + wx1 * p[y1][:, x1]))
        four_s2 = 4 * s * s
        out = (2 * acc + four_s2) // (2 * four_s2)
        return np.clip(out, 0, 255).astype(np.uint8)


class ExternalBackend:
    """Wrap an external lossy codec via encode/decode command templates.

    Templates contain {in} and {out} placeholders.  The reconstruction is
    always obtained by running the *decode* command on the payload, at
    encode time as well, which guarantees encoder and decoder agree.
    """

    def __init__(self, name: str, encode_cmd: str, decode_cmd: str):
        self.name = name
        self.encode_cmd = encode_cmd
        self.decode_cmd = decode_cmd
        self.id = f"external:{name}"

    def _run(self, template: str, inpath: str, outpath: str):
        argv = [t.format(**{"in": inpath, "out": outpath}) for t in shlex.split(template)]
        try:
            proc = subprocess.run(argv, capture_output=True)
        except FileNotFoundError as e:
            raise BackendError(f"external codec binary not found: {argv[0]}") from e
        if proc.returncode != 0:
            raise BackendError(
                f"external codec failed ({' '.join(argv)}): "
                f"exit {proc.returncode}, stderr={proc.stderr[:500]!r}"
            )

    def encode(self, image):
        img = check_image(image)
        with tempfile.TemporaryDirectory(prefix="rescodec-ext-") as td:
            src = os.path.join(td, "input.ppm" if img.shape[2] == 3 else "input.pgm")
            dst = os.path.join(td, "encoded.bin")
            with open(src, "wb") as fh:
                fh.write(image_to_bytes(img))
            self._run(self.encode_cmd, src, dst)
            try:
                with open(dst, "rb") as fh:
                    payload = fh.read()
            except FileNotFoundError:
                raise BackendError("external encoder produced no output file") from None
        recon = self.decode(payload, img.shape)
        if recon.shape != img.shape:
            raise BackendError(
                f"external reconstruction shape {recon.shape} != input {img.shape}"
            )
        return payload, recon

    def decode(self, payload, shape):
        with tempfile.TemporaryDirectory(prefix="rescodec-ext-") as td:
            src = os.path.join(td, "payload.bin")
            dst = os.path.join(td, "decoded.ppm")
            with open(src, "wb") as fh:
                fh.write(payload)
            self._run(self.decode_cmd, src, dst)
            try:
                with open(dst, "rb") as fh:
                    recon = image_from_bytes(fh.read())
            except FileNotFoundError:
                raise BackendError("external decoder produced no output file") from None
        if recon.shape != tuple(shape):
            raise BackendError(f"external reconstruction is {recon.shape}, expected {tuple(shape)}")
        return recon


def resolve_backend(spec: str, external_templates: dict[str, tuple[str, str]] | None = None):
    """Map a backend spec or container backend id to a backend instance."""
    spec = spec.strip()
    if spec.startswith("builtin:"):
        spec = spec[len("builtin:"):]
    if spec == "identity":
        return IdentityBackend()
    if spec.startswith("qdown:"):
        try:
            return QdownBackend(int(spec.split(":", 1)[1]))
        except ValueError:
            raise BackendError(f"bad qdown factor in {spec!r}") from None
    if spec.startswith("external:"):
        name = spec.split(":", 1)[1]
        if not external_templates or name not in external_templates:
            raise BackendError(f"no command templates configured for external codec {name!r}")
        enc, dec = external_templates[name]
        return ExternalBackend(name, enc, dec)
    raise BackendError(f"unknown backend {spec!r}")


# ---------------------------------------------------------------------------
# table sources (the seam between the model and the coder)


class ModelTableSource:
    """Per-patch autoregressive tables from an entropy-model checkpoint."""

    def __init__(self, model: EntropyModel, recon: np.ndarray):
        self.model = model
        self.global_tokens = model.embed_global(recon)

    def start_patch(self, recon_patch: np.ndarray) -> "_ModelPatchTables":
        return _ModelPatchTables(self.model.start_session(self.global_tokens, recon_patch))


class _ModelPatchTables:
    def __init__(self, session):
        self.session = session

    def next_table(self):
        return coding_table(self.session.next_params())

    def advance(self, symbol: int):
        self.session.advance(symbol)


class UniformTableSource:
    """Context-free uniform tables; the no-model ablation baseline."""

    def __init__(self):
        self.table = uniform_table(NUM_SYMBOLS)

    def start_patch(self, recon_patch):
        return self

    def next_table(self):
        return self.table

    def advance(self, symbol: int):
        pass


# ---------------------------------------------------------------------------
# encode / decode


def _patch_view(arr: np.ndarray, region: PatchRegion) -> np.ndarray:
    return arr[region.y0 : region.y0 + region.h, region.x0 : region.x0 + region.w]


def _flat_residuals(res_patch: np.ndarray) -> np.ndarray:
    # (h,w,C) -> channel-major raster order
    return res_patch.transpose(2, 0, 1).reshape(-1)


def _encode_patch(source, recon_patch_hwc: np.ndarray, res_patch_hwc: np.ndarray) -> bytes:
    tables = source.start_patch(recon_patch_hwc.transpose(2, 0, 1))
    coder = RangeEncoder()
    for sym in residual_symbols(_flat_residuals(res_patch_hwc)):
        coder.encode_symbol(tables.next_table(), int(sym))
        tables.advance(int(sym))
    return coder.finish().data


def _decode_patch(source, recon_patch_hwc: np.ndarray, stream: bytes, n_res: int) -> np.ndarray:
    tables = source.start_patch(recon_patch_hwc.transpose(2, 0, 1))
    coder = RangeDecoder(stream)
    out = np.empty(n_res, dtype=np.int16)
    for j in range(n_res):
        sym = coder.decode_symbol(tables.next_table())
        out[j] = sym + RESIDUAL_LO
        tables.advance(sym)
    return out


def _map_patches(fn, regions, workers: int):
    if workers <= 1:
        return [fn(reg) for reg in regions]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, regions))


def default_workers() -> int:
    env = os.environ.get("RESC_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


_ZERO_HASH = b"\x00" * 8


def encode(image: np.ndarray, backend, model: EntropyModel | None, *,
           workers: int | None = None, checksum: bool = False,
           table_source: object | None = None,
           patch_size: int | None = None) -> bytes:
    """Compress to container bytes. `model=None` requires a `table_source`."""
    img = check_image(image)
    h, w, c = img.shape
    workers = default_workers() if workers is None else max(1, workers)

    if model is not None:
        if model.config.channels != c:
            raise CodecError(
                f"model codes {model.config.channels}-channel images, input has {c}"
            )
        if model.checkpoint_hash is None:
            raise CodecError("encoding requires a model loaded from a checkpoint")
        p = model.config.patch_size
        k = model.config.mixtures
        ckpt_hash = model.checkpoint_hash
    else:
        if table_source is None:
            raise CodecError("either a model or a table_source is required")
        p = patch_size or 16
        k = 0
        ckpt_hash = _ZERO_HASH

    payload, recon = backend.encode(img)
    recon = check_image(recon)
    if recon.shape != img.shape:
        raise BackendError(f"reconstruction {recon.shape} != input {img.shape}")
    residual = compute_residual(img, recon)
    source = table_source if table_source is not None else ModelTableSource(model, recon)

    regions = patch_grid(h, w, p)

    def encode_region(reg: PatchRegion) -> bytes:
        return _encode_patch(source, _patch_view(recon, reg), _patch_view(residual, reg))

    streams = _map_patches(encode_region, regions, workers)
    c_obj = cont.Container(
        height=h, width=w, channels=c, patch_size=p, mixtures=k,
        checkpoint_hash=ckpt_hash, backend_id=backend.id, payload=payload,
        streams=streams,
        image_checksum=cont.image_checksum(img) if checksum else None,
    )
    return cont.serialize(c_obj)


def decode(data: bytes, model: EntropyModel | None, *,
           backends: dict[str, tuple[str, str]] | None = None,
           workers: int | None = None,
           table_source: object | None = None) -> np.ndarray:
    """Exact inverse of encode given the same checkpoint."""
    c_obj = cont.parse(data)
    workers = default_workers() if workers is None else max(1, workers)

    if table_source is None:
        if model is None:
            raise CodecError("either a model or a table_source is required")
        if model.checkpoint_hash != c_obj.checkpoint_hash:
            got = model.checkpoint_hash.hex() if model.checkpoint_hash else "none"
            raise HashMismatchError(
                f"container was encoded with checkpoint {c_obj.checkpoint_hash.hex()}, "
                f"loaded model is {got}"
            )
        if model.config.patch_size != c_obj.patch_size:
            raise CodecError(
                f"model patch size {model.config.patch_size} != container {c_obj.patch_size}"
            )

    backend = resolve_backend(c_obj.backend_id, backends)
    shape = (c_obj.height, c_obj.width, c_obj.channels)
    recon = check_image(backend.decode(c_obj.payload, shape))
    if recon.shape != shape:
        raise BackendError(f"reconstruction {recon.shape} != container dims {shape}")

    source = table_source if table_source is not None else ModelTableSource(model, recon)
    regions = patch_grid(c_obj.height, c_obj.width, c_obj.patch_size)
    residual = np.zeros(shape, dtype=np.int16)

    def decode_region(idx_reg) -> np.ndarray:
        idx, reg = idx_reg
        n_res = reg.h * reg.w * c_obj.channels
        return _decode_patch(source, _patch_view(recon, reg), c_obj.streams[idx], n_res)

    flats = _map_patches(decode_region, list(enumerate(regions)), workers)
    for reg, flat in zip(regions, flats):
        block = flat.reshape(c_obj.channels, reg.h, reg.w).transpose(1, 2, 0)
        residual[reg.y0 : reg.y0 + reg.h, reg.x0 : reg.x0 + reg.w] = block

    out = apply_residual(recon, residual)
    if c_obj.image_checksum is not None:
        if cont.image_checksum(out) != c_obj.image_checksum:
            raise ChecksumError("decoded image fails the container checksum")
    return out


def bpsp(data: bytes) -> cont.BpspReport:
    return cont.bpsp_report(data)
