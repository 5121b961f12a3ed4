"""Causal-transformer entropy model conditioned on the lossy reconstruction.

The coded sequence for one patch is
    [k_g global tokens][h*w local tokens][start][residual tokens...]
under a plain causal mask.  Global tokens come from a small conv stack over
the whole lossy image, local tokens from per-channel pixel-value embeddings
of the co-located lossy patch, and every residual subpixel (channel-major
raster order) is one token.  The feature at the start token predicts the
first residual; each residual token's feature predicts the next one.  The
head projects a feature to 3*K values per image channel: K mixture-weight
logits, K means, K std pre-activations.

Two evaluation paths share the same parameters and formulas: an autodiff
(float64) teacher-forced pass used for training, and an incremental
KV-cached numpy path used for coding.  Both end in `canonical_round`, which
is the contract that makes encoder and decoder derive identical tables.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, CodecError, ShapeError
from .gmm import SIGMA_MIN, GmmParams, canonical_round
from .special import erf as _erf_np

CHECKPOINT_MAGIC = b"RCKPT"
CHECKPOINT_VERSION = 1

PIXEL_VOCAB = 256
RESIDUAL_VOCAB = 511
START_TOKEN = RESIDUAL_VOCAB  # row 511 of the residual embedding table

_LN_EPS = 1e-10
_INV_SQRT2 = float(np.sqrt(0.5))


@dataclass(frozen=True)
class ModelConfig:
    d: int = 128
    layers: int = 4
    heads: int = 4
    mixtures: int = 5
    patch_size: int = 16
    global_tokens: int = 16
    channels: int = 3

    def __post_init__(self):
        if self.d < 1 or self.d % self.heads != 0:
            raise CodecError(f"width {self.d} not divisible by {self.heads} heads")
        if self.layers < 1 or self.mixtures < 1 or self.patch_size < 1:
            raise CodecError("layers, mixtures and patch_size must be >= 1")
        g = math.isqrt(self.global_tokens)
        if g * g != self.global_tokens:
            raise CodecError(f"global_tokens must be a perfect square, got {self.global_tokens}")
        if self.channels not in (1, 3):
            raise CodecError(f"channels must be 1 or 3, got {self.channels}")

    @property
    def head_width(self) -> int:
        return self.d // self.heads

    @property
    def pool_grid(self) -> int:
        return math.isqrt(self.global_tokens)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "layers": self.layers,
            "heads": self.heads,
            "mixtures": self.mixtures,
            "patch_size": self.patch_size,
            "global_tokens": self.global_tokens,
            "channels": self.channels,
        }


_CONV_WIDTHS = (16, 32, 64)


def parameter_manifest(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; checkpoints store exactly these tensors."""
    d, p, c = cfg.d, cfg.patch_size, cfg.channels
    chans = (c,) + _CONV_WIDTHS + (d,)
    out: list[tuple[str, tuple[int, ...]]] = []
    for i in range(4):
        out.append((f"global_conv{i}_w", (chans[i + 1], chans[i], 3, 3)))
        out.append((f"global_conv{i}_b", (chans[i + 1],)))
    out.append(("global_pos", (cfg.global_tokens, d)))
    out.append(("local_embed", (c, PIXEL_VOCAB, d)))
    out.append(("local_pos", (p * p, d)))
    out.append(("res_embed", (RESIDUAL_VOCAB + 1, d)))
    out.append(("res_pos", (c * p * p, d)))
    for i in range(cfg.layers):
        out.append((f"layer{i}_ln1_g", (d,)))
        out.append((f"layer{i}_ln1_b", (d,)))
        out.append((f"layer{i}_qkv_w", (d, 3 * d)))
        out.append((f"layer{i}_qkv_b", (3 * d,)))
        out.append((f"layer{i}_proj_w", (d, d)))
        out.append((f"layer{i}_proj_b", (d,)))
        out.append((f"layer{i}_ln2_g", (d,)))
        out.append((f"layer{i}_ln2_b", (d,)))
        out.append((f"layer{i}_mlp1_w", (d, 4 * d)))
        out.append((f"layer{i}_mlp1_b", (4 * d,)))
        out.append((f"layer{i}_mlp2_w", (4 * d, d)))
        out.append((f"layer{i}_mlp2_b", (d,)))
    out.append(("final_ln_g", (d,)))
    out.append(("final_ln_b", (d,)))
    out.append(("head_w", (d, 3 * cfg.mixtures * c)))
    out.append(("head_b", (3 * cfg.mixtures * c,)))
    return out


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Truncated-normal(0.02) weights, zero biases, unit layernorm gains."""
    g = ad.rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_manifest(cfg):
        if name.endswith("_b") or name.endswith("_ln1_b") or name.endswith("_ln2_b"):
            params[name] = np.zeros(shape)
        elif name.endswith("ln1_g") or name.endswith("ln2_g") or name == "final_ln_g":
            params[name] = np.ones(shape)
        elif name == "final_ln_b":
            params[name] = np.zeros(shape)
        else:
            params[name] = ad.trunc_normal(g, shape)
    return params


@dataclass(frozen=True)
class SequenceLayout:
    """Token bookkeeping for one (possibly boundary-clipped) patch."""

    n_global: int
    n_local: int
    n_residual: int
    local_grid: np.ndarray    # (n_local,) index into the p*p positional table
    res_grid: np.ndarray      # (n_residual,) index into the C*p*p positional table
    res_channel: np.ndarray   # (n_residual,) image channel of each coded subpixel

    @property
    def prompt_len(self) -> int:
        return self.n_global + self.n_local + 1  # + start token


def sequence_layout(cfg: ModelConfig, h: int, w: int) -> SequenceLayout:
    if not (1 <= h <= cfg.patch_size and 1 <= w <= cfg.patch_size):
        raise ShapeError(f"patch {h}x{w} exceeds configured size {cfg.patch_size}")
    p, c = cfg.patch_size, cfg.channels
    rows, cols = np.divmod(np.arange(h * w), w)
    local_grid = rows * p + cols
    res_grid = np.concatenate([ch * p * p + local_grid for ch in range(c)])
    res_channel = np.repeat(np.arange(c), h * w)
    return SequenceLayout(cfg.global_tokens, h * w, c * h * w, local_grid, res_grid, res_channel)


# ---------------------------------------------------------------------------
# checkpoint serialization


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]  # float32, manifest shapes
    seed: int = 0
    step_count: int = 0
    content_hash: bytes = b""

    def __post_init__(self):
        manifest = parameter_manifest(self.config)
        names = {n for n, _ in manifest}
        if set(self.params) != names:
            missing = names - set(self.params)
            extra = set(self.params) - names
            raise CheckpointError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, shape in manifest:
            got = self.params[name].shape
            if tuple(got) != shape:
                raise CheckpointError(f"parameter '{name}' has shape {got}, expected {shape}")


def checkpoint_bytes(ckpt: ModelCheckpoint) -> bytes:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<I", CHECKPOINT_VERSION)
    meta = dict(ckpt.config.to_dict(), seed=ckpt.seed, step_count=ckpt.step_count)
    blob = json.dumps(meta, sort_keys=True).encode()
    out += struct.pack("<I", len(blob))
    out += blob
    manifest = parameter_manifest(ckpt.config)
    out += struct.pack("<I", len(manifest))
    for name, shape in manifest:
        data = np.ascontiguousarray(ckpt.params[name], dtype="<f4")
        nb = name.encode()
        out += struct.pack("<H", len(nb))
        out += nb
        out += struct.pack("<B", len(shape))
        for dim in shape:
            out += struct.pack("<I", dim)
        raw = data.tobytes()
        out += struct.pack("<I", len(raw))
        out += raw
    out += hashlib.sha256(bytes(out)).digest()[:8]
    return bytes(out)


def content_hash(data: bytes) -> bytes:
    """8-byte identity of a serialized checkpoint, stored in containers."""
    return hashlib.sha256(data).digest()[:8]


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        b = self.data[self.pos : self.pos + n]
        self.pos += n
        return b

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def checkpoint_from_bytes(data: bytes) -> ModelCheckpoint:
    if len(data) < len(CHECKPOINT_MAGIC) + 12:
        raise CheckpointError("truncated checkpoint")
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if hashlib.sha256(data[:-8]).digest()[:8] != data[-8:]:
        raise CheckpointError("checkpoint checksum mismatch")
    r = _Reader(data[:-8])
    r.take(len(CHECKPOINT_MAGIC))
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(r.take(r.u32()).decode())
    seed = int(meta.pop("seed", 0))
    step_count = int(meta.pop("step_count", 0))
    cfg = ModelConfig(**meta)
    manifest = parameter_manifest(cfg)
    count = r.u32()
    if count != len(manifest):
        raise CheckpointError(f"checkpoint lists {count} parameters, expected {len(manifest)}")
    params: dict[str, np.ndarray] = {}
    for exp_name, exp_shape in manifest:
        name = r.take(r.u16()).decode()
        if name != exp_name:
            raise CheckpointError(f"unexpected parameter '{name}', expected '{exp_name}'")
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        if shape != exp_shape:
            raise CheckpointError(f"parameter '{name}' has shape {shape}, expected {exp_shape}")
        nbytes = r.u32()
        expected = int(np.prod(shape, dtype=np.int64)) * 4
        if nbytes != expected:
            raise CheckpointError(f"parameter '{name}' payload is {nbytes} bytes, expected {expected}")
        params[name] = np.frombuffer(r.take(nbytes), dtype="<f4").reshape(shape).copy()
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after final parameter")
    return ModelCheckpoint(cfg, params, seed, step_count, content_hash(data))


def save_checkpoint(ckpt: ModelCheckpoint, path) -> bytes:
    """Write atomically; returns the 8-byte content hash."""
    from .pipeline import write_atomic  # local import: pipeline owns file plumbing

    data = checkpoint_bytes(ckpt)
    write_atomic(path, data)
    return content_hash(data)


def load_checkpoint(path) -> ModelCheckpoint:
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())


# ---------------------------------------------------------------------------
# shared numeric helpers (inference path)


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=axis, keepdims=True)


def _layernorm_np(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return (xc / np.sqrt(var + _LN_EPS)) * g + b


def _gelu_np(x):
    out = x * (0.5 * (1.0 + _erf_np(x * _INV_SQRT2)))
    return out.astype(x.dtype, copy=False)


def _softplus_np(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _pad_to_min(img: np.ndarray, min_side: int = 32) -> np.ndarray:
    """Edge-replicate pad (C,H,W) so both spatial dims are >= min_side."""
    c, h, w = img.shape
    ph, pw = max(0, min_side - h), max(0, min_side - w)
    if ph or pw:
        img = np.pad(img, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return img


def _prep_image(image: np.ndarray, channels: int) -> np.ndarray:
    """uint8 (H,W,C) -> (1,C,H',W') in [0,1] with H',W' >= 32.

    Plain x/255 scaling (no centering): an all-zero image must propagate
    exact zeros through the zero-initialized conv biases.
    """
    if image.ndim != 3 or image.shape[2] != channels:
        raise ShapeError(f"expected (H,W,{channels}) image, got {image.shape}")
    chw = image.transpose(2, 0, 1).astype(np.float64)
    chw = _pad_to_min(chw)
    return (chw / 255.0)[None]


class EntropyModel:
    """Parameter container plus the two evaluation paths."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray],
                 dtype=np.float32, checkpoint_hash: bytes | None = None):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params = {k: np.ascontiguousarray(v, dtype=self.dtype) for k, v in params.items()}
        self.checkpoint_hash = checkpoint_hash
        self._tensors: dict[str, ad.Tensor] | None = None
        for name, shape in parameter_manifest(config):
            if name not in self.params:
                raise CheckpointError(f"missing parameter '{name}'")
            if self.params[name].shape != shape:
                raise CheckpointError(
                    f"parameter '{name}' has shape {self.params[name].shape}, expected {shape}"
                )

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int, dtype=np.float64) -> "EntropyModel":
        return cls(config, init_params(config, seed), dtype=dtype)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint, dtype=np.float32) -> "EntropyModel":
        return cls(ckpt.config, ckpt.params, dtype=dtype, checkpoint_hash=ckpt.content_hash)

    def to_checkpoint(self, seed: int = 0, step_count: int = 0) -> ModelCheckpoint:
        params32 = {k: v.astype(np.float32) for k, v in self.params.items()}
        ckpt = ModelCheckpoint(self.config, params32, seed, step_count)
        ckpt.content_hash = content_hash(checkpoint_bytes(ckpt))
        return ckpt

    def tensors(self) -> dict[str, ad.Tensor]:
        """Trainable views over the parameter arrays (float64 models only)."""
        if self.dtype != np.float64:
            raise CodecError("training requires a float64 model")
        if self._tensors is None:
            # np.asarray inside Tensor keeps the float64 arrays, so the
            # optimizer's in-place updates are visible to the coding path
            self._tensors = {
                k: ad.Tensor(v, requires_grad=True) for k, v in self.params.items()
            }
        return self._tensors

    # -- global / local embeddings (numpy inference path) --

    def embed_global(self, lossy_image: np.ndarray) -> np.ndarray:
        """(k_g, d) visual tokens for the whole lossy reconstruction."""
        x = _prep_image(lossy_image, self.config.channels).astype(self.dtype)
        for i in range(4):
            x = _conv2d_np(x, self.params[f"global_conv{i}_w"],
                           self.params[f"global_conv{i}_b"], stride=2, padding=1)
            if i < 3:
                x = _gelu_np(x)
        g = self.config.pool_grid
        pooled = _adaptive_pool_np(x, (g, g))  # (1, d, g, g)
        tokens = pooled[0].reshape(self.config.d, g * g).T
        return (tokens + self.params["global_pos"]).astype(self.dtype)

    def embed_local(self, lossy_patch: np.ndarray) -> np.ndarray:
        """(h*w, d) tokens for the co-located lossy patch, any h,w <= p."""
        patch = _as_patch(lossy_patch, self.config.channels)
        c, h, w = patch.shape
        layout = sequence_layout(self.config, h, w)
        vals = patch.reshape(c, h * w)
        tok = self.params["local_embed"][0][vals[0]]
        for ch in range(1, c):
            tok = tok + self.params["local_embed"][ch][vals[ch]]
        return (tok + self.params["local_pos"][layout.local_grid]).astype(self.dtype)

    # -- sequential (coding) path --

    def start_session(self, global_tokens: np.ndarray, lossy_patch: np.ndarray) -> "PatchSession":
        return PatchSession(self, global_tokens, lossy_patch)

    def predict_next(self, lossy_image: np.ndarray, lossy_patch: np.ndarray,
                     prefix) -> GmmParams:
        """Mixture for the next residual subpixel given decoded prefix values."""
        sess = self.start_session(self.embed_global(lossy_image), lossy_patch)
        for r in np.asarray(prefix, dtype=np.int64):
            sess.push(int(r) + 255)
        return sess.next_params()

    # -- teacher-forced (training) path --

    def forward_train(self, images, patches, residuals, image_idx=None):
        """Mixture parameters for every residual position, one parallel pass.

        images: list of (H,W,C) uint8 lossy reconstructions.
        patches: (B,C,h,w) uint8 lossy patches; residuals: (B,C,h,w) ints.
        image_idx: per-sample index into `images` (default: identity).
        Returns (weights, means, stds) Tensors of shape (B, n_res, K).
        """
        cfg = self.config
        T = self.tensors()
        patches = np.asarray(patches)
        residuals = np.asarray(residuals)
        if patches.ndim != 4 or patches.shape[1] != cfg.channels:
            raise ShapeError(f"patches must be (B,{cfg.channels},h,w), got {patches.shape}")
        if residuals.shape != patches.shape:
            raise ShapeError(
                f"residual batch {residuals.shape} does not match patches {patches.shape}"
            )
        b, c, h, w = patches.shape
        if image_idx is None:
            image_idx = np.arange(b)
        image_idx = np.asarray(image_idx)
        layout = sequence_layout(cfg, h, w)
        n_res = layout.n_residual

        g_tok = [self._embed_global_t(np.asarray(img)) for img in images]
        g_stack = ad.concat([ad.reshape(g_tok[i], (1, cfg.global_tokens, cfg.d))
                             for i in image_idx], axis=0)

        l_tok = self._embed_local_t(patches, layout)  # (B, h*w, d)

        from .gmm import residual_symbols

        syms = residual_symbols(residuals.reshape(b, c, h * w).reshape(b, n_res))
        start = ad.reshape(ad.embedding(T["res_embed"], np.full((b, 1), START_TOKEN)), (b, 1, cfg.d))
        pieces = [g_stack, l_tok, start]
        if n_res > 1:
            r_tok = ad.add(
                ad.embedding(T["res_embed"], syms[:, : n_res - 1]),
                ad.embedding(T["res_pos"], layout.res_grid[: n_res - 1]),
            )
            pieces.append(r_tok)
        x = ad.concat(pieces, axis=1)

        x = self._blocks_t(x)
        feats = x[:, layout.prompt_len - 1 : layout.prompt_len - 1 + n_res, :]
        feats = ad.layernorm(feats, T["final_ln_g"], T["final_ln_b"], eps=_LN_EPS)
        head = ad.add(ad.matmul(feats, T["head_w"]), T["head_b"])  # (B, n_res, 3KC)

        k = cfg.mixtures
        per_chan = []
        for ch in range(c):
            pos0, pos1 = ch * h * w, (ch + 1) * h * w
            per_chan.append(head[:, pos0:pos1, 3 * k * ch : 3 * k * (ch + 1)])
        block = ad.concat(per_chan, axis=1) if c > 1 else per_chan[0]

        weights = ad.softmax(block[:, :, :k], axis=-1)
        means = block[:, :, k : 2 * k]
        stds = ad.clamp_min(ad.softplus(block[:, :, 2 * k : 3 * k]), SIGMA_MIN)
        return weights, means, stds

    def training_loss(self, images, patches, residuals, image_idx=None) -> ad.Tensor:
        from .gmm import nll_loss, residual_symbols

        weights, means, stds = self.forward_train(images, patches, residuals, image_idx)
        b = np.asarray(patches).shape[0]
        res_flat = np.asarray(residuals).reshape(b, -1)
        return nll_loss(weights, means, stds, res_flat)

    # -- training-path internals --

    def _embed_global_t(self, lossy_image: np.ndarray) -> ad.Tensor:
        cfg = self.config
        T = self.tensors()
        x: ad.Tensor | np.ndarray = ad.Tensor(_prep_image(lossy_image, cfg.channels))
        for i in range(4):
            x = ad.conv2d(x, T[f"global_conv{i}_w"], T[f"global_conv{i}_b"],
                          stride=2, padding=1)
            if i < 3:
                x = ad.gelu(x)
        g = cfg.pool_grid
        pooled = ad.adaptive_avg_pool2d(x, (g, g))
        tokens = ad.transpose(ad.reshape(pooled, (cfg.d, g * g)), (1, 0))
        return ad.add(tokens, T["global_pos"])

    def _embed_local_t(self, patches: np.ndarray, layout: SequenceLayout) -> ad.Tensor:
        cfg = self.config
        T = self.tensors()
        b, c, h, w = patches.shape
        vals = patches.reshape(b, c, h * w).astype(np.int64)
        tok = None
        for ch in range(c):
            e = ad.embedding(T["local_embed"][ch], vals[:, ch])
            tok = e if tok is None else ad.add(tok, e)
        return ad.add(tok, ad.embedding(T["local_pos"], layout.local_grid))

    def _blocks_t(self, x: ad.Tensor) -> ad.Tensor:
        cfg = self.config
        T = self.tensors()
        b, n, d = x.data.shape
        hd = cfg.head_width
        for i in range(cfg.layers):
            h = ad.layernorm(x, T[f"layer{i}_ln1_g"], T[f"layer{i}_ln1_b"], eps=_LN_EPS)
            qkv = ad.add(ad.matmul(h, T[f"layer{i}_qkv_w"]), T[f"layer{i}_qkv_b"])
            q = _heads_t(qkv[:, :, :d], cfg.heads, hd)
            kk = _heads_t(qkv[:, :, d : 2 * d], cfg.heads, hd)
            v = _heads_t(qkv[:, :, 2 * d :], cfg.heads, hd)
            ctx = ad.sdpa_causal(q, kk, v)
            merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, n, d))
            att = ad.add(ad.matmul(merged, T[f"layer{i}_proj_w"]), T[f"layer{i}_proj_b"])
            x = ad.add(x, att)
            h2 = ad.layernorm(x, T[f"layer{i}_ln2_g"], T[f"layer{i}_ln2_b"], eps=_LN_EPS)
            mid = ad.gelu(ad.add(ad.matmul(h2, T[f"layer{i}_mlp1_w"]), T[f"layer{i}_mlp1_b"]))
            mlp = ad.add(ad.matmul(mid, T[f"layer{i}_mlp2_w"]), T[f"layer{i}_mlp2_b"])
            x = ad.add(x, mlp)
        return x


def _heads_t(x: ad.Tensor, heads: int, hd: int) -> ad.Tensor:
    b, n, _ = x.data.shape
    return ad.transpose(ad.reshape(x, (b, n, heads, hd)), (0, 2, 1, 3))


def _as_patch(patch: np.ndarray, channels: int) -> np.ndarray:
    """Accept (h,w,C) or (C,h,w) uint8 patches; return (C,h,w) int array."""
    p = np.asarray(patch)
    if p.ndim != 3:
        raise ShapeError(f"patch must have 3 dims, got {p.shape}")
    if p.shape[0] == channels and p.shape[2] != channels:
        chw = p
    elif p.shape[2] == channels:
        chw = p.transpose(2, 0, 1)
    elif p.shape[0] == channels:
        chw = p
    else:
        raise ShapeError(f"patch shape {p.shape} has no {channels}-channel axis")
    return chw.astype(np.int64)


def _conv2d_np(x, w, b, stride: int, padding: int):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(n, cin, oh, ow, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw), writeable=False)
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, cin * kh * kw)
    out = col @ w.reshape(cout, -1).T + b
    return out.transpose(0, 2, 1).reshape(n, cout, oh, ow)


def _adaptive_pool_np(x, out_hw):
    n, c, h, w = x.shape
    oh, ow = out_hw
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    for i in range(oh):
        r0, r1 = h * i // oh, -(-h * (i + 1) // oh)
        for j in range(ow):
            c0, c1 = w * j // ow, -(-w * (j + 1) // ow)
            out[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    return out


class PatchSession:
    """Incremental KV-cached evaluation for coding one patch.

    The encoder and decoder drive a session through the identical call
    sequence (prefill, then alternate next_params/push), so both sides
    compute bit-identical mixture parameters.
    """

    def __init__(self, model: EntropyModel, global_tokens: np.ndarray, lossy_patch: np.ndarray):
        self.model = model
        cfg = model.config
        patch = _as_patch(lossy_patch, cfg.channels)
        _, h, w = patch.shape
        self.layout = sequence_layout(cfg, h, w)
        if global_tokens.shape != (cfg.global_tokens, cfg.d):
            raise ShapeError(f"global tokens have shape {global_tokens.shape}")
        max_len = self.layout.prompt_len + max(self.layout.n_residual - 1, 0)
        self._k = np.empty((cfg.layers, cfg.heads, max_len, cfg.head_width), dtype=model.dtype)
        self._v = np.empty_like(self._k)
        self._pos = 0
        self._next = 0

        local = model.embed_local(patch)
        start = model.params["res_embed"][START_TOKEN][None]
        prompt = np.concatenate(
            [global_tokens.astype(model.dtype), local, start.astype(model.dtype)], axis=0
        )
        hidden = self._forward(prompt)
        self._last = hidden[-1]

    def next_params(self) -> GmmParams:
        """Canonical mixture for residual position `self._next`; pure read."""
        if self._next >= self.layout.n_residual:
            raise CodecError("all residual positions already coded")
        cfg = self.model.config
        p = self.model.params
        feat = _layernorm_np(self._last, p["final_ln_g"], p["final_ln_b"])
        out = feat @ p["head_w"] + p["head_b"]
        k = cfg.mixtures
        ch = int(self.layout.res_channel[self._next])
        block = out[3 * k * ch : 3 * k * (ch + 1)]
        weights = _softmax_np(block[:k].astype(np.float64))
        means = block[k : 2 * k].astype(np.float64)
        stds = np.maximum(_softplus_np(block[2 * k : 3 * k].astype(np.float64)), SIGMA_MIN)
        return canonical_round(GmmParams(weights, means, stds))

    def push(self, symbol: int):
        """Feed the coded symbol (residual + 255) for the current position."""
        if not 0 <= symbol < RESIDUAL_VOCAB:
            raise CodecError(f"residual symbol {symbol} out of range [0, {RESIDUAL_VOCAB})")
        j = self._next
        if j >= self.layout.n_residual - 1:
            raise CodecError("prefix overlength: no further residual tokens expected")
        p = self.model.params
        token = p["res_embed"][symbol] + p["res_pos"][self.layout.res_grid[j]]
        hidden = self._forward(token[None].astype(self.model.dtype))
        self._last = hidden[-1]
        self._next = j + 1

    def advance(self, symbol: int):
        """push() except that the final position is a silent no-op."""
        if self._next == self.layout.n_residual - 1:
            self._next += 1
            return
        self.push(symbol)

    def _forward(self, tokens: np.ndarray) -> np.ndarray:
        cfg = self.model.config
        p = self.model.params
        t = tokens.shape[0]
        pos0 = self._pos
        if t > 1 and pos0 != 0:
            raise CodecError("multi-token blocks are only valid at prefill")
        x = tokens
        scale = 1.0 / np.sqrt(cfg.head_width)
        for i in range(cfg.layers):
            h = _layernorm_np(x, p[f"layer{i}_ln1_g"], p[f"layer{i}_ln1_b"])
            qkv = h @ p[f"layer{i}_qkv_w"] + p[f"layer{i}_qkv_b"]
            d = cfg.d
            q = qkv[:, :d].reshape(t, cfg.heads, -1).transpose(1, 0, 2)
            kk = qkv[:, d : 2 * d].reshape(t, cfg.heads, -1).transpose(1, 0, 2)
            v = qkv[:, 2 * d :].reshape(t, cfg.heads, -1).transpose(1, 0, 2)
            self._k[i][:, pos0 : pos0 + t] = kk
            self._v[i][:, pos0 : pos0 + t] = v
            total = pos0 + t
            scores = (q @ self._k[i][:, :total].transpose(0, 2, 1)) * scale
            if t > 1:
                scores[:, np.triu(np.ones((t, t), dtype=bool), k=1)] = -np.inf
            probs = _softmax_np(scores)
            ctx = probs @ self._v[i][:, :total]
            att = ctx.transpose(1, 0, 2).reshape(t, cfg.d) @ p[f"layer{i}_proj_w"] + p[f"layer{i}_proj_b"]
            x = x + att
            h2 = _layernorm_np(x, p[f"layer{i}_ln2_g"], p[f"layer{i}_ln2_b"])
            mid = _gelu_np(h2 @ p[f"layer{i}_mlp1_w"] + p[f"layer{i}_mlp1_b"])
            x = x + (mid @ p[f"layer{i}_mlp2_w"] + p[f"layer{i}_mlp2_b"])
        self._pos += t
        return x
