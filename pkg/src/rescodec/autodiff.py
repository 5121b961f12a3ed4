"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Eager, tape-per-tensor design: every op computes its result immediately and,
when a gradient is required, records a closure that scatters the upstream
gradient to its parents.  There is no graph compiler; `backward` is a plain
reverse-topological sweep.  Training runs entirely in float64 so analytic
gradients can be validated against central finite differences.
"""

from __future__ import annotations

import numpy as np

from .errors import GradError, OptimizerError, ShapeError
from .special import erf as _erf_np
from .special import erf_grad as _erf_grad_np


def rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; the only RNG used anywhere."""
    return np.random.Generator(np.random.Philox(np.uint64(seed)))


def trunc_normal(generator: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) redrawn until within 2 std; deterministic per generator state."""
    out = generator.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = generator.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            raise TypeError("cannot wrap a Tensor in a Tensor")
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    def item(self) -> float:
        return float(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data, parents, backward_fn) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward_fn)
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Reverse sweep from a scalar loss; fills .grad on requires_grad leaves."""
    if not isinstance(loss, Tensor):
        raise GradError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GradError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    # iterative topological order (graphs outgrow the recursion limit)
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    if a.data.ndim < 1 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree, {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), bwd)


def embedding(table, indices) -> Tensor:
    """Row gather: out[...] = table[indices[...]]."""
    table = _t(table)
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding: index out of range [0, {table.data.shape[0]}), "
            f"got min={idx.min()} max={idx.max()}"
        )
    out_data = table.data[idx]

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            _accum(table, gt)

    return _make(out_data, (table,), bwd)


def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution, x:(N,Cin,H,W), w:(Cout,Cin,kh,kw), b:(Cout,)."""
    x, w = _t(x), _t(w)
    if b is not None:
        b = _t(b)
    n, cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: channel mismatch, input {cin} vs kernel {cin_w}")
    xp = _pad_hw(x.data, padding, padding)
    hp, wp = xp.shape[2], xp.shape[3]
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {hp}x{wp}")

    # im2col: (N, OH*OW, Cin*kh*kw)
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, cin, oh, ow, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, cin * kh * kw)
    wflat = w.data.reshape(cout, cin * kh * kw)
    out = col @ wflat.T
    if b is not None:
        out = out + b.data
    out_data = out.transpose(0, 2, 1).reshape(n, cout, oh, ow)

    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gflat = g.reshape(n, cout, oh * ow).transpose(0, 2, 1)  # (N, OH*OW, Cout)
        if b is not None and b.requires_grad:
            _accum(b, gflat.sum(axis=(0, 1)))
        if w.requires_grad:
            gw = np.einsum("npo,npk->ok", gflat, col)
            _accum(w, gw.reshape(w.data.shape))
        if x.requires_grad:
            gcol = gflat @ wflat  # (N, OH*OW, Cin*kh*kw)
            gcol = gcol.reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros((n, cin, hp, wp))
            for ki in range(kh):
                for kj in range(kw):
                    gxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += gcol[
                        :, :, :, :, ki, kj
                    ]
            if padding:
                gxp = gxp[:, :, padding : hp - padding, padding : wp - padding]
            _accum(x, gxp)

    return _make(out_data, parents, bwd)


def adaptive_avg_pool2d(x, out_hw) -> Tensor:
    """Mean pooling onto an (oh, ow) grid with floor/ceil bin edges."""
    x = _t(x)
    n, c, h, w = x.data.shape
    oh, ow = out_hw
    rbins = [(h * i // oh, -(-h * (i + 1) // oh)) for i in range(oh)]
    cbins = [(w * j // ow, -(-w * (j + 1) // ow)) for j in range(ow)]
    out_data = np.empty((n, c, oh, ow))
    for i, (r0, r1) in enumerate(rbins):
        for j, (c0, c1) in enumerate(cbins):
            out_data[:, :, i, j] = x.data[:, :, r0:r1, c0:c1].mean(axis=(2, 3))

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for i, (r0, r1) in enumerate(rbins):
                for j, (c0, c1) in enumerate(cbins):
                    area = (r1 - r0) * (c1 - c0)
                    gx[:, :, r0:r1, c0:c1] += g[:, :, i : i + 1, j : j + 1] / area
            _accum(x, gx)

    return _make(out_data, (x,), bwd)


def softmax(x, axis: int = -1) -> Tensor:
    """Stable softmax; -inf entries yield exactly-zero probabilities."""
    x = _t(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ex = np.exp(shifted)
    out_data = ex / ex.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            _accum(x, out_data * (g - dot))

    return _make(out_data, (x,), bwd)


def layernorm(x, gamma, beta, eps: float = 1e-10) -> Tensor:
    """Normalize over the last axis, then affine."""
    x, gamma, beta = _t(x), _t(gamma), _t(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out_data = y * gamma.data + beta.data

    def bwd(g):
        if beta.requires_grad:
            _accum(beta, _unbroadcast(g, beta.data.shape))
        if gamma.requires_grad:
            _accum(gamma, _unbroadcast(g * y, gamma.data.shape))
        if x.requires_grad:
            gy = g * gamma.data
            d = x.data.shape[-1]
            gx = inv * (gy - gy.mean(axis=-1, keepdims=True) - y * (gy * y).sum(axis=-1, keepdims=True) / d)
            _accum(x, gx)

    return _make(out_data, (x, gamma, beta), bwd)


_INV_SQRT2 = float(np.sqrt(0.5))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _t(x)
    cdf = 0.5 * (1.0 + _erf_np(x.data * _INV_SQRT2))
    out_data = x.data * cdf

    def bwd(g):
        if x.requires_grad:
            pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
            _accum(x, g * (cdf + x.data * pdf))

    return _make(out_data, (x,), bwd)


def erf(x) -> Tensor:
    x = _t(x)
    out_data = _erf_np(x.data)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * _erf_grad_np(x.data))

    return _make(out_data, (x,), bwd)


def texp(x) -> Tensor:
    x = _t(x)
    out_data = np.exp(x.data)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * out_data)

    return _make(out_data, (x,), bwd)


def tlog(x) -> Tensor:
    x = _t(x)
    out_data = np.log(x.data)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g / x.data)

    return _make(out_data, (x,), bwd)


def softplus(x) -> Tensor:
    """log(1 + exp(x)), stable for large |x|."""
    x = _t(x)
    out_data = np.maximum(x.data, 0.0) + np.log1p(np.exp(-np.abs(x.data)))

    def bwd(g):
        if x.requires_grad:
            sig = np.where(
                x.data >= 0,
                1.0 / (1.0 + np.exp(-np.clip(x.data, 0, None))),
                np.exp(np.clip(x.data, None, 0)) / (1.0 + np.exp(np.clip(x.data, None, 0))),
            )
            _accum(x, g * sig)

    return _make(out_data, (x,), bwd)


def clamp_min(x, floor: float) -> Tensor:
    """max(x, floor); gradient flows only where x > floor."""
    x = _t(x)
    out_data = np.maximum(x.data, floor)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * (x.data > floor))

    return _make(out_data, (x,), bwd)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _t(x)
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if x.requires_grad:
            gg = np.asarray(g)
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _accum(x, np.broadcast_to(gg, x.data.shape).copy())

    return _make(out_data, (x,), bwd)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _t(x)
    count = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x, shape) -> Tensor:
    x = _t(x)
    out_data = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.data.shape))

    return _make(out_data, (x,), bwd)


def transpose(x, axes) -> Tensor:
    x = _t(x)
    out_data = x.data.transpose(axes)
    inv = np.argsort(axes)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g.transpose(inv))

    return _make(out_data, (x,), bwd)


def tslice(x, key) -> Tensor:
    x = _t(x)
    out_data = x.data[key]

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[key] += g
            _accum(x, gx)

    return _make(out_data, (x,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_t(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, o0, o1 in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(int(o0), int(o1))
                _accum(t, g[tuple(idx)])

    return _make(out_data, tuple(tensors), bwd)


def masked_fill(x, mask: np.ndarray, value: float) -> Tensor:
    """out = where(mask, value, x); the constant region gets zero gradient."""
    x = _t(x)
    out_data = np.where(mask, value, x.data)

    def bwd(g):
        if x.requires_grad:
            _accum(x, np.where(mask, 0.0, g))

    return _make(out_data, (x,), bwd)


def sdpa_causal(q, k, v, attend_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention with a causal mask.

    q, k, v: (..., n, hd).  Row i attends to columns j <= i; `attend_mask`
    (n, n) boolean, True meaning *masked out*, overrides the default.
    """
    q, k, v = _t(q), _t(k), _t(v)
    n = q.data.shape[-2]
    if attend_mask is None:
        attend_mask = np.triu(np.ones((n, n), dtype=bool), k=1)
    scale = 1.0 / np.sqrt(q.data.shape[-1])
    scores = mul(matmul(q, transpose(k, _swap_last(k.data.ndim))), scale)
    scores = masked_fill(scores, attend_mask, -np.inf)
    probs = softmax(scores, axis=-1)
    return matmul(probs, v)


def _swap_last(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


# ---------------------------------------------------------------------------
# optimizer and gradient checking


class AdamW:
    """Adam with decoupled weight decay. Rejects non-finite gradients atomically."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr < 0:
            raise OptimizerError("learning rate must be >= 0")
        self.params = dict(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {
            k: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for k, p in self.params.items()
        }

    def step(self, grads: dict[str, np.ndarray] | None = None):
        if grads is None:
            grads = self.grads()
        names = sorted(self.params)
        for k in names:
            g = grads[k]
            if g.shape != self.params[k].data.shape:
                raise OptimizerError(f"gradient shape mismatch for '{k}'")
            if not np.isfinite(g).all():
                raise OptimizerError(f"non-finite gradient for '{k}'; step rejected")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k in names:
            p, g = self.params[k], grads[k]
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def global_norm_clip(grads: dict[str, np.ndarray], max_norm: float) -> dict[str, np.ndarray]:
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total <= max_norm or total == 0.0:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def finite_difference_check(f, params: dict[str, Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic gradients of f() and central differences.

    f rebuilds the scalar loss from `params` on every call; relative error is
    |analytic - cd| / max(|analytic|, |cd|, 1e-8).
    """
    if not (0.0 < step <= 1e-2):
        raise GradError(f"finite-difference step must be in (0, 1e-2], got {step}")
    for p in params.values():
        p.grad = None
    loss = f()
    if loss.data.size != 1:
        raise GradError("finite_difference_check requires a scalar loss")
    backward(loss)
    analytic = {
        k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f().data)
            flat[i] = orig - step
            fm = float(f().data)
            flat[i] = orig
            cd = (fp - fm) / (2.0 * step)
            err = abs(aflat[i] - cd) / max(abs(aflat[i]), abs(cd), 1e-8)
            if err > worst:
                worst = err
    return worst
