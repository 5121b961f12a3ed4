"""Independent straight-line reimplementations used as test oracles.

Everything here is written against the checkpoint's raw parameter arrays
with plain loops and scipy special functions, sharing no code with the
package, so agreement is evidence rather than tautology.
"""

import numpy as np
from scipy.special import erf as scipy_erf


def _ln(x, g, b, eps=1e-10):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _gelu(x):
    return x * 0.5 * (1.0 + scipy_erf(x / np.sqrt(2.0)))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _conv_stride2_pad1(x, w, b):
    # x: (cin, h, w); w: (cout, cin, 3, 3)
    cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.zeros((cin, h + 2, wd + 2))
    xp[:, 1:-1, 1:-1] = x
    oh = (h + 2 - 3) // 2 + 1
    ow = (wd + 2 - 3) // 2 + 1
    out = np.zeros((cout, oh, ow))
    for co in range(cout):
        for i in range(oh):
            for j in range(ow):
                out[co, i, j] = (xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[co]).sum() + b[co]
    return out


def global_tokens_oracle(params, cfg, image_hwc):
    """Conv stack + adaptive mean pool + positional table, (k_g, d)."""
    img = image_hwc.transpose(2, 0, 1).astype(np.float64)
    c, h, w = img.shape
    if h < 32 or w < 32:
        pad = np.empty((c, max(h, 32), max(w, 32)))
        for ci in range(c):
            for i in range(pad.shape[1]):
                for j in range(pad.shape[2]):
                    pad[ci, i, j] = img[ci, min(i, h - 1), min(j, w - 1)]
        img = pad
    x = img / 255.0
    for k in range(4):
        x = _conv_stride2_pad1(x, params[f"global_conv{k}_w"].astype(np.float64),
                               params[f"global_conv{k}_b"].astype(np.float64))
        if k < 3:
            x = _gelu(x)
    g = int(np.sqrt(cfg.global_tokens))
    d, hh, ww = x.shape
    pooled = np.zeros((d, g, g))
    for i in range(g):
        r0, r1 = hh * i // g, int(np.ceil(hh * (i + 1) / g))
        for j in range(g):
            c0, c1 = ww * j // g, int(np.ceil(ww * (j + 1) / g))
            pooled[:, i, j] = x[:, r0:r1, c0:c1].mean(axis=(1, 2))
    tokens = pooled.reshape(d, g * g).T
    return tokens + params["global_pos"].astype(np.float64)


def forward_oracle(params, cfg, image_hwc, patch_chw, residuals_flat):
    """Full straight-line forward: mixture params for every residual position.

    Returns (weights, means, stds) arrays of shape (n_res, K).
    """
    d = cfg.d
    p = cfg.patch_size
    heads = cfg.heads
    hd = d // heads
    K = cfg.mixtures
    c, hp, wp = patch_chw.shape

    f64 = {k: v.astype(np.float64) for k, v in params.items()}
    gtok = global_tokens_oracle(f64, cfg, image_hwc)

    ltok = np.zeros((hp * wp, d))
    for idx in range(hp * wp):
        r, cc = divmod(idx, wp)
        for ch in range(c):
            ltok[idx] += f64["local_embed"][ch][patch_chw[ch, r, cc]]
        ltok[idx] += f64["local_pos"][r * p + cc]

    n_res = c * hp * wp
    start = f64["res_embed"][511]
    rtok = []
    for j in range(n_res - 1):
        ch, rem = divmod(j, hp * wp)
        r, cc = divmod(rem, wp)
        sym = int(residuals_flat[j]) + 255
        rtok.append(f64["res_embed"][sym] + f64["res_pos"][ch * p * p + r * p + cc])
    x = np.vstack([gtok, ltok, start[None]] + ([np.vstack(rtok)] if rtok else []))

    n = x.shape[0]
    for li in range(cfg.layers):
        hln = _ln(x, f64[f"layer{li}_ln1_g"], f64[f"layer{li}_ln1_b"])
        qkv = hln @ f64[f"layer{li}_qkv_w"] + f64[f"layer{li}_qkv_b"]
        att = np.zeros((n, d))
        for hh in range(heads):
            q = qkv[:, hh * hd : (hh + 1) * hd]
            kk = qkv[:, d + hh * hd : d + (hh + 1) * hd]
            v = qkv[:, 2 * d + hh * hd : 2 * d + (hh + 1) * hd]
            scores = q @ kk.T / np.sqrt(hd)
            for i in range(n):
                scores[i, i + 1 :] = -np.inf
            probs = _softmax(scores)
            att[:, hh * hd : (hh + 1) * hd] = probs @ v
        x = x + att @ f64[f"layer{li}_proj_w"] + f64[f"layer{li}_proj_b"]
        h2 = _ln(x, f64[f"layer{li}_ln2_g"], f64[f"layer{li}_ln2_b"])
        x = x + _gelu(h2 @ f64[f"layer{li}_mlp1_w"] + f64[f"layer{li}_mlp1_b"]) \
            @ f64[f"layer{li}_mlp2_w"] + f64[f"layer{li}_mlp2_b"]

    prompt = cfg.global_tokens + hp * wp
    feats = _ln(x[prompt : prompt + n_res], f64["final_ln_g"], f64["final_ln_b"])
    head = feats @ f64["head_w"] + f64["head_b"]

    weights = np.zeros((n_res, K))
    means = np.zeros((n_res, K))
    stds = np.zeros((n_res, K))
    for j in range(n_res):
        ch = j // (hp * wp)
        block = head[j, 3 * K * ch : 3 * K * (ch + 1)]
        weights[j] = _softmax(block[:K])
        means[j] = block[K : 2 * K]
        stds[j] = np.maximum(_softplus(block[2 * K : 3 * K]), 1e-3)
    return weights, means, stds


def pmf_oracle(weights, means, stds, r):
    """Probability of integer residual r under the folded discretized GMM."""
    total = 0.0
    for w, m, s in zip(weights, means, stds):
        s = max(s, 1e-3)
        hi = 1.0 if r == 255 else 0.5 * (1.0 + scipy_erf((r + 0.5 - m) / (s * np.sqrt(2.0))))
        lo = 0.0 if r == -255 else 0.5 * (1.0 + scipy_erf((r - 0.5 - m) / (s * np.sqrt(2.0))))
        total += w * (hi - lo)
    return total


def nll_oracle(weights, means, stds, residuals):
    """Scalar cross-entropy (nats) with the 1e-9 probability floor."""
    total = 0.0
    for i, r in enumerate(residuals):
        total -= np.log(max(pmf_oracle(weights[i], means[i], stds[i], int(r)), 1e-9))
    return total


def qdown_upsample_oracle(pooled, h, w, s):
    """Loop reimplementation of the fixed-point bilinear upsample."""
    hd, wd, c = pooled.shape
    out = np.zeros((h, w, c), dtype=np.int64)
    for i in range(h):
        ynum = 2 * i + 1 - s
        y0 = ynum // (2 * s)
        fy = ynum - 2 * s * y0
        y1 = min(max(y0 + 1, 0), hd - 1)
        y0 = min(max(y0, 0), hd - 1)
        for j in range(w):
            xnum = 2 * j + 1 - s
            x0 = xnum // (2 * s)
            fx = xnum - 2 * s * x0
            x1 = min(max(x0 + 1, 0), wd - 1)
            x0 = min(max(x0, 0), wd - 1)
            for ch in range(c):
                acc = ((2 * s - fy) * ((2 * s - fx) * int(pooled[y0, x0, ch]) + fx * int(pooled[y0, x1, ch]))
                       + fy * ((2 * s - fx) * int(pooled[y1, x0, ch]) + fx * int(pooled[y1, x1, ch])))
                out[i, j, ch] = (2 * acc + 4 * s * s) // (8 * s * s)
    return np.clip(out, 0, 255).astype(np.uint8)
