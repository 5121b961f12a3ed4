"""Discretized Gaussian-mixture likelihood over the residual alphabet.

A residual value r in [-255, 255] gets probability
    P(r) = sum_k w_k * [Phi_k(r + 1/2) - Phi_k(r - 1/2)]
with the two edge bins folded to the full tails so the PMF sums to one
exactly.  `canonical_round` snaps mixture parameters to a 2^-12 grid; the
encoder and decoder both derive their frequency tables from the canonical
parameters, which is what makes the two sides agree bit-exactly.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .entropy_coder import FreqTable, quantize_pmf
from .errors import CodecError, SupportError
from .special import erf

RESIDUAL_LO = -255
RESIDUAL_HI = 255
NUM_SYMBOLS = RESIDUAL_HI - RESIDUAL_LO + 1  # 511

SIGMA_MIN = 1e-3
P_FLOOR = 1e-9

_GRID = 1 << 12  # canonical rounding grid: multiples of 2^-12
_SIGMA_MIN_CANONICAL = np.ceil(SIGMA_MIN * _GRID) / _GRID  # 5/4096, stays on-grid

# interior bin edges r + 1/2 for r = -255 .. 254
_EDGES = np.arange(RESIDUAL_LO, RESIDUAL_HI, dtype=np.float64) + 0.5
_SQRT_HALF = float(np.sqrt(0.5))


class Diagnostics:
    """Process-wide counters for conditions that are tolerated, not fatal."""

    def __init__(self):
        self._lock = threading.Lock()
        self.std_clamps = 0

    def count_std_clamps(self, n: int):
        if n:
            with self._lock:
                self.std_clamps += int(n)

    def reset(self):
        with self._lock:
            self.std_clamps = 0


DIAGNOSTICS = Diagnostics()


@dataclass(frozen=True)
class GmmParams:
    """Mixture weights / means / stds for one coded residual value."""

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        m = np.asarray(self.means, dtype=np.float64)
        s = np.asarray(self.stds, dtype=np.float64)
        if not (w.ndim == m.ndim == s.ndim == 1 and w.size == m.size == s.size >= 1):
            raise CodecError(
                f"mixture fields must be equal-length 1-D arrays, got "
                f"{w.shape}/{m.shape}/{s.shape}"
            )
        if not (np.isfinite(w).all() and np.isfinite(m).all() and np.isfinite(s).all()):
            raise CodecError("mixture parameters must be finite")
        if (w < 0).any():
            raise CodecError("mixture weights must be nonnegative")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise CodecError(f"mixture weights sum to {float(w.sum())!r}")
        if (s <= 0).any():
            raise CodecError("mixture stds must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "stds", s)

    @property
    def k(self) -> int:
        return int(self.weights.size)


def discretized_pmf(params: GmmParams) -> np.ndarray:
    """PMF over the 511 residual symbols, tails folded into the edge bins.

    Bins are computed as 0.5 * (erf(z_hi) - erf(z_lo)) rather than as
    differences of CDF values: erf is exactly odd, which makes the PMF of a
    mirror-symmetric mixture exactly mirror-symmetric in float arithmetic.
    """
    w = params.weights / params.weights.sum()
    stds = params.stds
    below = int((stds < SIGMA_MIN).sum())
    if below:
        DIAGNOSTICS.count_std_clamps(below)
        stds = np.maximum(stds, SIGMA_MIN)

    # one batched erf over all components, then the weighted sum in a fixed
    # order: per component, ascending k
    e = erf((_EDGES[None, :] - params.means[:, None]) * (_SQRT_HALF / stds)[:, None])
    comps = np.empty((params.k, NUM_SYMBOLS), dtype=np.float64)
    comps[:, 0] = 0.5 * (1.0 + e[:, 0])
    comps[:, 1:-1] = 0.5 * np.diff(e, axis=1)
    comps[:, -1] = 0.5 * (1.0 - e[:, -1])
    pmf = np.zeros(NUM_SYMBOLS, dtype=np.float64)
    for k in range(params.k):
        pmf += w[k] * comps[k]
    return pmf


def coding_table(params: GmmParams) -> FreqTable:
    """Integer frequency table the arithmetic coder uses for these params."""
    return quantize_pmf(discretized_pmf(params), NUM_SYMBOLS)


def canonical_round(params: GmmParams) -> GmmParams:
    """Snap parameters to the 2^-12 grid shared by encoder and decoder.

    Means and stds round half-to-even; stds are floored at the smallest
    on-grid value >= SIGMA_MIN.  Weights are re-quantized by largest
    remainder so they sum to exactly 4096/4096; ties break toward the
    lowest component index.  Idempotent.
    """
    means = np.round(params.means * _GRID) / _GRID
    stds = np.maximum(np.round(params.stds * _GRID) / _GRID, _SIGMA_MIN_CANONICAL)

    scaled = params.weights * _GRID
    base = np.floor(scaled).astype(np.int64)
    remainder = scaled - base
    deficit = _GRID - int(base.sum())
    if deficit > 0:
        order = np.lexsort((np.arange(base.size), -remainder))
        base[order[:deficit]] += 1
    elif deficit < 0:
        # weights may sum to slightly above 1 in float; shave the largest
        for _ in range(-deficit):
            base[int(np.argmax(base))] -= 1
    weights = base.astype(np.float64) / _GRID
    return GmmParams(weights, means, stds)


def residual_symbols(residuals) -> np.ndarray:
    """Map residual values to coder symbols (r + 255), validating support."""
    r = np.asarray(residuals)
    if r.size and (r.min() < RESIDUAL_LO or r.max() > RESIDUAL_HI):
        raise SupportError(
            f"residual outside [{RESIDUAL_LO}, {RESIDUAL_HI}]: "
            f"min={r.min()} max={r.max()}"
        )
    return (r.astype(np.int64) - RESIDUAL_LO).astype(np.int64)


def bin_probability(weights, means, stds, residuals):
    """Differentiable P(r) per sample; inputs (..., K), residuals (...)."""
    r = np.asarray(residuals, dtype=np.int64)
    if r.size and (r.min() < RESIDUAL_LO or r.max() > RESIDUAL_HI):
        raise SupportError(
            f"residual outside [{RESIDUAL_LO}, {RESIDUAL_HI}]: "
            f"min={r.min()} max={r.max()}"
        )
    rf = r.astype(np.float64)[..., None]
    at_hi = rf == RESIDUAL_HI
    at_lo = rf == RESIDUAL_LO

    z_hi = ad.mul(ad.div(ad.sub(rf + 0.5, means), stds), _SQRT_HALF)
    z_lo = ad.mul(ad.div(ad.sub(rf - 0.5, means), stds), _SQRT_HALF)
    # fold tails: the top bin integrates to +inf (erf -> 1), the bottom
    # from -inf (erf -> -1); same formula the coding-side PMF uses
    e_hi = ad.add(ad.mul(ad.erf(z_hi), ~at_hi), at_hi.astype(np.float64))
    e_lo = ad.sub(ad.mul(ad.erf(z_lo), ~at_lo), at_lo.astype(np.float64))
    return ad.tsum(ad.mul(weights, ad.mul(ad.sub(e_hi, e_lo), 0.5)), axis=-1)


def nll_loss(weights, means, stds, residuals) -> ad.Tensor:
    """Total negative log-likelihood (nats) of residuals under the mixtures.

    Differentiable with respect to all mixture parameters when they are
    passed as Tensors; probabilities are floored at P_FLOOR so early
    training cannot produce an infinite loss.
    """
    p = bin_probability(weights, means, stds, residuals)
    return ad.mul(ad.tsum(ad.tlog(ad.clamp_min(p, P_FLOOR))), -1.0)
