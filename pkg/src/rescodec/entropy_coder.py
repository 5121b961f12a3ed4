"""Exact integer range coder over 16-bit frequency tables.

64-bit state, byte-wise renormalization, carry propagation via a cache byte
plus a pending-0xFF run (the classic LZMA shift-low scheme widened to 64
bits).  The first emitted byte of that scheme is always 0x00 and carries no
information, so it is stripped; total stream overhead over the ideal code
length is the 64-bit flush plus sub-bit rounding, never more than 64 bits.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .errors import CoderError, TruncatedStreamError

TOTAL_BITS = 16
TOTAL = 1 << TOTAL_BITS  # every table sums to exactly 2^16
MAX_SYMBOLS = 1 << 15

_MASK64 = (1 << 64) - 1
_RENORM = 1 << 56
_FF_TOP = 0xFF << 56  # low < this  <=>  top byte < 0xFF


@dataclass(frozen=True)
class FreqTable:
    """Integer PMF: freqs sum to exactly 2^16 and every entry is >= 1."""

    freqs: np.ndarray  # uint32, shape (num_symbols,)
    cum: np.ndarray    # uint64, shape (num_symbols + 1,), cum[0] == 0

    @classmethod
    def from_freqs(cls, freqs) -> "FreqTable":
        f = np.asarray(freqs, dtype=np.uint32)
        if f.ndim != 1 or f.size == 0:
            raise CoderError("frequency table must be a non-empty 1-D array")
        if (f < 1).any():
            raise CoderError("frequency table has a zero entry")
        cum = np.zeros(f.size + 1, dtype=np.uint64)
        np.cumsum(f, out=cum[1:])
        if int(cum[-1]) != TOTAL:
            raise CoderError(f"frequency table sums to {int(cum[-1])}, expected {TOTAL}")
        return cls(f, cum)

    @property
    def num_symbols(self) -> int:
        return int(self.freqs.size)

    def span(self, symbol: int) -> tuple[int, int]:
        return int(self.cum[symbol]), int(self.freqs[symbol])


@dataclass(frozen=True)
class BitStream:
    data: bytes
    bit_length: int

    def __post_init__(self):
        if self.bit_length > 8 * len(self.data):
            raise CoderError("bit_length exceeds byte payload")


def quantize_pmf(probs, num_symbols: int | None = None) -> FreqTable:
    """Largest-remainder quantization of a real PMF to a 2^16-total table.

    Zero-frequency symbols are raised to 1, taking the deficit from the
    current largest entry; all ties break toward the lowest symbol index.
    """
    p = np.asarray(probs, dtype=np.float64)
    if num_symbols is None:
        num_symbols = p.size
    if p.ndim != 1 or p.size != num_symbols:
        raise CoderError(f"PMF length {p.size} != num_symbols {num_symbols}")
    if num_symbols > MAX_SYMBOLS:
        raise CoderError(f"alphabet of {num_symbols} exceeds {MAX_SYMBOLS}")
    if num_symbols < 1:
        raise CoderError("empty alphabet")
    if not np.isfinite(p).all() or (p < 0).any():
        raise CoderError("PMF entries must be finite and nonnegative")
    if abs(float(p.sum()) - 1.0) > 1e-6:
        raise CoderError(f"PMF sums to {float(p.sum())!r}, expected 1 within 1e-6")

    scaled = p * TOTAL
    base = np.floor(scaled).astype(np.int64)
    remainder = scaled - base
    deficit = TOTAL - int(base.sum())
    if deficit < 0:  # cannot happen for sums <= 1 + 1e-6, guard anyway
        raise CoderError("PMF quantization overflow")
    if deficit > 0:
        order = np.lexsort((np.arange(num_symbols), -remainder))
        base[order[:deficit]] += 1

    zeros = np.flatnonzero(base == 0)
    if zeros.size:
        base[zeros] = 1
        _drain_largest(base, int(zeros.size))
    return FreqTable.from_freqs(base)


def _drain_largest(freqs: np.ndarray, units: int):
    """Remove `units` by repeatedly decrementing the current largest entry
    (ties to the lowest index), vectorized as a water-fill to level T plus a
    final partial round over the lowest-indexed entries sitting at T."""
    asc = np.sort(freqs)
    csum = np.cumsum(asc)
    total = int(csum[-1])
    n = asc.size

    def removed_at(level: int) -> int:
        # sum of (f - level) over entries strictly above `level`
        idx = int(np.searchsorted(asc, level, side="right"))
        if idx == n:
            return 0
        above_sum = total - (int(csum[idx - 1]) if idx else 0)
        return above_sum - (n - idx) * level

    lo, hi = 1, int(asc[-1])  # smallest level whose cut removes <= units
    while lo < hi:
        mid = (lo + hi) // 2
        if removed_at(mid) <= units:
            hi = mid
        else:
            lo = mid + 1
    level = lo
    remaining = units - removed_at(level)
    np.minimum(freqs, level, out=freqs)
    if remaining:
        at_level = np.flatnonzero(freqs == level)[:remaining]
        freqs[at_level] -= 1
    if int(freqs.min()) < 1:
        raise CoderError("cannot raise zero-frequency symbol: table too flat")


def uniform_table(num_symbols: int) -> FreqTable:
    return quantize_pmf(np.full(num_symbols, 1.0 / num_symbols), num_symbols)


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK64
        self._cache = 0
        self._cache_size = 1
        self._out = bytearray()
        self._finished = False

    def _shift_low(self):
        if self.low < _FF_TOP or self.low > _MASK64:
            carry = self.low >> 64
            out = self._out
            out.append((self._cache + carry) & 0xFF)
            filler = (0xFF + carry) & 0xFF
            for _ in range(self._cache_size - 1):
                out.append(filler)
            self._cache = (self.low >> 56) & 0xFF
            self._cache_size = 0
        self._cache_size += 1
        self.low = (self.low << 8) & _MASK64

    def encode_symbol(self, table: FreqTable, symbol: int):
        if self._finished:
            raise CoderError("encoder already finished")
        if not 0 <= symbol < table.num_symbols:
            raise CoderError(f"symbol {symbol} out of range [0, {table.num_symbols})")
        start, freq = table.span(symbol)
        r = self.range // TOTAL
        self.low += start * r
        self.range = freq * r
        while self.range < _RENORM:
            self._shift_low()
            self.range <<= 8
    def finish(self) -> BitStream:
        if self._finished:
            raise CoderError("encoder already finished")
        self._finished = True
        for _ in range(9):
            self._shift_low()
        # the initial cache byte is always 0x00 (the coded value is < 1.0 in
        # fixed point, so no carry can ever reach it) and is not transmitted
        assert self._out[0] == 0
        return BitStream(bytes(self._out[1:]), 8 * (len(self._out) - 1))


class RangeDecoder:
    def __init__(self, stream: Union[BitStream, bytes]):
        data = stream.data if isinstance(stream, BitStream) else bytes(stream)
        self._data = data
        self._pos = 0
        self.range = _MASK64
        self.code = 0
        for _ in range(8):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise TruncatedStreamError(
                f"bitstream exhausted at byte {self._pos}"
            )
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode_symbol(self, table: FreqTable) -> int:
        r = self.range // TOTAL
        cum = self.code // r
        if cum >= TOTAL:
            cum = TOTAL - 1
        symbol = int(np.searchsorted(table.cum, cum, side="right")) - 1
        start, freq = table.span(symbol)
        self.code -= start * r
        self.range = freq * r
        while self.range < _RENORM:
            self.code = ((self.code << 8) | self._next_byte()) & _MASK64
            self.range <<= 8
        return symbol


TableProvider = Union[Sequence[FreqTable], Callable[[int, tuple], FreqTable]]


def _provider_fn(tables: TableProvider):
    if callable(tables):
        return tables
    return lambda i, prev: tables[i]


def ac_encode(symbols: Sequence[int], tables: TableProvider) -> BitStream:
    """Encode a symbol sequence under a per-position table provider.

    The provider is called as tables(i, prefix) where prefix holds the
    symbols already coded; it must behave identically at decode time.
    """
    get = _provider_fn(tables)
    enc = RangeEncoder()
    prefix: list[int] = []
    for i, s in enumerate(symbols):
        table = get(i, tuple(prefix))
        try:
            enc.encode_symbol(table, int(s))
        except CoderError as e:
            raise CoderError(f"position {i}: {e}") from None
        prefix.append(int(s))
    return enc.finish()


def ac_decode(stream: Union[BitStream, bytes], count: int, tables: TableProvider) -> list[int]:
    """Inverse of ac_encode given an identical table provider."""
    get = _provider_fn(tables)
    dec = RangeDecoder(stream)
    out: list[int] = []
    for i in range(count):
        table = get(i, tuple(out))
        out.append(dec.decode_symbol(table))
    return out


def ideal_code_length_bits(symbols: Sequence[int], tables: TableProvider) -> float:
    """Sum of -log2(quantized probability) over the sequence."""
    get = _provider_fn(tables)
    total = 0.0
    prefix: list[int] = []
    for i, s in enumerate(symbols):
        table = get(i, tuple(prefix))
        total += -np.log2(float(table.freqs[int(s)]) / TOTAL)
        prefix.append(int(s))
    return total
