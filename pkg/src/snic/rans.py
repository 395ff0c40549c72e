"""Byte-oriented rANS coder over 16-bit quantized CDF tables.

State is 32 bits with lower bound 2**23; one byte is moved per renormalisation
step and the final state is flushed as 4 big-endian bytes at the start of the
stream.  Symbols outside a table's support are sent as an escape symbol
followed by the raw value as two uniform 16-bit halves.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .quantization import SIGMA_MIN, gaussian_interval_mass

PRECISION = 16
TOTAL = 1 << PRECISION
RANS_L = 1 << 23
SYMBOL_MIN = -255
SYMBOL_MAX = 255
TAIL_Z = 5.0
ESCAPE_BIAS = 1 << 31

_OK = 0
_TRUNCATED = 1
_TRAILING = 2
_RANGE = 3


class RansError(ValueError):
    """Malformed, truncated or mismatched rANS stream."""


@dataclass(frozen=True)
class CdfTable:
    """Cumulative frequencies for symbols s_min..s_max plus one trailing escape slot."""

    s_min: int
    s_max: int
    cdf: np.ndarray

    def __post_init__(self):
        cdf = np.asarray(self.cdf, dtype=np.int32)
        object.__setattr__(self, "cdf", cdf)
        if len(cdf) != self.s_max - self.s_min + 3:
            raise ValueError("cdf length must be (s_max - s_min + 1) symbols + escape + 1")
        if cdf[0] != 0 or cdf[-1] != TOTAL or np.any(np.diff(cdf) < 1):
            raise ValueError("cdf must rise strictly from 0 to 2**16")

    @property
    def freqs(self) -> np.ndarray:
        return np.diff(self.cdf)

    def frequency(self, s: int) -> int:
        if self.s_min <= s <= self.s_max:
            return int(self.cdf[s - self.s_min + 1] - self.cdf[s - self.s_min])
        return int(self.cdf[-1] - self.cdf[-2])

    @property
    def escape_frequency(self) -> int:
        return int(self.cdf[-1] - self.cdf[-2])


def quantize_pmf(pmf: np.ndarray, escape_mass: float | None = None) -> np.ndarray:
    """Integer frequencies (>= 1, summing to 2**16) for ``pmf`` plus an escape slot.

    Each slot gets round-half-up(p * 2**16), floored at 1; the surplus or
    deficit is then spread in proportion to the slots' frequencies and the
    last few units go to the largest fractional remainders (ties: lowest
    index), so the result is a deterministic function of the float64 input.
    """
    pmf = np.asarray(pmf, dtype=np.float64)
    if escape_mass is None:
        escape_mass = max(0.0, 1.0 - float(pmf.sum()))
    p = np.append(np.clip(pmf, 0.0, None), max(escape_mass, 0.0))
    p = p / p.sum()
    freq = np.maximum(1, np.floor(p * TOTAL + 0.5)).astype(np.int64)
    diff = TOTAL - int(freq.sum())
    if diff:
        adjustable = freq > 1
        base = np.where(adjustable, freq, 0).astype(np.float64)
        share = diff * base / base.sum()
        step = np.trunc(share).astype(np.int64)
        if diff < 0:
            step = np.maximum(step, 1 - freq)
        freq += step
        rest = TOTAL - int(freq.sum())
        frac = share - step
        order = np.lexsort((np.arange(len(freq)), -np.sign(rest) * frac))
        i = 0
        while rest:
            k = order[i % len(order)]
            if rest > 0:
                freq[k] += 1
                rest -= 1
            elif freq[k] > 1:
                freq[k] -= 1
                rest += 1
            i += 1
    cdf = np.zeros(len(freq) + 1, dtype=np.int64)
    np.cumsum(freq, out=cdf[1:])
    return cdf.astype(np.int32)


def gaussian_support(mu: float, sigma: float) -> tuple[int, int]:
    lo = int(np.floor(mu - TAIL_Z * sigma))
    hi = int(np.ceil(mu + TAIL_Z * sigma))
    lo = min(max(lo, SYMBOL_MIN), SYMBOL_MAX)
    hi = max(min(hi, SYMBOL_MAX), SYMBOL_MIN)
    return lo, hi


def build_cdf_table(mu: float = 0.0, sigma: float = 1.0, support: tuple[int, int] | None = None) -> CdfTable:
    """Quantized discretized-Gaussian table.

    The support defaults to mu +/- 5 sigma intersected with [-255, 255]; mass
    outside it goes to the escape slot.
    """
    sigma = max(float(sigma), SIGMA_MIN)
    lo, hi = support if support is not None else gaussian_support(mu, sigma)
    n = np.arange(lo, hi + 1, dtype=np.float64)
    pmf = gaussian_interval_mass(n, mu, sigma)
    return CdfTable(lo, hi, quantize_pmf(pmf))


def table_from_pmf(pmf: np.ndarray, offset: int, tail: float = 1e-7) -> CdfTable:
    """Table over the central part of an integer pmf starting at ``offset``."""
    pmf = np.asarray(pmf, dtype=np.float64)
    c = np.cumsum(pmf)
    lo_i = int(np.searchsorted(c, tail))
    hi_i = int(len(pmf) - 1 - np.searchsorted(np.cumsum(pmf[::-1]), tail))
    hi_i = max(hi_i, lo_i)
    return CdfTable(offset + lo_i, offset + hi_i, quantize_pmf(pmf[lo_i:hi_i + 1]))


@dataclass(frozen=True)
class TableSet:
    """Tables stacked for the numba kernels."""

    cdfs: np.ndarray      # (T, max_len + 1) int32
    lengths: np.ndarray   # (T,) number of regular symbols
    offsets: np.ndarray   # (T,) s_min per table

    @classmethod
    def from_tables(cls, tables: Sequence[CdfTable]) -> "TableSet":
        if not tables:
            raise ValueError("no tables")
        width = max(len(t.cdf) for t in tables)
        cdfs = np.full((len(tables), width), TOTAL, dtype=np.int32)
        for i, t in enumerate(tables):
            cdfs[i, : len(t.cdf)] = t.cdf
        lengths = np.array([t.s_max - t.s_min + 1 for t in tables], dtype=np.int32)
        offsets = np.array([t.s_min for t in tables], dtype=np.int64)
        return cls(cdfs, lengths, offsets)

    def __len__(self) -> int:
        return len(self.lengths)


@numba.njit(cache=True)
def _put(x, start, freq, buf, pos):
    x_max = ((RANS_L >> PRECISION) << 8) * freq
    while x >= x_max:
        buf[pos] = x & 0xFF
        pos += 1
        x >>= 8
    x = ((x // freq) << PRECISION) + (x % freq) + start
    return x, pos


@numba.njit(cache=True)
def _encode_kernel(symbols, indexes, cdfs, lengths, offsets):
    n = symbols.shape[0]
    buf = np.empty(6 * n + 8, dtype=np.uint8)
    pos = 0
    x = np.int64(RANS_L)
    for k in range(n - 1, -1, -1):
        t = indexes[k]
        nsym = lengths[t]
        s = symbols[k] - offsets[t]
        if 0 <= s < nsym:
            start = cdfs[t, s]
            x, pos = _put(x, np.int64(start), np.int64(cdfs[t, s + 1] - start), buf, pos)
        else:
            raw = symbols[k] + ESCAPE_BIAS
            if raw < 0 or raw >= (np.int64(1) << 32):
                return buf[:0], _RANGE
            x, pos = _put(x, raw & 0xFFFF, np.int64(1), buf, pos)
            x, pos = _put(x, raw >> 16, np.int64(1), buf, pos)
            start = cdfs[t, nsym]
            x, pos = _put(x, np.int64(start), np.int64(cdfs[t, nsym + 1] - start), buf, pos)
    for _ in range(4):
        buf[pos] = x & 0xFF
        pos += 1
        x >>= 8
    return buf[:pos][::-1].copy(), _OK


@numba.njit(cache=True)
def _find(cdfs, t, nslots, cf):
    lo = 0
    hi = nslots
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if cdfs[t, mid] <= cf:
            lo = mid
        else:
            hi = mid
    return lo


@numba.njit(cache=True)
def _decode_kernel(data, indexes, cdfs, lengths, offsets):
    n = indexes.shape[0]
    out = np.empty(n, dtype=np.int64)
    size = data.shape[0]
    if size < 4:
        return out, _TRUNCATED
    x = np.int64(0)
    for i in range(4):
        x = (x << 8) | np.int64(data[i])
    pos = 4
    mask = np.int64(TOTAL - 1)
    for k in range(n):
        t = indexes[k]
        nsym = lengths[t]
        cf = x & mask
        s = _find(cdfs, t, nsym + 1, cf)
        start = np.int64(cdfs[t, s])
        freq = np.int64(cdfs[t, s + 1]) - start
        x = freq * (x >> PRECISION) + cf - start
        while x < RANS_L:
            if pos >= size:
                return out, _TRUNCATED
            x = (x << 8) | np.int64(data[pos])
            pos += 1
        if s < nsym:
            out[k] = s + offsets[t]
        else:
            raw = np.int64(0)
            for half in range(2):
                cf = x & mask
                x = x >> PRECISION  # freq 1, start cf
                while x < RANS_L:
                    if pos >= size:
                        return out, _TRUNCATED
                    x = (x << 8) | np.int64(data[pos])
                    pos += 1
                if half == 0:
                    raw = cf << 16
                else:
                    raw = raw | cf
            out[k] = raw - ESCAPE_BIAS
    if pos != size or x != RANS_L:
        return out, _TRAILING
    return out, _OK


def _as_tableset(tables) -> TableSet:
    return tables if isinstance(tables, TableSet) else TableSet.from_tables(list(tables))


def rans_encode(symbols, tables, indexes=None) -> bytes:
    """Encode integer ``symbols``; symbol k uses table ``indexes[k]``.

    With ``indexes`` omitted, ``tables`` must hold one table per symbol.
    """
    symbols = np.ascontiguousarray(symbols, dtype=np.int64).ravel()
    ts = _as_tableset(tables)
    if indexes is None:
        if len(ts) != len(symbols):
            raise ValueError("need one table per symbol when no indexes are given")
        indexes = np.arange(len(symbols), dtype=np.int32)
    indexes = np.ascontiguousarray(indexes, dtype=np.int32).ravel()
    if len(indexes) != len(symbols):
        raise ValueError("symbols and indexes differ in length")
    if len(indexes) and (indexes.min() < 0 or indexes.max() >= len(ts)):
        raise ValueError("table index out of range")
    data, status = _encode_kernel(symbols, indexes, ts.cdfs, ts.lengths, ts.offsets)
    if status == _RANGE:
        raise RansError("escaped value outside the 32-bit fallback range")
    return data.tobytes()


def rans_decode(data: bytes, tables, n: int | None = None, indexes=None) -> np.ndarray:
    """Decode ``n`` symbols (or ``len(indexes)``); raises :class:`RansError` on bad streams."""
    ts = _as_tableset(tables)
    if indexes is None:
        n = len(ts) if n is None else n
        if n != len(ts):
            raise ValueError("need one table per symbol when no indexes are given")
        indexes = np.arange(n, dtype=np.int32)
    indexes = np.ascontiguousarray(indexes, dtype=np.int32).ravel()
    if n is not None and n != len(indexes):
        raise ValueError("n does not match the number of table indexes")
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    out, status = _decode_kernel(buf, indexes, ts.cdfs, ts.lengths, ts.offsets)
    if status == _TRUNCATED:
        raise RansError("truncated rANS stream")
    if status == _TRAILING:
        raise RansError("rANS stream did not end in the initial state (corrupt data or wrong tables)")
    return out
