"""
Byte-oriented range coder with 32-bit range and carry propagation,
plus static 16-bit frequency tables and an adaptive order-0 byte model.

The encoder keeps `low` in 33 bits (32 bits plus carry) and delays bytes in a
cache until a carry can no longer reach them. The first byte the
carry cache produces is always zero and is not emitted; the decoder primes its
32-bit code register from the first four bytes.
"""
from bisect import bisect_right
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from app.config import CDF_PRECISION_BITS
from app.errors import InvalidArgumentError, TruncatedStreamError

TOP = 1 << 24
MASK32 = 0xFFFFFFFF
CDF_TOTAL = 1 << CDF_PRECISION_BITS


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()

    def _shift_low(self) -> None:
        if self.low < 0xFF000000 or self.low > MASK32:
            carry = self.low >> 32
            temp = self.cache
            while True:
                self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if self.cache_size == 0:
                    break
            self.cache = (self.low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (self.low << 8) & MASK32

    def encode(self, start: int, size: int, total: int) -> None:
        r = self.range // total
        self.low += start * r
        self.range = r * size
        while self.range < TOP:
            self.range <<= 8
            self._shift_low()

    def finish(self) -> bytes:
        for _ in range(5):
            self._shift_low()
        return bytes(self.out[1:])


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = MASK32
        self.code = 0
        self._r = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self.pos >= len(self.data):
            raise TruncatedStreamError(f"range-coded stream truncated at byte {self.pos}")
        b = self.data[self.pos]
        self.pos += 1
        return b

    def target(self, total: int) -> int:
        """Cumulative frequency the next symbol's interval contains"""
        self._r = self.range // total
        return min(self.code // self._r, total - 1)

    def consume(self, start: int, size: int) -> None:
        self.code -= start * self._r
        self.range = self._r * size
        while self.range < TOP:
            self.code = ((self.code << 8) | self._next_byte()) & MASK32
            self.range <<= 8


@dataclass
class FrequencyTable:
    """
    Static model over the alphabet [offset, offset + len(freqs) - 1] with
    cumulative frequencies summing to 2^16.
    """
    cdf: List[int]  # length alphabet + 1, cdf[0] = 0, cdf[-1] = CDF_TOTAL
    offset: int = 0

    def __post_init__(self):
        self.cdf = [int(c) for c in self.cdf]
        if len(self.cdf) < 2 or self.cdf[0] != 0 or self.cdf[-1] != CDF_TOTAL:
            raise InvalidArgumentError("cdf must start at 0 and end at 2^16")
        if any(b <= a for a, b in zip(self.cdf, self.cdf[1:])):
            raise InvalidArgumentError("cdf must be strictly increasing")

    @property
    def alphabet_size(self) -> int:
        return len(self.cdf) - 1

    def freq(self, index: int) -> int:
        return self.cdf[index + 1] - self.cdf[index]

    def bits(self, symbol: int) -> float:
        """Ideal codelength in bits under this quantized table"""
        idx = symbol - self.offset
        return float(np.log2(CDF_TOTAL / self.freq(idx)))

    @classmethod
    def from_counts(cls, counts: Sequence[float], offset: int = 0) -> "FrequencyTable":
        """
        Quantize nonnegative counts to integer frequencies summing to 2^16,
        every symbol at least 1. Leftover mass goes to the largest fractional
        parts, ties to the lower index.
        """
        c = np.asarray(counts, dtype=np.float64)
        n = c.size
        if n == 0 or n > CDF_TOTAL or np.any(c < 0) or not np.all(np.isfinite(c)):
            raise InvalidArgumentError("counts must be finite, nonnegative and fit the 16-bit table")
        total = c.sum()
        share = (c / total) * (CDF_TOTAL - n) if total > 0 else np.full(n, (CDF_TOTAL - n) / n)
        base = np.floor(share)
        freqs = base.astype(np.int64) + 1
        leftover = CDF_TOTAL - int(freqs.sum())
        if leftover:
            order = np.lexsort((np.arange(n), -(share - base)))
            freqs[order[:leftover]] += 1
        cdf = np.concatenate(([0], np.cumsum(freqs)))
        return cls(cdf.tolist(), offset)


def rc_encode(symbols: Sequence[int], model: FrequencyTable) -> bytes:
    """Range-code symbols under one static table"""
    enc = RangeEncoder()
    cdf = model.cdf
    n = model.alphabet_size
    for s in symbols:
        idx = int(s) - model.offset
        if not 0 <= idx < n:
            raise InvalidArgumentError(f"symbol {s} outside alphabet [{model.offset}, {model.offset + n - 1}]")
        enc.encode(cdf[idx], cdf[idx + 1] - cdf[idx], CDF_TOTAL)
    return enc.finish()


def rc_decode(data: bytes, model: FrequencyTable, count: int) -> List[int]:
    dec = RangeDecoder(data)
    cdf = model.cdf
    out = []
    for _ in range(count):
        value = dec.target(CDF_TOTAL)
        idx = bisect_right(cdf, value) - 1
        dec.consume(cdf[idx], cdf[idx + 1] - cdf[idx])
        out.append(idx + model.offset)
    return out


def encode_multi(symbols: Sequence[int], models: Sequence[FrequencyTable], counts: Sequence[int]) -> bytes:
    """One stream, consecutive runs of counts[i] symbols under models[i]"""
    if len(models) != len(counts) or sum(counts) != len(symbols):
        raise InvalidArgumentError("models, counts and symbols do not line up")
    enc = RangeEncoder()
    pos = 0
    for model, count in zip(models, counts):
        cdf = model.cdf
        n = model.alphabet_size
        for s in symbols[pos:pos + count]:
            idx = int(s) - model.offset
            if not 0 <= idx < n:
                raise InvalidArgumentError(f"symbol {s} outside alphabet [{model.offset}, {model.offset + n - 1}]")
            enc.encode(cdf[idx], cdf[idx + 1] - cdf[idx], CDF_TOTAL)
        pos += count
    return enc.finish()


def decode_multi(data: bytes, models: Sequence[FrequencyTable], counts: Sequence[int]) -> List[int]:
    dec = RangeDecoder(data)
    out: List[int] = []
    for model, count in zip(models, counts):
        cdf = model.cdf
        for _ in range(count):
            value = dec.target(CDF_TOTAL)
            idx = bisect_right(cdf, value) - 1
            dec.consume(cdf[idx], cdf[idx + 1] - cdf[idx])
            out.append(idx + model.offset)
    return out


# Order-0 adaptive byte model: counts start from a prior and grow by a fixed
# increment per coded byte; all counts halve once the total passes 2^16.
BYTE_INCREMENT = 24
BYTE_LIMIT = 1 << 16


def byte_prior_from_text(reference: str, weight: int = 16) -> List[int]:
    """Prior counts: 1 for every byte plus weight per occurrence in reference"""
    prior = [1] * 256
    for b in reference.encode("utf-8"):
        prior[b] += weight
    return prior


class AdaptiveByteModel:
    def __init__(self, prior: Sequence[int] = None):
        self.freqs = list(prior) if prior is not None else [1] * 256
        if len(self.freqs) != 256 or min(self.freqs) < 1 or sum(self.freqs) > BYTE_LIMIT:
            raise InvalidArgumentError("byte prior needs 256 positive counts summing to at most 2^16")
        self.total = sum(self.freqs)

    def interval(self, byte: int):
        start = sum(self.freqs[:byte])
        return start, self.freqs[byte]

    def find(self, value: int):
        start = 0
        for b, f in enumerate(self.freqs):
            if value < start + f:
                return b, start, f
            start += f
        raise InvalidArgumentError("target beyond model total")

    def update(self, byte: int) -> None:
        self.freqs[byte] += BYTE_INCREMENT
        self.total += BYTE_INCREMENT
        if self.total > BYTE_LIMIT:
            self.freqs = [max(1, f // 2) for f in self.freqs]
            self.total = sum(self.freqs)


def encode_bytes_adaptive(data: bytes, prior: Sequence[int] = None) -> bytes:
    if not data:
        return b""
    model = AdaptiveByteModel(prior)
    enc = RangeEncoder()
    for b in data:
        start, size = model.interval(b)
        enc.encode(start, size, model.total)
        model.update(b)
    return enc.finish()


def decode_bytes_adaptive(data: bytes, count: int, prior: Sequence[int] = None) -> bytes:
    if count == 0:
        return b""
    model = AdaptiveByteModel(prior)
    dec = RangeDecoder(data)
    out = bytearray()
    for _ in range(count):
        value = dec.target(model.total)
        b, start, size = model.find(value)
        dec.consume(start, size)
        out.append(b)
        model.update(b)
    return bytes(out)
