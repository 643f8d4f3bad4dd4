"""Bit-exact 32-bit renormalizing range coder.

Carry-less variant: a byte is emitted only once the top byte of the interval
is settled, and near-underflow the range is clamped to the next 2^16 boundary,
so emitted bytes are final.  All arithmetic is fixed-width integer, hence
decoding is deterministic and platform independent.

Cumulative frequency totals must not exceed 2^16.  The flush writes exactly
two bytes: the shortest prefix of a value inside the final interval (the
post-normalization range is always >= 2^16, so a multiple of 2^16 exists in
it).  The decoder mirrors the encoder's renormalization byte for byte and is
allowed to run exactly two bytes past the physical stream end (the flush it
never sees in full); any further read means the stream was truncated.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, DecodeError

_TOP = 1 << 24
_BOTTOM = 1 << 16
_MASK = (1 << 32) - 1
MAX_TOTAL = 1 << 16
_VIRTUAL_ALLOWANCE = 2


class RangeEncoder:
    def __init__(self):
        self._low = 0
        self._range = _MASK
        self._out = bytearray()

    def encode(self, cum: int, freq: int, total: int) -> None:
        """Narrow the interval to [cum, cum+freq) / total."""
        if freq <= 0 or cum < 0 or cum + freq > total or total > MAX_TOTAL:
            raise ContractViolation(
                f"bad coder step cum={cum} freq={freq} total={total}"
            )
        r = self._range // total
        self._low += cum * r
        self._range = freq * r
        self._normalize()

    def encode_raw_u32(self, value: int) -> None:
        """Encode 32 raw bits as four uniform bytes (used for escapes)."""
        if not 0 <= value < (1 << 32):
            raise ContractViolation("raw value out of u32 range")
        for shift in (24, 16, 8, 0):
            b = (value >> shift) & 0xFF
            self.encode(b << 8, 1 << 8, 1 << 16)

    def _normalize(self):
        low, rng = self._low, self._range
        while True:
            if (low ^ (low + rng)) < _TOP:
                self._out.append(low >> 24)
            elif rng < _BOTTOM:
                # underflow: clamp range to the next 2^16 boundary; the top
                # byte is settled by construction (see module docstring)
                rng = (-low) & (_BOTTOM - 1)
                self._out.append(low >> 24)
            else:
                break
            low = (low << 8) & _MASK
            rng = (rng << 8)
        self._low, self._range = low, rng

    def finish(self) -> bytes:
        """Flush: emit the two top bytes of a value inside [low, low+range)."""
        v = -(-self._low // _BOTTOM) * _BOTTOM  # round low up to a 2^16 multiple
        if v > _MASK:
            v = (_MASK + 1) - _BOTTOM
        self._out.append((v >> 24) & 0xFF)
        self._out.append((v >> 16) & 0xFF)
        return bytes(self._out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._virtual = 0
        self._low = 0
        self._range = _MASK
        self._code = 0
        for _ in range(4):
            self._code = (self._code << 8) | self._next_byte()

    def _next_byte(self) -> int:
        if self._pos < len(self._data):
            b = self._data[self._pos]
            self._pos += 1
            return b
        self._virtual += 1
        if self._virtual > _VIRTUAL_ALLOWANCE:
            raise DecodeError("range-coded stream is truncated")
        return 0

    def decode_target(self, total: int) -> int:
        """Cumulative-frequency position of the pending symbol in [0, total)."""
        self._r = self._range // total
        t = (self._code - self._low) // self._r
        return min(int(t), total - 1)

    def consume(self, cum: int, freq: int) -> None:
        """Commit the symbol located by decode_target."""
        self._low += cum * self._r
        self._range = freq * self._r
        self._normalize()

    def decode_raw_u32(self) -> int:
        value = 0
        for _ in range(4):
            t = self.decode_target(1 << 16)
            b = t >> 8
            self.consume(b << 8, 1 << 8)
            value = (value << 8) | b
        return value

    def _normalize(self):
        low, rng = self._low, self._range
        while True:
            if (low ^ (low + rng)) < _TOP:
                pass
            elif rng < _BOTTOM:
                rng = (-low) & (_BOTTOM - 1)
            else:
                break
            self._code = ((self._code << 8) | self._next_byte()) & _MASK
            low = (low << 8) & _MASK
            rng = (rng << 8)
        self._low, self._range = low, rng


class AdaptiveByteModel:
    """256-symbol adaptive frequency model: increment 32, halving at 2^16."""

    INCREMENT = 32
    LIMIT = 1 << 16

    def __init__(self):
        self.freq = np.ones(256, dtype=np.int64)
        self.total = 256

    def cumulative(self) -> np.ndarray:
        cum = np.zeros(257, dtype=np.int64)
        np.cumsum(self.freq, out=cum[1:])
        return cum

    def update(self, symbol: int) -> None:
        self.freq[symbol] += self.INCREMENT
        self.total += self.INCREMENT
        if self.total >= self.LIMIT:
            self.freq -= self.freq >> 1  # halve, rounding up: stays >= 1
            self.total = int(self.freq.sum())


def encode_bytes_adaptive(data: bytes) -> bytes:
    """Range-code a byte string under an adaptive order-0 model."""
    model = AdaptiveByteModel()
    enc = RangeEncoder()
    for b in data:
        cum = model.cumulative()
        enc.encode(int(cum[b]), int(model.freq[b]), model.total)
        model.update(b)
    return enc.finish()


def decode_bytes_adaptive(data: bytes, count: int) -> bytes:
    model = AdaptiveByteModel()
    dec = RangeDecoder(data)
    out = bytearray()
    for _ in range(count):
        cum = model.cumulative()
        t = dec.decode_target(model.total)
        b = int(np.searchsorted(cum, t, side="right")) - 1
        dec.consume(int(cum[b]), int(model.freq[b]))
        model.update(b)
        out.append(b)
    return bytes(out)
