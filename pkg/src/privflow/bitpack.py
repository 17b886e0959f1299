"""MSB-first bit packing for the fixed-width wire formats.

Every record format in this package is a sequence of fixed-width unsigned
fields written most-significant-bit first, zero-padded at the end to a byte
boundary. struct cannot express 33-bit fields, so the writer/reader here do.
"""

from __future__ import annotations


class BitWriter:
    def __init__(self) -> None:
        self._out = bytearray()
        self._acc = 0
        self._nbits = 0

    def put(self, value: int, width: int) -> None:
        if value < 0 or value >> width:
            raise ValueError(f"value {value} does not fit in {width} bits")
        self._acc = (self._acc << width) | value
        self._nbits += width
        while self._nbits >= 8:
            self._nbits -= 8
            self._out.append((self._acc >> self._nbits) & 0xFF)
        self._acc &= (1 << self._nbits) - 1

    def getvalue(self) -> bytes:
        """Return the packed bytes, zero-padding the final partial byte."""
        out = bytes(self._out)
        if self._nbits:
            out += bytes([(self._acc << (8 - self._nbits)) & 0xFF])
        return out


class BitReader:
    def __init__(self, data: bytes) -> None:
        self._data = data
        self._pos = 0  # bit offset from the start

    def take(self, width: int) -> int:
        end = self._pos + width
        if end > len(self._data) * 8:
            raise ValueError("bit stream exhausted")
        value = 0
        pos = self._pos
        remaining = width
        while remaining:
            byte = self._data[pos // 8]
            offset = pos % 8
            avail = 8 - offset
            grab = min(avail, remaining)
            chunk = (byte >> (avail - grab)) & ((1 << grab) - 1)
            value = (value << grab) | chunk
            pos += grab
            remaining -= grab
        self._pos = end
        return value

    def remaining_bits(self) -> int:
        return len(self._data) * 8 - self._pos
