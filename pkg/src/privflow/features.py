"""Per-window flow features and the fixed-point seven-field record.

Each window of flows reduces to five features:

  mpf  median packets per flow
  mbf  median bytes per flow
  pcf  fraction of flows with a same-protocol reverse flow in the window
  gop  distinct port values (src and dst fields) per second of window
  gsi  distinct source addresses per second of window

together with two correlation keys (serial_number = domain id, time =
window start in whole seconds).  All seven travel as 33-bit words: bit 32 is
an overflow flag, bits 0..31 the value, features scaled to fixed point.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .bitpack import BitReader, BitWriter
from .flows import FlowWindow

ATTR_BITS = 33
ATTR_COUNT = 7
VALUE_MAX = (1 << 32) - 1  # largest value bits 0..31 can hold
WORD_MOD = 1 << 33
TUPLE_BLOCK_BYTES = 29  # 7 x 33 bits = 231, plus one pad bit


class EmptyInput(ValueError):
    pass


class FieldOverflow(ValueError):
    pass


@dataclass(frozen=True)
class FixedPointCodec:
    """Scales real-valued features into integer fixed point.

    stored = round(value * scale), Python round (ties to even), so a decoded
    value is within 1/(2*scale) of the original.
    """

    scale: int = 1000

    def __post_init__(self) -> None:
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def encode(self, value: float) -> int:
        return round(value * self.scale)

    def decode(self, stored: int) -> float:
        return stored / self.scale

    def encode_saturating(self, value: float) -> tuple[int, bool]:
        """Encode, clamping to the 32-bit value range; flag set on clamp."""
        stored = self.encode(value)
        if stored > VALUE_MAX:
            return VALUE_MAX, True
        return stored, False


@dataclass(frozen=True)
class FeatureTuple:
    """The seven-field record: two clear keys plus five fixed-point features.

    Field values hold bits 0..31 only; overflow_flags carries bit 32 of each
    of the seven attributes (flags for serial_number and time are always
    False, enforced at construction).
    """

    serial_number: int
    time: int
    mpf: int
    mbf: int
    pcf: int
    gop: int
    gsi: int
    overflow_flags: tuple[bool, bool, bool, bool, bool, bool, bool] = (
        False,
    ) * 7

    def __post_init__(self) -> None:
        for name, value in zip(_FIELD_NAMES, self._values()):
            if not 0 <= value <= VALUE_MAX:
                raise FieldOverflow(f"{name}={value} outside 32-bit value range")
        if len(self.overflow_flags) != ATTR_COUNT:
            raise ValueError("need exactly 7 overflow flags")
        if self.overflow_flags[0] or self.overflow_flags[1]:
            raise FieldOverflow("serial_number/time cannot overflow")

    def _values(self) -> tuple[int, ...]:
        return (
            self.serial_number,
            self.time,
            self.mpf,
            self.mbf,
            self.pcf,
            self.gop,
            self.gsi,
        )

    def words(self) -> tuple[int, ...]:
        """All seven attributes as 33-bit words (overflow flag in bit 32)."""
        return tuple(
            (int(flag) << 32) | value
            for flag, value in zip(self.overflow_flags, self._values())
        )

    def feature_words(self) -> tuple[int, int, int, int, int]:
        """The five feature attributes (mpf..gsi) as 33-bit words."""
        return self.words()[2:]

    @classmethod
    def from_words(cls, words: Sequence[int]) -> "FeatureTuple":
        if len(words) != ATTR_COUNT:
            raise ValueError("need exactly 7 words")
        for w in words:
            if not 0 <= w < WORD_MOD:
                raise FieldOverflow(f"word {w} does not fit in 33 bits")
        values = [w & VALUE_MAX for w in words]
        flags = tuple(bool(w >> 32) for w in words)
        return cls(*values, overflow_flags=flags)  # type: ignore[arg-type]


_FIELD_NAMES = ("serial_number", "time", "mpf", "mbf", "pcf", "gop", "gsi")


def median(values: Sequence[float]) -> float:
    """Median with ascending rank: X_((n+1)/2) for odd n, else the mean of
    the two middle elements."""
    if not values:
        raise EmptyInput("median of empty sequence")
    ranked = sorted(values)
    n = len(ranked)
    if n % 2:
        return ranked[(n + 1) // 2 - 1]
    return (ranked[n // 2 - 1] + ranked[n // 2]) / 2


def extract_features(window: FlowWindow, codec: FixedPointCodec) -> FeatureTuple:
    """Compute the five features of a window and fix-point encode them.

    An empty window yields zero features (keys stay live so downstream
    streams keep one record per window).  Any feature whose scaled value
    exceeds 32 bits saturates with its overflow flag set.
    """
    serial = window.domain_id
    time = window.window_start // 1000
    flows = window.flows
    n = len(flows)
    if n == 0:
        return FeatureTuple(serial, time, 0, 0, 0, 0, 0)

    t_seconds = window.window_length / 1000
    mpf = median([f.packets for f in flows])
    mbf = median([f.bytes for f in flows])

    directed = {(f.src_ip, f.dst_ip, f.protocol) for f in flows}
    interactive = sum(
        1 for f in flows if (f.dst_ip, f.src_ip, f.protocol) in directed
    )
    pcf = interactive / n

    ports = {f.src_port for f in flows} | {f.dst_port for f in flows}
    gop = len(ports) / t_seconds
    gsi = len({f.src_ip for f in flows}) / t_seconds

    values = []
    flags = [False, False]
    for raw in (mpf, mbf, pcf, gop, gsi):
        stored, overflowed = codec.encode_saturating(raw)
        values.append(stored)
        flags.append(overflowed)
    return FeatureTuple(serial, time, *values, overflow_flags=tuple(flags))


def encode_tuple(t: FeatureTuple) -> bytes:
    """Pack the seven 33-bit attributes MSB-first into 29 bytes.

    231 bits of payload plus one trailing zero pad bit.
    """
    writer = BitWriter()
    for word in t.words():
        writer.put(word, ATTR_BITS)
    writer.put(0, 1)
    return writer.getvalue()


def decode_tuple(block: bytes) -> FeatureTuple:
    if len(block) != TUPLE_BLOCK_BYTES:
        raise ValueError(f"tuple block must be {TUPLE_BLOCK_BYTES} bytes")
    reader = BitReader(block)
    words = [reader.take(ATTR_BITS) for _ in range(ATTR_COUNT)]
    return FeatureTuple.from_words(words)
