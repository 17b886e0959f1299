"""Additive masking of feature tuples, mod 2^33.

Masking is a group operation: each of the five feature words gets an
independent uniform 33-bit value added mod 2^33, which makes the masked word
itself uniform.  The two correlation keys (serial_number, time) stay clear so
the two server-side halves can be joined.  Removal is exact only with the
matching mask vector.
"""

from __future__ import annotations

import random
import secrets
from dataclasses import dataclass

from .bitpack import BitReader, BitWriter
from .features import (
    ATTR_BITS,
    FeatureTuple,
    TUPLE_BLOCK_BYTES,
    WORD_MOD,
)

FEATURE_ATTRS = 5
_SIGN_BOUND = 1 << 32  # words below this decode as non-negative differences


class KeyMismatch(ValueError):
    pass


class EntropyUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class MaskVector:
    serial_number: int
    time: int
    masks: tuple[int, int, int, int, int]

    def __post_init__(self) -> None:
        if len(self.masks) != FEATURE_ATTRS:
            raise ValueError("need exactly 5 masks")
        for m in self.masks:
            if not 0 <= m < WORD_MOD:
                raise ValueError("masks must be 33-bit")


@dataclass(frozen=True)
class MaskedTuple:
    serial_number: int
    time: int
    masked_features: tuple[int, int, int, int, int]

    def __post_init__(self) -> None:
        if len(self.masked_features) != FEATURE_ATTRS:
            raise ValueError("need exactly 5 masked features")
        for v in self.masked_features:
            if not 0 <= v < WORD_MOD:
                raise ValueError("masked features must be 33-bit")


def gen_masks(
    serial_number: int, time: int, rng: random.Random | None = None
) -> MaskVector:
    """Draw five independent uniform 33-bit masks.

    A seeded random.Random makes the stream reproducible (test mode);
    without one the masks come from system entropy.
    """
    if rng is not None:
        draws = tuple(rng.getrandbits(ATTR_BITS) for _ in range(FEATURE_ATTRS))
    else:
        try:
            draws = tuple(secrets.randbits(ATTR_BITS) for _ in range(FEATURE_ATTRS))
        except NotImplementedError as exc:
            raise EntropyUnavailable("no entropy source available") from exc
    return MaskVector(serial_number, time, draws)


def apply_mask(t: FeatureTuple, m: MaskVector) -> MaskedTuple:
    """Per-attribute addition mod 2^33; keys pass through in clear."""
    if (t.serial_number, t.time) != (m.serial_number, m.time):
        raise KeyMismatch(
            f"tuple key ({t.serial_number}, {t.time}) != "
            f"mask key ({m.serial_number}, {m.time})"
        )
    masked = tuple(
        (word + mask) % WORD_MOD for word, mask in zip(t.feature_words(), m.masks)
    )
    return MaskedTuple(t.serial_number, t.time, masked)


def remove_mask(masked: MaskedTuple, m: MaskVector) -> FeatureTuple:
    """Invert apply_mask, reconstructing the original tuple."""
    if (masked.serial_number, masked.time) != (m.serial_number, m.time):
        raise KeyMismatch(
            f"masked key ({masked.serial_number}, {masked.time}) != "
            f"mask key ({m.serial_number}, {m.time})"
        )
    words = (
        (masked.serial_number, masked.time)
        + tuple(
            (value - mask) % WORD_MOD
            for value, mask in zip(masked.masked_features, m.masks)
        )
    )
    return FeatureTuple.from_words(words)


def remove_mask_from_difference(perturbed_diff: int, mask: int) -> int:
    """Recover the signed difference d = train - test from a masked one.

    perturbed_diff is (train - test - mask) mod 2^33; adding the mask back
    and reading the result as 33-bit two's complement yields d exactly
    whenever |d| < 2^32.
    """
    word = (perturbed_diff + mask) % WORD_MOD
    return word - WORD_MOD if word >= _SIGN_BOUND else word


def encode_mask_vector(m: MaskVector) -> bytes:
    """serial || time || 5 masks, 33 bits each, padded to 29 bytes."""
    writer = BitWriter()
    writer.put(m.serial_number, ATTR_BITS)
    writer.put(m.time, ATTR_BITS)
    for mask in m.masks:
        writer.put(mask, ATTR_BITS)
    writer.put(0, 1)
    return writer.getvalue()


def decode_mask_vector(block: bytes) -> MaskVector:
    if len(block) != TUPLE_BLOCK_BYTES:
        raise ValueError(f"mask block must be {TUPLE_BLOCK_BYTES} bytes")
    reader = BitReader(block)
    serial = reader.take(ATTR_BITS)
    time = reader.take(ATTR_BITS)
    masks = tuple(reader.take(ATTR_BITS) for _ in range(FEATURE_ATTRS))
    return MaskVector(serial, time, masks)


def encode_masked_tuple(mt: MaskedTuple) -> bytes:
    """Same 29-byte layout as the clear tuple block."""
    writer = BitWriter()
    writer.put(mt.serial_number, ATTR_BITS)
    writer.put(mt.time, ATTR_BITS)
    for value in mt.masked_features:
        writer.put(value, ATTR_BITS)
    writer.put(0, 1)
    return writer.getvalue()


def decode_masked_tuple(block: bytes) -> MaskedTuple:
    if len(block) != TUPLE_BLOCK_BYTES:
        raise ValueError(f"masked tuple block must be {TUPLE_BLOCK_BYTES} bytes")
    reader = BitReader(block)
    serial = reader.take(ATTR_BITS)
    time = reader.take(ATTR_BITS)
    values = tuple(reader.take(ATTR_BITS) for _ in range(FEATURE_ATTRS))
    return MaskedTuple(serial, time, values)
