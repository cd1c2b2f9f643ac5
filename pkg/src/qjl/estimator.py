"""Sign-bit key quantizer, bit-packed sign storage, and the asymmetric
inner-product estimator.

A key k is stored as the sign pattern of its sketch projection together with
its Euclidean norm; a query keeps its full-precision projection. The
estimator sqrt(pi/2)/m * ||k|| * <Sq, sign(Sk)> is evaluated on the packed
bits directly, as the difference between the query-projection sums over set
and unset bits (algebraically 2 * sum-over-set-bits minus the total sum).

Packed layout: contiguous little-endian 64-bit words, LSB-first, so bit j of
word w holds sign index 64*w + j; padding bits in the final word are zero.
This layout is shared with the cache serialization format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .sketch import SketchMatrix

WORD_BITS = 64
_WORD_DTYPE = np.dtype("<u8")

ESTIMATOR_SCALE = math.sqrt(math.pi / 2)


def _words_for(m: int) -> int:
    return (m + WORD_BITS - 1) // WORD_BITS


def _pack_bool(flags: np.ndarray) -> np.ndarray:
    """Pack a boolean vector into little-endian uint64 words, LSB-first."""
    packed_bytes = np.packbits(flags, bitorder="little")
    buf = np.zeros(_words_for(flags.size) * 8, dtype=np.uint8)
    buf[: packed_bytes.size] = packed_bytes
    words = buf.view(_WORD_DTYPE)
    words.setflags(write=False)
    return words


def _unpack_bool(words: np.ndarray, m: int) -> np.ndarray:
    raw = np.ascontiguousarray(words, dtype=_WORD_DTYPE).view(np.uint8)
    return np.unpackbits(raw, count=m, bitorder="little").astype(bool)


def pack_signs(signs: np.ndarray) -> np.ndarray:
    """Pack a length-m vector of +/-1 values into uint64 words.

    Bit value 1 encodes +1, 0 encodes -1. Padding bits beyond m are zero.
    """
    signs = np.asarray(signs)
    if signs.ndim != 1 or signs.size == 0:
        raise ValueError("signs must be a non-empty 1-D vector")
    if not np.all(np.abs(signs) == 1):
        raise ValueError("signs must contain only +1 and -1")
    return _pack_bool(signs > 0)


def unpack_signs(words: np.ndarray, m: int) -> np.ndarray:
    """Inverse of pack_signs: recover the +/-1 vector of length m."""
    words = np.asarray(words)
    if m < 1:
        raise ValueError(f"m must be positive, got {m}")
    if words.size != _words_for(m):
        raise ValueError(
            f"bit count mismatch: {words.size} words cannot hold exactly m={m} signs"
        )
    return np.where(_unpack_bool(words, m), 1, -1).astype(np.int8)


@dataclass(frozen=True, eq=False)
class QuantizedKey:
    """m packed sign bits plus the Euclidean norm of the original key.

    ``m == 0`` is the degenerate key of an empty channel split: no bits,
    norm 0, and every estimate involving it is 0.
    """

    bits: np.ndarray
    norm: float
    m: int

    def __post_init__(self) -> None:
        if self.m < 0:
            raise ValueError("m must be non-negative")
        if self.bits.size != _words_for(self.m):
            raise ValueError("packed bit array length does not match m")
        if self.norm < 0:
            raise ValueError("key norm must be non-negative")


EMPTY_KEY = QuantizedKey(bits=np.empty(0, dtype=_WORD_DTYPE), norm=0.0, m=0)


@dataclass(frozen=True, eq=False)
class SketchedQuery:
    """Full-precision query projection S @ q; the query side is never quantized."""

    values: np.ndarray
    source_dim: int

    @property
    def m(self) -> int:
        return self.values.shape[0]


def quantize_key(sketch: SketchMatrix, key: np.ndarray) -> QuantizedKey:
    """Map a key to its packed sign pattern under the sketch, plus its norm.

    Bit i is 1 iff (S @ k)[i] >= 0; a projection of exactly 0 counts as +1
    so results are deterministic.
    """
    key = np.asarray(key, dtype=np.float64)
    if key.shape != (sketch.d,):
        raise ValueError(f"key has shape {key.shape}, expected ({sketch.d},)")
    projection = sketch.entries @ key
    return QuantizedKey(
        bits=_pack_bool(projection >= 0),
        norm=float(np.linalg.norm(key)),
        m=sketch.m,
    )


def sketch_query(sketch: SketchMatrix, query: np.ndarray) -> SketchedQuery:
    """Exact projection S @ q in double precision."""
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (sketch.d,):
        raise ValueError(f"query has shape {query.shape}, expected ({sketch.d},)")
    return SketchedQuery(values=sketch.entries @ query, source_dim=sketch.d)


def packed_sign_dot(values: np.ndarray, words: np.ndarray, m: int) -> float:
    """<values, signs> for packed sign bits, without materializing +/-1 floats.

    Computed as sum(values over set bits) - sum(values over unset bits),
    accumulated in double precision. The difference form makes negating all
    bits negate the result exactly.
    """
    if m == 0:
        return 0.0
    values = np.asarray(values, dtype=np.float64)
    mask = _unpack_bool(words, m)
    return float(values[mask].sum() - values[~mask].sum())


def packed_sign_dot_batch(
    word_rows: np.ndarray, m: int, values: np.ndarray, chunk: int = 4096
) -> np.ndarray:
    """Row-wise packed_sign_dot for an (n, words) matrix of packed bits.

    Unpacks and multiplies in bounded-size chunks; accumulation stays in
    double precision. Agrees with packed_sign_dot up to float reassociation.
    """
    word_rows = np.ascontiguousarray(word_rows, dtype=_WORD_DTYPE)
    values = np.asarray(values, dtype=np.float64)
    n = word_rows.shape[0]
    out = np.empty(n, dtype=np.float64)
    if m == 0:
        out.fill(0.0)
        return out
    total = values.sum()
    for start in range(0, n, chunk):
        rows = word_rows[start : start + chunk]
        raw = rows.view(np.uint8).reshape(rows.shape[0], -1)
        mask = np.unpackbits(raw, axis=1, count=m, bitorder="little")
        out[start : start + rows.shape[0]] = 2.0 * (mask @ values) - total
    return out


def estimate_inner_product(query: SketchedQuery, key: QuantizedKey) -> float:
    """Unbiased estimate of <q, k> from the sketched query and quantized key.

    Returns sqrt(pi/2)/m * ||k|| * <Sq, sign(Sk)>. A zero-norm or
    zero-dimension key yields exactly 0.
    """
    if query.m != key.m:
        raise ValueError(
            f"length mismatch: query has {query.m} coordinates, key has {key.m}"
        )
    if key.m == 0 or key.norm == 0.0:
        return 0.0
    raw = packed_sign_dot(query.values, key.bits, key.m)
    return ESTIMATOR_SCALE / key.m * key.norm * raw
