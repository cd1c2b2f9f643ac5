"""Streaming key-cache quantizer with outlier-channel splitting, token-wise
value quantizer, memory accounting, and the binary cache format.

Keys are split into inlier and outlier channels (detected once over the
prompt), each side quantized by its own independently seeded sketch, and
appended to an immutable entry stream. Scores for a query are the softmax of
the summed per-side inner-product estimates.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .estimator import (
    EMPTY_KEY,
    ESTIMATOR_SCALE,
    QuantizedKey,
    SketchedQuery,
    packed_sign_dot_batch,
    quantize_key,
    sketch_query,
)
from .sketch import SketchMatrix, derive_seed, generate_gaussian, orthogonalize

INLIER_STREAM = 0
OUTLIER_STREAM = 1

DEFAULT_OUTLIER_BITS_PER_CHANNEL = 8


class FileFormatError(Exception):
    """A binary file failed magic/version/length validation."""


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax (max-subtracted, double precision)."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max()
    weights = np.exp(shifted)
    weights /= weights.sum()
    return weights


@dataclass(frozen=True, eq=False)
class ScoreVector:
    """Softmax-normalized attention weights over cached tokens."""

    weights: np.ndarray

    def __post_init__(self) -> None:
        if self.weights.ndim != 1 or self.weights.size == 0:
            raise ValueError("scores must be a non-empty 1-D vector")
        if np.any(self.weights < 0):
            raise ValueError("scores must be non-negative")
        if abs(float(self.weights.sum()) - 1.0) > 1e-6:
            raise ValueError("scores must sum to 1 within 1e-6")

    @property
    def n(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True, eq=False)
class OutlierProfile:
    """Top-h channels by mean absolute magnitude over the prompt."""

    channels: tuple[int, ...]
    d: int
    channel_magnitudes: np.ndarray

    def __post_init__(self) -> None:
        if any(c < 0 or c >= self.d for c in self.channels):
            raise ValueError("outlier channels must lie in [0, d)")
        if list(self.channels) != sorted(set(self.channels)):
            raise ValueError("outlier channels must be sorted and unique")
        if self.channel_magnitudes.shape != (self.d,):
            raise ValueError("channel magnitudes must have one entry per channel")

    @property
    def h(self) -> int:
        return len(self.channels)

    @property
    def outlier_index(self) -> np.ndarray:
        return np.asarray(self.channels, dtype=np.intp)

    @property
    def inlier_index(self) -> np.ndarray:
        mask = np.ones(self.d, dtype=bool)
        mask[self.outlier_index] = False
        return np.flatnonzero(mask)

    def split(self, vector: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a d-vector into (inlier part, outlier part)."""
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.d,):
            raise ValueError(f"vector has shape {vector.shape}, expected ({self.d},)")
        return vector[self.inlier_index], vector[self.outlier_index]


def detect_outliers(prompt_keys: np.ndarray, h: int) -> OutlierProfile:
    """Pick the h channels with largest mean |value| across prompt tokens.

    Ties break toward the lower channel index. h may be 0 (no outliers) or
    d (every channel treated as an outlier).
    """
    prompt_keys = np.asarray(prompt_keys, dtype=np.float64)
    if prompt_keys.ndim != 2 or prompt_keys.shape[0] == 0:
        raise ValueError("prompt keys must be a non-empty n x d matrix")
    d = prompt_keys.shape[1]
    if not 0 <= h <= d:
        raise ValueError(f"outlier count must be in [0, {d}], got {h}")
    magnitudes = np.abs(prompt_keys).mean(axis=0)
    magnitudes.setflags(write=False)
    order = np.lexsort((np.arange(d), -magnitudes))
    return OutlierProfile(
        channels=tuple(sorted(int(c) for c in order[:h])),
        d=d,
        channel_magnitudes=magnitudes,
    )


@dataclass(frozen=True, eq=False)
class QuantizedValueToken:
    """Per-token integer codes with an affine zero point and scale."""

    codes: np.ndarray
    zero: float
    scale: float
    bits: int

    @property
    def d(self) -> int:
        return self.codes.shape[0]


def quantize_value(values: np.ndarray, bits: int) -> QuantizedValueToken:
    """Token-wise affine quantization to ``bits``-bit integer codes.

    zero = min(v), scale = (max(v) - min(v)) / (2^bits - 1), codes rounded
    half-to-even. A constant token gets scale 0 and all-zero codes.
    """
    if not 1 <= bits <= 8:
        raise ValueError(f"value bit width must be in [1, 8], got {bits}")
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("value token must be a non-empty 1-D vector")
    zero = float(values.min())
    spread = float(values.max()) - zero
    levels = (1 << bits) - 1
    if spread == 0.0:
        codes = np.zeros(values.size, dtype=np.uint8)
        scale = 0.0
    else:
        scale = spread / levels
        codes = np.clip(np.round((values - zero) / scale), 0, levels).astype(np.uint8)
    codes.setflags(write=False)
    return QuantizedValueToken(codes=codes, zero=zero, scale=scale, bits=bits)


def dequantize_value(token: QuantizedValueToken) -> np.ndarray:
    """Invert quantize_value: zero + code * scale per coordinate."""
    return token.zero + token.codes.astype(np.float64) * token.scale


@dataclass(frozen=True)
class MemoryReport:
    """Average storage bits per original floating-point number."""

    key_bits_per_fpn: float
    value_bits_per_fpn: float
    total_bits_per_fpn: float
    baseline_bits: float
    reduction_factor: float

    def as_dict(self) -> dict[str, float]:
        return {
            "key_bits_per_fpn": self.key_bits_per_fpn,
            "value_bits_per_fpn": self.value_bits_per_fpn,
            "total_bits_per_fpn": self.total_bits_per_fpn,
            "baseline_bits": self.baseline_bits,
            "reduction_factor": self.reduction_factor,
        }


class KeyCacheState:
    """Append-only stream of quantized keys under a fixed outlier profile.

    Writes (append) must come from a single writer; reads may run
    concurrently and always observe a consistent prefix. Entries are never
    mutated, so estimates for a token are identical before and after later
    appends.
    """

    def __init__(
        self,
        profile: OutlierProfile,
        inlier_sketch: SketchMatrix | None,
        outlier_sketch: SketchMatrix | None,
        seed: int = 0,
        orthogonalized: bool = False,
    ) -> None:
        d_in = profile.d - profile.h
        if (inlier_sketch is None) != (d_in == 0):
            raise ValueError("inlier sketch must be present exactly when d - h > 0")
        if (outlier_sketch is None) != (profile.h == 0):
            raise ValueError("outlier sketch must be present exactly when h > 0")
        if inlier_sketch is not None and inlier_sketch.d != d_in:
            raise ValueError(
                f"inlier sketch covers {inlier_sketch.d} channels, expected {d_in}"
            )
        if outlier_sketch is not None and outlier_sketch.d != profile.h:
            raise ValueError(
                f"outlier sketch covers {outlier_sketch.d} channels, expected {profile.h}"
            )
        if profile.h > 0 and d_in > 0:
            m_in = inlier_sketch.m
            m_out = outlier_sketch.m
            if m_out * d_in < m_in * profile.h:
                raise ValueError(
                    "outlier bit rate below inlier bit rate: "
                    f"m_out/h = {m_out}/{profile.h} < m_in/(d-h) = {m_in}/{d_in}"
                )
        self.profile = profile
        self.inlier_sketch = inlier_sketch
        self.outlier_sketch = outlier_sketch
        self.seed = int(seed)
        self.orthogonalized = bool(orthogonalized)
        self._entries: list[tuple[QuantizedKey, QuantizedKey]] = []

    @classmethod
    def create(
        cls,
        profile: OutlierProfile,
        m_in: int,
        m_out: int | None = None,
        seed: int = 0,
        orthogonalize_sketches: bool = True,
    ) -> "KeyCacheState":
        """Build a state with sub-sketches seeded from one master seed.

        The inlier and outlier sketches use seeds derived as
        derive_seed(seed, 0) and derive_seed(seed, 1). m_out defaults to 8
        bits per outlier channel. When a side covers zero channels its
        sketch is omitted and its sub-keys are empty.
        """
        h = profile.h
        d_in = profile.d - h
        if m_out is None:
            m_out = DEFAULT_OUTLIER_BITS_PER_CHANNEL * h

        def build(m: int, d: int, stream: int) -> SketchMatrix | None:
            if d == 0:
                return None
            sketch = generate_gaussian(m, d, derive_seed(seed, stream))
            return orthogonalize(sketch) if orthogonalize_sketches else sketch

        return cls(
            profile=profile,
            inlier_sketch=build(m_in, d_in, INLIER_STREAM),
            outlier_sketch=build(m_out, h, OUTLIER_STREAM),
            seed=seed,
            orthogonalized=orthogonalize_sketches,
        )

    @property
    def n(self) -> int:
        return len(self._entries)

    @property
    def d(self) -> int:
        return self.profile.d

    @property
    def h(self) -> int:
        return self.profile.h

    @property
    def m_in(self) -> int:
        return 0 if self.inlier_sketch is None else self.inlier_sketch.m

    @property
    def m_out(self) -> int:
        return 0 if self.outlier_sketch is None else self.outlier_sketch.m

    @property
    def entries(self) -> tuple[tuple[QuantizedKey, QuantizedKey], ...]:
        return tuple(self._entries)

    def append(self, key: np.ndarray) -> None:
        """Split a key by the profile, quantize each side, and append."""
        inlier_part, outlier_part = self.profile.split(key)
        inlier_key = (
            quantize_key(self.inlier_sketch, inlier_part)
            if self.inlier_sketch is not None
            else EMPTY_KEY
        )
        outlier_key = (
            quantize_key(self.outlier_sketch, outlier_part)
            if self.outlier_sketch is not None
            else EMPTY_KEY
        )
        self._entries.append((inlier_key, outlier_key))

    def _append_quantized(self, entry: tuple[QuantizedKey, QuantizedKey]) -> None:
        self._entries.append(entry)

    def _side_logits(
        self, sketch: SketchMatrix | None, query_part: np.ndarray, side: int
    ) -> np.ndarray:
        if sketch is None:
            return np.zeros(self.n, dtype=np.float64)
        sketched = sketch_query(sketch, query_part)
        words = np.stack([entry[side].bits for entry in self._entries])
        norms = np.array([entry[side].norm for entry in self._entries])
        raw = packed_sign_dot_batch(words, sketch.m, sketched.values)
        return ESTIMATOR_SCALE / sketch.m * norms * raw

    def estimate_logits(self, query: np.ndarray) -> np.ndarray:
        """Per-token inner-product estimates <q, k_j>, inlier + outlier parts."""
        if self.n == 0:
            raise ValueError("cache is empty; append at least one key first")
        query_in, query_out = self.profile.split(query)
        return self._side_logits(self.inlier_sketch, query_in, 0) + self._side_logits(
            self.outlier_sketch, query_out, 1
        )

    def estimate_scores(
        self, query: np.ndarray, temperature: float = 1.0
    ) -> ScoreVector:
        """Softmax of the estimated logits, optionally temperature-scaled."""
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        return ScoreVector(weights=softmax(self.estimate_logits(query) / temperature))

    def memory_report(
        self,
        value_bits: int,
        norm_bits: int = 16,
        zero_bits: int = 16,
        scale_bits: int = 16,
    ) -> MemoryReport:
        """Bits-per-FPN breakdown against a 16-bit baseline.

        Key side counts the packed sign bits of both sub-sketches plus two
        stored norms per token; value side counts the integer codes plus the
        per-token zero point and scale.
        """
        if self.n == 0:
            raise ValueError("memory report requires a non-empty cache")
        d = float(self.d)
        key_bits = (self.m_in + self.m_out + 2 * norm_bits) / d
        value_bits_per_fpn = value_bits + (zero_bits + scale_bits) / d
        total = (key_bits + value_bits_per_fpn) / 2.0
        baseline = 16.0
        return MemoryReport(
            key_bits_per_fpn=key_bits,
            value_bits_per_fpn=value_bits_per_fpn,
            total_bits_per_fpn=total,
            baseline_bits=baseline,
            reduction_factor=baseline / total,
        )


CACHE_MAGIC = b"QJLC"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHHIIIIQHHQ")
_FLAG_ORTHOGONALIZED = 1


@dataclass(frozen=True)
class CacheHeader:
    """Decoded header fields of a cache file."""

    version: int
    d: int
    h: int
    m_in: int
    m_out: int
    n: int
    value_bits: int
    seed: int
    orthogonalized: bool


def write_cache(
    path,
    state: KeyCacheState,
    value_tokens: list[QuantizedValueToken],
) -> None:
    """Serialize a key-cache state and its value tokens.

    Layout (little-endian throughout): header, outlier channels (u32 each),
    per-channel magnitudes (f64), then per token in append order: inlier
    sign words, inlier norm (f16), outlier sign words, outlier norm (f16),
    value codes (one byte each), zero point (f32), scale (f32). Sketches are
    regenerated from the stored seed on load.
    """
    if state.n == 0:
        raise ValueError("refusing to serialize an empty cache")
    if len(value_tokens) != state.n:
        raise ValueError(
            f"value token count {len(value_tokens)} does not match cache length {state.n}"
        )
    bits = value_tokens[0].bits
    if any(t.bits != bits or t.d != state.d for t in value_tokens):
        raise ValueError("value tokens must share one bit width and dimension")
    flags = _FLAG_ORTHOGONALIZED if state.orthogonalized else 0
    header = _CACHE_HEADER.pack(
        CACHE_MAGIC,
        CACHE_VERSION,
        flags,
        state.d,
        state.h,
        state.m_in,
        state.m_out,
        state.n,
        bits,
        0,
        state.seed,
    )
    parts = [header]
    parts.append(np.asarray(state.profile.channels, dtype="<u4").tobytes())
    parts.append(state.profile.channel_magnitudes.astype("<f8").tobytes())
    for (inlier_key, outlier_key), token in zip(state.entries, value_tokens):
        parts.append(inlier_key.bits.astype("<u8").tobytes())
        parts.append(np.array(inlier_key.norm, dtype="<f2").tobytes())
        parts.append(outlier_key.bits.astype("<u8").tobytes())
        parts.append(np.array(outlier_key.norm, dtype="<f2").tobytes())
        parts.append(token.codes.astype(np.uint8).tobytes())
        parts.append(np.array(token.zero, dtype="<f4").tobytes())
        parts.append(np.array(token.scale, dtype="<f4").tobytes())
    with open(path, "wb") as handle:
        handle.write(b"".join(parts))


def read_cache(path) -> tuple[KeyCacheState, list[QuantizedValueToken], CacheHeader]:
    """Load a cache file written by write_cache.

    Norms come back at half precision (the storage policy for serialized
    caches); sketches are regenerated deterministically from the header.
    """
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < _CACHE_HEADER.size:
        raise FileFormatError("cache file shorter than its header")
    magic, version, flags, d, h, m_in, m_out, n, value_bits, _, seed = (
        _CACHE_HEADER.unpack_from(blob)
    )
    if magic != CACHE_MAGIC:
        raise FileFormatError(f"bad magic {magic!r}, expected {CACHE_MAGIC!r}")
    if version != CACHE_VERSION:
        raise FileFormatError(f"unsupported cache version {version}")
    orthogonalized = bool(flags & _FLAG_ORTHOGONALIZED)
    words_in = (m_in + 63) // 64
    words_out = (m_out + 63) // 64
    record = 8 * words_in + 2 + 8 * words_out + 2 + d + 4 + 4
    expected = _CACHE_HEADER.size + 4 * h + 8 * d + n * record
    if len(blob) != expected:
        raise FileFormatError(
            f"cache payload length {len(blob)} does not match header (expected {expected})"
        )
    offset = _CACHE_HEADER.size
    channels = np.frombuffer(blob, dtype="<u4", count=h, offset=offset)
    offset += 4 * h
    magnitudes = np.frombuffer(blob, dtype="<f8", count=d, offset=offset).copy()
    offset += 8 * d
    magnitudes.setflags(write=False)
    profile = OutlierProfile(
        channels=tuple(int(c) for c in channels),
        d=d,
        channel_magnitudes=magnitudes,
    )
    state = KeyCacheState.create(
        profile,
        m_in=m_in,
        m_out=m_out if h > 0 else 0,
        seed=seed,
        orthogonalize_sketches=orthogonalized,
    )

    def read_key(words: int, m: int) -> QuantizedKey:
        nonlocal offset
        bits = np.frombuffer(blob, dtype="<u8", count=words, offset=offset).copy()
        bits.setflags(write=False)
        offset += 8 * words
        norm = float(np.frombuffer(blob, dtype="<f2", count=1, offset=offset)[0])
        offset += 2
        return QuantizedKey(bits=bits, norm=norm, m=m) if m > 0 else EMPTY_KEY

    value_tokens: list[QuantizedValueToken] = []
    for _ in range(n):
        inlier_key = read_key(words_in, m_in)
        outlier_key = read_key(words_out, m_out)
        state._append_quantized((inlier_key, outlier_key))
        codes = np.frombuffer(blob, dtype=np.uint8, count=d, offset=offset).copy()
        codes.setflags(write=False)
        offset += d
        zero = float(np.frombuffer(blob, dtype="<f4", count=1, offset=offset)[0])
        offset += 4
        scale = float(np.frombuffer(blob, dtype="<f4", count=1, offset=offset)[0])
        offset += 4
        value_tokens.append(
            QuantizedValueToken(codes=codes, zero=zero, scale=scale, bits=value_bits)
        )
    header = CacheHeader(
        version=version,
        d=d,
        h=h,
        m_in=m_in,
        m_out=m_out,
        n=n,
        value_bits=value_bits,
        seed=seed,
        orthogonalized=orthogonalized,
    )
    return state, value_tokens, header
