"""Seeded Gaussian projection matrices and row-orthogonalized variants.

All randomness flows through numpy's Philox counter-based bit generator keyed
by a 64-bit seed, with normal draws from the Generator's ziggurat sampler.
Both are fixed per release, so the same (m, d, seed) reproduces the same
matrix bit for bit on every platform.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def derive_seed(master: int, stream: int) -> int:
    """Derive an independent 64-bit seed from a master seed and a stream id.

    Uses the SplitMix64 finalizer over ``master + GAMMA * (stream + 1)``.
    The algorithm is fixed so derived streams are reproducible everywhere;
    distinct stream ids give statistically independent seeds.
    """
    x = (int(master) + _GAMMA * (int(stream) + 1)) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


def rng_from_seed(seed: int) -> np.random.Generator:
    """Philox generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & _MASK64))


@dataclass(frozen=True, eq=False)
class SketchMatrix:
    """An m x d real random projection with seed provenance.

    ``entries`` is read-only; instances are immutable and safe to share
    across threads. ``orthogonalized`` records whether rows were
    orthogonalized after the Gaussian draw.
    """

    entries: np.ndarray
    seed: int
    orthogonalized: bool = False

    def __post_init__(self) -> None:
        if self.entries.ndim != 2:
            raise ValueError("sketch entries must be a 2-D array")

    @property
    def m(self) -> int:
        return self.entries.shape[0]

    @property
    def d(self) -> int:
        return self.entries.shape[1]


def generate_gaussian(m: int, d: int, seed: int) -> SketchMatrix:
    """Draw an m x d matrix of i.i.d. standard normal entries.

    Deterministic in (m, d, seed): the same arguments always produce a
    bit-identical matrix.

    Raises:
        ValueError: if m or d is not a positive integer.
    """
    if m < 1 or d < 1:
        raise ValueError(f"sketch dimensions must be positive, got m={m}, d={d}")
    entries = rng_from_seed(seed).standard_normal((m, d))
    entries.setflags(write=False)
    return SketchMatrix(entries=entries, seed=int(seed), orthogonalized=False)


def orthogonalize(sketch: SketchMatrix) -> SketchMatrix:
    """Orthogonalize the rows of a Gaussian sketch, block by block.

    Rows are processed in independent blocks of at most d rows; each block
    is orthogonalized by QR decomposition of its transpose, with the usual
    sign correction so the factor is a deterministic function of the input.
    Every output row is rescaled to norm sqrt(d), the root-mean-square norm
    of a d-dimensional standard Gaussian row, so estimators built on the
    Gaussian scaling need no adjustment. Rows in different blocks are not
    orthogonal to each other.
    """
    m, d = sketch.m, sketch.d
    out = np.empty((m, d), dtype=np.float64)
    scale = np.sqrt(d)
    for start in range(0, m, d):
        block = sketch.entries[start : start + d]
        q, r = np.linalg.qr(block.T)
        sign = np.sign(np.diag(r))
        sign[sign == 0] = 1.0
        out[start : start + block.shape[0]] = (q * sign).T * scale
    out.setflags(write=False)
    return SketchMatrix(entries=out, seed=sketch.seed, orthogonalized=True)
