"""Statistical validation trials and synthetic workload generation.

Each trial suite fans a master seed out to per-trial seeds, so reports are
fully determined by their TrialConfig and independent of execution order.
Pass bands are pre-registered: 4 standard errors for mean tests, the target
failure probability itself for tail tests, a 99%-of-draws acceptance for the
score-distortion bound, and a 1.05 variance-ratio ceiling for the
orthogonalized-versus-i.i.d. comparison.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .estimator import estimate_inner_product, quantize_key, sketch_query
from .kvcache import KeyCacheState, detect_outliers, softmax
from .sketch import (
    SketchMatrix,
    derive_seed,
    generate_gaussian,
    orthogonalize,
    rng_from_seed,
)

DISTRIBUTIONS = ("sphere", "gaussian", "outlier")

PLANTED_CHANNEL_COUNT = 4
DEFAULT_OUTLIER_FACTOR = 10.0

MEAN_Z_BOUND = 4.0
SCORE_DRAW_ACCEPTANCE = 0.99
VARIANCE_RATIO_BOUND = 1.05

# Stream ids for draws that are not per-trial.
_STREAM_KEYS = 0
_STREAM_VALUES = 1
_STREAM_QUERIES = 2
_STREAM_CHANNELS = 3
_STREAM_PAIR = 1 << 62


@dataclass(frozen=True)
class TrialConfig:
    """Parameters shared by the trial suites.

    ``orthogonalize`` selects the sketch variant under test; the
    orthogonal-comparison suite ignores it and always runs both.
    """

    d: int = 64
    m: int = 8
    n: int = 256
    epsilon: float = 0.25
    delta: float = 0.01
    trials: int = 10000
    seed: int = 0
    distribution: str = "sphere"
    orthogonalize: bool = True

    def __post_init__(self) -> None:
        if self.d < 1 or self.m < 1 or self.n < 1:
            raise ValueError("d, m, and n must be positive")
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.trials < 100:
            raise ValueError(f"trial count must be at least 100, got {self.trials}")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(
                f"unknown distribution {self.distribution!r}; choose from {DISTRIBUTIONS}"
            )


@dataclass
class TrialReport:
    """Flat, reproducible summary of one trial suite."""

    suite: str
    passed: bool
    trials: int
    mean_estimate: float | None = None
    true_value: float | None = None
    stderr: float | None = None
    z_score: float | None = None
    failure_fraction: float | None = None
    threshold: float | None = None
    fraction_within_bound: float | None = None
    variance_ratio: float | None = None
    score_error_percentiles: dict[str, float] = field(default_factory=dict)

    def to_row(self) -> dict[str, object]:
        """One flat key-value record, suitable for a CSV row."""
        row: dict[str, object] = {
            "suite": self.suite,
            "passed": self.passed,
            "trials": self.trials,
            "mean_estimate": self.mean_estimate,
            "true_value": self.true_value,
            "stderr": self.stderr,
            "z_score": self.z_score,
            "failure_fraction": self.failure_fraction,
            "threshold": self.threshold,
            "fraction_within_bound": self.fraction_within_bound,
            "variance_ratio": self.variance_ratio,
        }
        for name, value in self.score_error_percentiles.items():
            row[f"score_err_{name}"] = value
        return row


def required_m(epsilon: float, delta: float) -> int:
    """Sketch dimension for tail failure probability at most delta.

    Ceiling of (4/3) * (1 + eps) / eps^2 * ln(2 / delta), natural log.
    """
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if not 0 < delta < 1:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return math.ceil(4.0 / 3.0 * (1.0 + epsilon) / epsilon**2 * math.log(2.0 / delta))


def required_m_scores(epsilon: float, r: float, n: int) -> int:
    """Sketch dimension for the attention-score distortion bound.

    Ceiling of 2 * r^2 * eps^-2 * ln(n), natural log, for norm bound r.
    """
    if not 0 < epsilon < 1:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if r <= 0:
        raise ValueError(f"norm bound must be positive, got {r}")
    if n < 2:
        raise ValueError(f"token count must be at least 2, got {n}")
    return math.ceil(2.0 * r**2 / epsilon**2 * math.log(n))


def _planted_channels(d: int, seed: int) -> tuple[int, ...]:
    rng = rng_from_seed(derive_seed(seed, _STREAM_CHANNELS))
    picks = rng.choice(d, size=PLANTED_CHANNEL_COUNT, replace=False)
    return tuple(sorted(int(c) for c in picks))


def _draw_vector(
    rng: np.random.Generator,
    d: int,
    distribution: str,
    channels: tuple[int, ...] = (),
    factor: float = DEFAULT_OUTLIER_FACTOR,
) -> np.ndarray:
    vec = rng.standard_normal(d)
    if distribution == "outlier" and channels:
        vec[list(channels)] *= factor
    if distribution == "sphere":
        vec /= np.linalg.norm(vec)
    return vec


def _draw_pair(
    rng: np.random.Generator, cfg: TrialConfig, channels: tuple[int, ...]
) -> tuple[np.ndarray, np.ndarray]:
    # Outlier planting is a key-side phenomenon; queries stay Gaussian.
    query_dist = "sphere" if cfg.distribution == "sphere" else "gaussian"
    query = _draw_vector(rng, cfg.d, query_dist)
    key = _draw_vector(rng, cfg.d, cfg.distribution, channels)
    return query, key


def _trial_sketch(cfg: TrialConfig, seed: int) -> SketchMatrix:
    sketch = generate_gaussian(cfg.m, cfg.d, seed)
    return orthogonalize(sketch) if cfg.orthogonalize else sketch


def _estimate(sketch: SketchMatrix, query: np.ndarray, key: np.ndarray) -> float:
    return estimate_inner_product(
        sketch_query(sketch, query), quantize_key(sketch, key)
    )


def run_unbiasedness_trial(
    cfg: TrialConfig, pair: tuple[np.ndarray, np.ndarray] | None = None
) -> TrialReport:
    """Mean of the estimator over independent sketches versus the true <q, k>.

    Fixes one (q, k) pair (from the config distribution unless given
    explicitly), draws cfg.trials sketches, and reports the standardized
    bias z = (mean - truth) / stderr. Passes when |z| <= 4.
    """
    if pair is None:
        channels = (
            _planted_channels(cfg.d, cfg.seed) if cfg.distribution == "outlier" else ()
        )
        pair_rng = rng_from_seed(derive_seed(cfg.seed, _STREAM_PAIR))
        query, key = _draw_pair(pair_rng, cfg, channels)
    else:
        query, key = (np.asarray(v, dtype=np.float64) for v in pair)
    truth = float(query @ key)
    estimates = np.empty(cfg.trials)
    for t in range(cfg.trials):
        sketch = _trial_sketch(cfg, derive_seed(cfg.seed, t))
        estimates[t] = _estimate(sketch, query, key)
    mean = float(estimates.mean())
    stderr = float(estimates.std(ddof=1) / math.sqrt(cfg.trials))
    z = (mean - truth) / stderr if stderr > 0 else 0.0
    return TrialReport(
        suite="unbiasedness",
        passed=abs(z) <= MEAN_Z_BOUND,
        trials=cfg.trials,
        mean_estimate=mean,
        true_value=truth,
        stderr=stderr,
        z_score=z,
        threshold=MEAN_Z_BOUND,
    )


def run_distortion_trial(cfg: TrialConfig) -> TrialReport:
    """Fraction of sketch draws with |estimate - <q,k>| > eps ||q|| ||k||.

    Draws a fresh pair and a fresh sketch per trial and compares the
    empirical failure fraction to delta. The delta guarantee applies when
    cfg.m >= required_m(eps, delta); smaller m is allowed so undersized
    configurations can be demonstrated to fail.
    """
    channels = (
        _planted_channels(cfg.d, cfg.seed) if cfg.distribution == "outlier" else ()
    )
    failures = 0
    for t in range(cfg.trials):
        pair_rng = rng_from_seed(derive_seed(cfg.seed, 2 * t))
        query, key = _draw_pair(pair_rng, cfg, channels)
        sketch = _trial_sketch(cfg, derive_seed(cfg.seed, 2 * t + 1))
        error = abs(_estimate(sketch, query, key) - float(query @ key))
        bound = cfg.epsilon * float(np.linalg.norm(query) * np.linalg.norm(key))
        if error > bound:
            failures += 1
    fraction = failures / cfg.trials
    return TrialReport(
        suite="distortion",
        passed=fraction <= cfg.delta,
        trials=cfg.trials,
        failure_fraction=fraction,
        threshold=cfg.delta,
    )


def run_score_trial(cfg: TrialConfig) -> TrialReport:
    """Per-draw max relative attention-score error against the exact softmax.

    Keys and query are unit-norm and fixed across draws; each draw uses a
    fresh sketch. A draw succeeds when every coordinate satisfies
    |est_score(i) - score(i)| <= 3 eps * score(i); the suite passes when at
    least 99% of draws succeed.
    """
    channels = (
        _planted_channels(cfg.d, cfg.seed) if cfg.distribution == "outlier" else ()
    )
    keys_rng = rng_from_seed(derive_seed(cfg.seed, _STREAM_PAIR))
    keys = np.stack(
        [_draw_vector(keys_rng, cfg.d, cfg.distribution, channels) for _ in range(cfg.n)]
    )
    keys /= np.linalg.norm(keys, axis=1, keepdims=True)
    query = _draw_vector(keys_rng, cfg.d, "sphere")
    exact_scores = softmax(keys @ query)
    bound = 3.0 * cfg.epsilon
    profile = detect_outliers(keys, 0)
    max_errors = np.empty(cfg.trials)
    for t in range(cfg.trials):
        state = KeyCacheState.create(
            profile,
            m_in=cfg.m,
            seed=derive_seed(cfg.seed, t),
            orthogonalize_sketches=cfg.orthogonalize,
        )
        for key in keys:
            state.append(key)
        est_scores = state.estimate_scores(query).weights
        max_errors[t] = float((np.abs(est_scores - exact_scores) / exact_scores).max())
    fraction_ok = float((max_errors <= bound).mean())
    percentiles = {
        "p50": float(np.percentile(max_errors, 50)),
        "p90": float(np.percentile(max_errors, 90)),
        "p99": float(np.percentile(max_errors, 99)),
        "max": float(max_errors.max()),
    }
    return TrialReport(
        suite="scores",
        passed=fraction_ok >= SCORE_DRAW_ACCEPTANCE,
        trials=cfg.trials,
        fraction_within_bound=fraction_ok,
        threshold=bound,
        score_error_percentiles=percentiles,
    )


def run_orthogonal_comparison(cfg: TrialConfig) -> TrialReport:
    """Estimator variance of orthogonalized versus i.i.d. sketches.

    Uses matched seeds: each trial orthogonalizes the very Gaussian draw it
    compares against, on one fixed pair. Passes when the variance ratio
    (orthogonal / i.i.d.) is at most 1.05; the ratio itself is reported for
    inspection.
    """
    channels = (
        _planted_channels(cfg.d, cfg.seed) if cfg.distribution == "outlier" else ()
    )
    pair_rng = rng_from_seed(derive_seed(cfg.seed, _STREAM_PAIR))
    query, key = _draw_pair(pair_rng, cfg, channels)
    iid_estimates = np.empty(cfg.trials)
    orth_estimates = np.empty(cfg.trials)
    for t in range(cfg.trials):
        sketch = generate_gaussian(cfg.m, cfg.d, derive_seed(cfg.seed, t))
        iid_estimates[t] = _estimate(sketch, query, key)
        orth_estimates[t] = _estimate(orthogonalize(sketch), query, key)
    iid_var = float(iid_estimates.var(ddof=1))
    orth_var = float(orth_estimates.var(ddof=1))
    ratio = orth_var / iid_var if iid_var > 0 else float("inf")
    return TrialReport(
        suite="orthogonal",
        passed=ratio <= VARIANCE_RATIO_BOUND,
        trials=cfg.trials,
        mean_estimate=float(orth_estimates.mean()),
        true_value=float(query @ key),
        variance_ratio=ratio,
        threshold=VARIANCE_RATIO_BOUND,
    )


@dataclass(frozen=True)
class SyntheticStream:
    """Deterministic synthetic key/value/query embeddings."""

    keys: np.ndarray
    values: np.ndarray
    queries: np.ndarray
    outlier_channels: tuple[int, ...]


def generate_synthetic_stream(
    d: int,
    n: int,
    distribution: str,
    seed: int,
    factor: float = DEFAULT_OUTLIER_FACTOR,
) -> SyntheticStream:
    """Generate n keys, values, and queries of dimension d.

    Distributions: "sphere" (rows uniform on the unit sphere), "gaussian"
    (i.i.d. standard normal entries), and "outlier" (Gaussian keys with 4
    seed-chosen channels amplified by ``factor``; values and queries stay
    Gaussian, mirroring how outliers concentrate in key embeddings).
    """
    if d < 1 or n < 1:
        raise ValueError(f"dimensions must be positive, got d={d}, n={n}")
    if distribution not in DISTRIBUTIONS:
        raise ValueError(
            f"unknown distribution {distribution!r}; choose from {DISTRIBUTIONS}"
        )
    channels: tuple[int, ...] = ()
    if distribution == "outlier":
        if d < PLANTED_CHANNEL_COUNT:
            raise ValueError(
                f"outlier distribution needs d >= {PLANTED_CHANNEL_COUNT}, got {d}"
            )
        channels = _planted_channels(d, seed)
    aux_dist = "sphere" if distribution == "sphere" else "gaussian"

    def draw(stream: int, dist: str, planted: tuple[int, ...]) -> np.ndarray:
        rng = rng_from_seed(derive_seed(seed, stream))
        rows = np.stack([_draw_vector(rng, d, dist, planted, factor) for _ in range(n)])
        rows.setflags(write=False)
        return rows

    return SyntheticStream(
        keys=draw(_STREAM_KEYS, distribution, channels),
        values=draw(_STREAM_VALUES, aux_dist, ()),
        queries=draw(_STREAM_QUERIES, aux_dist, ()),
        outlier_channels=channels,
    )
