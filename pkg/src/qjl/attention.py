"""Exact attention decoding, the quantized decoding path, and error metrics
between them.

The exact path is the full-precision reference: logits <q, k_i> /
temperature, stable softmax, score-weighted sum of values. The quantized
path replaces the logits with cache estimates and the values with their
dequantized tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kvcache import (
    KeyCacheState,
    QuantizedValueToken,
    ScoreVector,
    dequantize_value,
    softmax,
)


@dataclass(frozen=True, eq=False)
class DecodeResult:
    """Attention output vector and the scores that produced it."""

    output: np.ndarray
    scores: ScoreVector


def exact_decode(
    query: np.ndarray,
    keys: np.ndarray,
    values: np.ndarray,
    temperature: float = 1.0,
) -> DecodeResult:
    """Full-precision attention decode over n cached tokens."""
    query = np.asarray(query, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise ValueError("keys must be a non-empty n x d matrix")
    if values.shape != keys.shape:
        raise ValueError(f"values shape {values.shape} != keys shape {keys.shape}")
    if query.shape != (keys.shape[1],):
        raise ValueError(f"query has shape {query.shape}, expected ({keys.shape[1]},)")
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    weights = softmax(keys @ query / temperature)
    scores = ScoreVector(weights=weights)
    return DecodeResult(output=weights @ values, scores=scores)


def quantized_decode(
    query: np.ndarray,
    state: KeyCacheState,
    value_tokens: list[QuantizedValueToken],
    temperature: float = 1.0,
) -> DecodeResult:
    """Attention decode from a quantized cache: estimated scores, dequantized values."""
    if state.n == 0:
        raise ValueError("cache is empty")
    if len(value_tokens) != state.n:
        raise ValueError(
            f"cache holds {state.n} keys but {len(value_tokens)} value tokens supplied"
        )
    scores = state.estimate_scores(query, temperature=temperature)
    values = np.stack([dequantize_value(token) for token in value_tokens])
    return DecodeResult(output=scores.weights @ values, scores=scores)


@dataclass(frozen=True)
class ErrorMetrics:
    """Discrepancy between an exact and an approximate decode."""

    max_relative_score_error: float
    tv_distance: float
    output_relative_l2: float

    def as_dict(self) -> dict[str, float]:
        return {
            "max_rel_score_err": self.max_relative_score_error,
            "tv_distance": self.tv_distance,
            "output_rel_l2": self.output_relative_l2,
        }


def error_metrics(exact: DecodeResult, approx: DecodeResult) -> ErrorMetrics:
    """Max relative score error, total-variation distance, and output L2 error."""
    exact_scores = exact.scores.weights
    approx_scores = approx.scores.weights
    if exact_scores.shape != approx_scores.shape:
        raise ValueError("score vectors differ in length")
    if exact.output.shape != approx.output.shape:
        raise ValueError("outputs differ in dimension")
    diff = np.abs(approx_scores - exact_scores)
    max_relative = float((diff / exact_scores).max())
    tv_distance = 0.5 * float(diff.sum())
    output_norm = float(np.linalg.norm(exact.output))
    error_norm = float(np.linalg.norm(approx.output - exact.output))
    if output_norm > 0:
        relative_l2 = error_norm / output_norm
    else:
        relative_l2 = 0.0 if error_norm == 0 else float("inf")
    return ErrorMetrics(
        max_relative_score_error=max_relative,
        tv_distance=tv_distance,
        output_relative_l2=relative_l2,
    )
