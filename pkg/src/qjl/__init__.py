"""Sign-bit sketching for KV-cache compression.

A key is projected by a seeded Gaussian (optionally row-orthogonalized)
sketch and stored as one sign bit per projected coordinate plus its norm;
queries keep their full-precision projection. The asymmetric inner-product
estimator built from the two is unbiased, which keeps softmax attention
scores computed from a compressed key cache close to the exact ones.
"""

from .attention import (
    DecodeResult,
    ErrorMetrics,
    error_metrics,
    exact_decode,
    quantized_decode,
)
from .estimator import (
    QuantizedKey,
    SketchedQuery,
    estimate_inner_product,
    pack_signs,
    packed_sign_dot,
    quantize_key,
    sketch_query,
    unpack_signs,
)
from .harness import (
    SyntheticStream,
    TrialConfig,
    TrialReport,
    generate_synthetic_stream,
    required_m,
    required_m_scores,
    run_distortion_trial,
    run_orthogonal_comparison,
    run_score_trial,
    run_unbiasedness_trial,
)
from .kvcache import (
    KeyCacheState,
    MemoryReport,
    OutlierProfile,
    QuantizedValueToken,
    ScoreVector,
    dequantize_value,
    detect_outliers,
    quantize_value,
    read_cache,
    write_cache,
)
from .sketch import SketchMatrix, derive_seed, generate_gaussian, orthogonalize

__version__ = "0.1.0"

__all__ = [
    "DecodeResult",
    "ErrorMetrics",
    "KeyCacheState",
    "MemoryReport",
    "OutlierProfile",
    "QuantizedKey",
    "QuantizedValueToken",
    "ScoreVector",
    "SketchMatrix",
    "SketchedQuery",
    "SyntheticStream",
    "TrialConfig",
    "TrialReport",
    "dequantize_value",
    "derive_seed",
    "detect_outliers",
    "error_metrics",
    "estimate_inner_product",
    "exact_decode",
    "generate_gaussian",
    "generate_synthetic_stream",
    "orthogonalize",
    "pack_signs",
    "packed_sign_dot",
    "quantize_key",
    "quantize_value",
    "quantized_decode",
    "read_cache",
    "required_m",
    "required_m_scores",
    "run_distortion_trial",
    "run_orthogonal_comparison",
    "run_score_trial",
    "run_unbiasedness_trial",
    "sketch_query",
    "unpack_signs",
    "write_cache",
]
