"""Command-line front end: synthetic data generation, cache quantization and
decoding pipelines, validation suites, and micro-benchmarks.

Exit codes: 0 success, 2 configuration or argument errors, 3 I/O and file
format errors, 4 failed validation assertions.

Tensor files ("QJLT"): magic, version u16, dtype code u16 (1=float32,
2=float64, 3=float16), rows u64, cols u64, then the row-major payload, all
little-endian. Payloads are widened to float64 on load.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import struct
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attention import error_metrics, exact_decode, quantized_decode
from .harness import (
    DISTRIBUTIONS,
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
    FileFormatError,
    KeyCacheState,
    detect_outliers,
    quantize_value,
    read_cache,
    write_cache,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_ASSERTION = 4

TENSOR_MAGIC = b"QJLT"
TENSOR_VERSION = 1
_TENSOR_HEADER = struct.Struct("<4sHHQQ")
_DTYPE_BY_CODE = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<f2")}
_CODE_BY_NAME = {"float32": 1, "float64": 2, "float16": 3}

SEED_ENV_VAR = "QJL_SEED"

VALIDATION_SUITES = ("unbiasedness", "distortion", "scores", "orthogonal")


def write_tensor(path, array: np.ndarray, dtype: str = "float32") -> None:
    """Write a 2-D array as a QJLT tensor file."""
    if dtype not in _CODE_BY_NAME:
        raise ValueError(f"unsupported tensor dtype {dtype!r}")
    array = np.atleast_2d(np.asarray(array))
    code = _CODE_BY_NAME[dtype]
    payload = array.astype(_DTYPE_BY_CODE[code]).tobytes()
    header = _TENSOR_HEADER.pack(
        TENSOR_MAGIC, TENSOR_VERSION, code, array.shape[0], array.shape[1]
    )
    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(payload)


def read_tensor(path) -> np.ndarray:
    """Read a QJLT tensor file, widened to float64."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < _TENSOR_HEADER.size:
        raise FileFormatError(f"{path}: shorter than a tensor header")
    magic, version, code, rows, cols = _TENSOR_HEADER.unpack_from(blob)
    if magic != TENSOR_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}, expected {TENSOR_MAGIC!r}")
    if version != TENSOR_VERSION:
        raise FileFormatError(f"{path}: unsupported tensor version {version}")
    if code not in _DTYPE_BY_CODE:
        raise FileFormatError(f"{path}: unknown dtype code {code}")
    dtype = _DTYPE_BY_CODE[code]
    expected = _TENSOR_HEADER.size + rows * cols * dtype.itemsize
    if len(blob) != expected:
        raise FileFormatError(
            f"{path}: payload length {len(blob) - _TENSOR_HEADER.size} does not match "
            f"{rows}x{cols} {dtype.name}"
        )
    data = np.frombuffer(blob, dtype=dtype, count=rows * cols, offset=_TENSOR_HEADER.size)
    return data.astype(np.float64).reshape(rows, cols)


@dataclass
class RunConfig:
    """Quantizer and pipeline parameters with documented defaults.

    d: embedding dimension (128). n: token count (256). m_in: inlier sketch
    bits, sized from the score-distortion bound when omitted. m_out: outlier
    sketch bits, 8 per outlier channel when omitted. outliers: outlier
    channel count h (4). bits: value bits per coordinate (3). seed: master
    seed (0); the QJL_SEED environment variable overrides it. epsilon
    (0.25) and delta (0.01): distortion targets. temperature: softmax
    temperature (1.0; attention logits are not rescaled by default).
    orthogonalize: use row-orthogonalized sketches (true). dist: synthetic
    data distribution ("sphere"). factor: outlier amplification (10).
    """

    d: int = 128
    n: int = 256
    m_in: int | None = None
    m_out: int | None = None
    outliers: int = 4
    bits: int = 3
    seed: int = 0
    epsilon: float = 0.25
    delta: float = 0.01
    temperature: float = 1.0
    orthogonalize: bool = True
    dist: str = "sphere"
    factor: float = 10.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "RunConfig":
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ValueError(f"{path}: unknown config field {key!r}")
        return cls(**data)


def _resolved_config(args: argparse.Namespace) -> RunConfig:
    """Merge a config file, command-line overrides, and the seed env var."""
    config = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        field.name: getattr(args, field.name)
        for field in dataclasses.fields(RunConfig)
        if getattr(args, field.name, None) is not None
    }
    config = dataclasses.replace(config, **overrides)
    if SEED_ENV_VAR in os.environ:
        config = dataclasses.replace(config, seed=int(os.environ[SEED_ENV_VAR]))
    if config.dist not in DISTRIBUTIONS:
        raise ValueError(f"unknown distribution {config.dist!r}")
    return config


def _default_m_in(config: RunConfig, n: int) -> int:
    if config.m_in is not None:
        return config.m_in
    return required_m_scores(config.epsilon, 1.0, max(n, 2))


def _write_rows(path, rows: list[dict[str, object]]) -> None:
    fieldnames: list[str] = []
    for row in rows:
        for key in row:
            if key not in fieldnames:
                fieldnames.append(key)
    with open(path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})


def cmd_gen(args: argparse.Namespace) -> int:
    config = _resolved_config(args)
    stream = generate_synthetic_stream(
        config.d, config.n, config.dist, config.seed, factor=config.factor
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, data in (
        ("keys", stream.keys),
        ("values", stream.values),
        ("queries", stream.queries),
    ):
        write_tensor(out_dir / f"{name}.qjlt", data)
    if stream.outlier_channels:
        print(f"planted outlier channels: {list(stream.outlier_channels)}")
    print(f"wrote keys/values/queries ({config.n} x {config.d}) to {out_dir}")
    return EXIT_OK


def _build_cache(config: RunConfig, keys: np.ndarray):
    n, d = keys.shape
    profile = detect_outliers(keys, config.outliers)
    state = KeyCacheState.create(
        profile,
        m_in=_default_m_in(config, n),
        m_out=config.m_out,
        seed=config.seed,
        orthogonalize_sketches=config.orthogonalize,
    )
    for key in keys:
        state.append(key)
    return state


def cmd_quantize(args: argparse.Namespace) -> int:
    config = _resolved_config(args)
    keys = read_tensor(args.keys)
    values = read_tensor(args.values)
    if keys.shape != values.shape:
        raise ValueError(
            f"keys {keys.shape} and values {values.shape} disagree on shape"
        )
    state = _build_cache(config, keys)
    value_tokens = [quantize_value(v, config.bits) for v in values]
    write_cache(args.out, state, value_tokens)
    report = state.memory_report(config.bits)
    print(f"cached {state.n} tokens (d={state.d}, h={state.h}, "
          f"m_in={state.m_in}, m_out={state.m_out}, b={config.bits}) -> {args.out}")
    print(f"key bits/FPN:   {report.key_bits_per_fpn:.4g}")
    print(f"value bits/FPN: {report.value_bits_per_fpn:.4g}")
    print(f"total bits/FPN: {report.total_bits_per_fpn:.4g} "
          f"({report.reduction_factor:.2f}x reduction vs {report.baseline_bits:.0f}-bit)")
    return EXIT_OK


def cmd_decode(args: argparse.Namespace) -> int:
    config = _resolved_config(args)
    state, value_tokens, _ = read_cache(args.cache)
    queries = read_tensor(args.queries)
    if queries.shape[1] != state.d:
        raise ValueError(
            f"queries have dimension {queries.shape[1]}, cache expects {state.d}"
        )
    exact_keys = read_tensor(args.exact_keys) if args.exact_keys else None
    exact_values = read_tensor(args.exact_values) if args.exact_values else None
    if (exact_keys is None) != (exact_values is None):
        raise ValueError("supply both --exact-keys and --exact-values, or neither")
    if exact_keys is not None and exact_keys.shape[0] != state.n:
        raise ValueError(
            f"exact keys hold {exact_keys.shape[0]} tokens, cache holds {state.n}"
        )
    rows: list[dict[str, object]] = []
    outputs = np.empty((queries.shape[0], state.d))
    for index, query in enumerate(queries):
        approx = quantized_decode(query, state, value_tokens, config.temperature)
        outputs[index] = approx.output
        row: dict[str, object] = {"query": index}
        if exact_keys is not None:
            exact = exact_decode(query, exact_keys, exact_values, config.temperature)
            row.update(error_metrics(exact, approx).as_dict())
        rows.append(row)
    _write_rows(args.out, rows)
    if args.outputs:
        write_tensor(args.outputs, outputs, dtype="float64")
    print(f"decoded {queries.shape[0]} queries -> {args.out}")
    return EXIT_OK


def _validate_suite_configs(
    config: RunConfig, args: argparse.Namespace
) -> dict[str, TrialConfig]:
    trials = args.trials
    distortion_m = args.m_in if args.m_in is not None else required_m(
        config.epsilon, config.delta
    )
    return {
        # Exact unbiasedness is an i.i.d. property; the orthogonalized
        # variant is covered by the comparison suite.
        "unbiasedness": TrialConfig(
            d=config.d,
            m=8,
            trials=trials or 100000,
            seed=config.seed,
            orthogonalize=False,
        ),
        "distortion": TrialConfig(
            d=config.d,
            m=distortion_m,
            epsilon=config.epsilon,
            delta=config.delta,
            trials=trials or 10000,
            seed=config.seed,
            orthogonalize=config.orthogonalize,
        ),
        "scores": TrialConfig(
            d=config.d,
            m=required_m_scores(config.epsilon, 1.0, config.n),
            n=config.n,
            epsilon=config.epsilon,
            trials=max(trials or 100, 100),
            seed=config.seed,
            orthogonalize=config.orthogonalize,
        ),
        "orthogonal": TrialConfig(
            d=config.d,
            m=max(1, config.d // 2),
            trials=trials or 10000,
            seed=config.seed,
        ),
    }


_SUITE_RUNNERS = {
    "unbiasedness": run_unbiasedness_trial,
    "distortion": run_distortion_trial,
    "scores": run_score_trial,
    "orthogonal": run_orthogonal_comparison,
}


def cmd_validate(args: argparse.Namespace) -> int:
    config = _resolved_config(args)
    if args.only:
        selected = [name.strip() for name in args.only.split(",") if name.strip()]
        unknown = [name for name in selected if name not in VALIDATION_SUITES]
        if unknown:
            raise ValueError(
                f"unknown suite(s) {unknown}; choose from {list(VALIDATION_SUITES)}"
            )
    else:
        selected = list(VALIDATION_SUITES)
    suite_configs = _validate_suite_configs(config, args)
    reports: list[TrialReport] = []
    for name in selected:
        report = _SUITE_RUNNERS[name](suite_configs[name])
        reports.append(report)
        detail = {
            k: v
            for k, v in report.to_row().items()
            if v not in (None, "") and k not in ("suite", "passed")
        }
        print(f"{name}: {'PASS' if report.passed else 'FAIL'} {detail}")
    if args.out:
        _write_rows(args.out, [r.to_row() for r in reports])
    return EXIT_OK if all(r.passed for r in reports) else EXIT_ASSERTION


@dataclass(frozen=True)
class BenchRow:
    """Median wall-clock seconds for one decode path at one length."""

    path: str
    n: int
    median_seconds: float
    repeats: int

    def to_row(self) -> dict[str, object]:
        return {
            "path": self.path,
            "n": self.n,
            "median_seconds": self.median_seconds,
            "repeats": self.repeats,
        }


def _median_time(fn, repeats: int) -> float:
    fn()  # warmup: touch caches and trigger any lazy allocation
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return float(np.median(samples))


def run_decode_bench(
    lengths: list[int],
    d: int = 64,
    repeats: int = 15,
    seed: int = 0,
    bits: int = 3,
    quantized: bool = True,
) -> list[BenchRow]:
    """Time one full decode step (exact and quantized paths) per length."""
    rows: list[BenchRow] = []
    config = RunConfig(d=d, seed=seed, bits=bits, outliers=0)
    for n in lengths:
        stream = generate_synthetic_stream(d, n, "gaussian", seed)
        query = stream.queries[0]
        keys, values = stream.keys, stream.values
        rows.append(
            BenchRow(
                path="exact",
                n=n,
                median_seconds=_median_time(
                    lambda: exact_decode(query, keys, values), repeats
                ),
                repeats=repeats,
            )
        )
        if quantized:
            state = _build_cache(config, keys)
            value_tokens = [quantize_value(v, bits) for v in values]
            rows.append(
                BenchRow(
                    path="quantized",
                    n=n,
                    median_seconds=_median_time(
                        lambda: quantized_decode(query, state, value_tokens), repeats
                    ),
                    repeats=repeats,
                )
            )
    return rows


def fit_loglog_slope(rows: list[BenchRow], path: str = "exact") -> float:
    """Least-squares slope of log(time) against log(n) for one path."""
    selected = [(row.n, row.median_seconds) for row in rows if row.path == path]
    if len(selected) < 2:
        raise ValueError(f"need at least two lengths for path {path!r}")
    ns, times = zip(*selected)
    return float(np.polyfit(np.log(ns), np.log(times), 1)[0])


def cmd_bench(args: argparse.Namespace) -> int:
    config = _resolved_config(args)
    lengths = [int(part) for part in args.lengths.split(",") if part]
    if not lengths or any(n < 1 for n in lengths):
        raise ValueError(f"invalid lengths list {args.lengths!r}")

    def run() -> list[BenchRow]:
        return run_decode_bench(
            lengths,
            d=config.d,
            repeats=args.repeats,
            seed=config.seed,
            bits=config.bits,
        )

    if args.threads is not None:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError as exc:
            raise ValueError("--threads requires the threadpoolctl package") from exc
        with threadpool_limits(limits=args.threads):
            rows = run()
    else:
        rows = run()
    _write_rows(args.out, [row.to_row() for row in rows])
    for row in rows:
        per_token = row.median_seconds / row.n
        print(
            f"{row.path:9s} n={row.n:>8d} median {row.median_seconds * 1e3:9.3f} ms "
            f"({per_token * 1e9:8.1f} ns/token)"
        )
    exact_lengths = [row for row in rows if row.path == "exact"]
    if len(exact_lengths) >= 2:
        print(f"exact path log-log slope: {fit_loglog_slope(rows):.3f}")
    return EXIT_OK


def _add_config_flags(parser: argparse.ArgumentParser, names: list[str]) -> None:
    """Register config-backed flags; None defaults mean 'not overridden'."""
    parser.add_argument("--config", help="JSON RunConfig file to start from")
    specs = {
        "d": dict(type=int, help="embedding dimension"),
        "n": dict(type=int, help="token count"),
        "m_in": dict(type=int, help="inlier sketch bits"),
        "m_out": dict(type=int, help="outlier sketch bits"),
        "outliers": dict(type=int, help="outlier channel count h"),
        "bits": dict(type=int, help="value bits per coordinate b"),
        "seed": dict(type=int, help=f"master seed (env {SEED_ENV_VAR} overrides)"),
        "epsilon": dict(type=float, help="distortion target"),
        "delta": dict(type=float, help="tail probability target"),
        "temperature": dict(type=float, help="softmax temperature"),
        "orthogonalize": dict(
            action=argparse.BooleanOptionalAction, help="orthogonalize sketch rows"
        ),
        "dist": dict(choices=DISTRIBUTIONS, help="synthetic distribution"),
        "factor": dict(type=float, help="outlier channel amplification"),
    }
    for name in names:
        flag = "--" + name.replace("_", "-")
        parser.add_argument(flag, default=None, **specs[name])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qjl",
        description="Sign-bit sketching for KV-cache compression.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic key/value/query tensors")
    _add_config_flags(gen, ["d", "n", "dist", "seed", "factor"])
    gen.add_argument("--out", required=True, help="output directory")
    gen.set_defaults(func=cmd_gen)

    quantize = sub.add_parser("quantize", help="quantize a key/value stream into a cache")
    _add_config_flags(
        quantize,
        ["m_in", "m_out", "outliers", "bits", "seed", "epsilon", "orthogonalize"],
    )
    quantize.add_argument("--keys", required=True, help="keys tensor file")
    quantize.add_argument("--values", required=True, help="values tensor file")
    quantize.add_argument("--out", required=True, help="output cache file")
    quantize.set_defaults(func=cmd_quantize)

    decode = sub.add_parser("decode", help="decode queries against a quantized cache")
    _add_config_flags(decode, ["temperature", "seed"])
    decode.add_argument("--cache", required=True, help="cache file")
    decode.add_argument("--queries", required=True, help="queries tensor file")
    decode.add_argument("--exact-keys", help="exact keys for error metrics")
    decode.add_argument("--exact-values", help="exact values for error metrics")
    decode.add_argument("--out", required=True, help="per-query CSV report")
    decode.add_argument("--outputs", help="optional tensor file for decode outputs")
    decode.set_defaults(func=cmd_decode)

    validate = sub.add_parser("validate", help="run the statistical validation suites")
    _add_config_flags(
        validate,
        ["d", "n", "m_in", "seed", "epsilon", "delta", "orthogonalize"],
    )
    validate.add_argument(
        "--only", help=f"comma-separated subset of {','.join(VALIDATION_SUITES)}"
    )
    validate.add_argument(
        "--trials", type=int, help="override per-suite trial counts (testing aid)"
    )
    validate.add_argument("--out", help="CSV report, one row per suite")
    validate.set_defaults(func=cmd_validate)

    bench = sub.add_parser("bench", help="time exact versus quantized decoding")
    _add_config_flags(bench, ["d", "seed", "bits"])
    bench.add_argument(
        "--lengths",
        default="1024,4096,16384,65536",
        help="comma-separated sequence lengths",
    )
    bench.add_argument("--repeats", type=int, default=15, help="timings per median")
    bench.add_argument("--threads", type=int, help="pin BLAS thread count")
    bench.add_argument("--out", required=True, help="timing CSV")
    bench.set_defaults(func=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
