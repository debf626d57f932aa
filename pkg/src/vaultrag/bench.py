"""Scaling measurements for the filtered vector index.

Two experiments, mirroring how the retrieval path behaves as the corpus
grows:

- latency: time filtered k-NN queries at increasing corpus sizes, under a
  chosen access fraction and record layout. Each timed trial includes
  materializing the caller's accessible-record set from a grant table,
  because the live search path pays that cost on every query.
- memory: account index and row storage at increasing sizes and fit a
  linear model.

Record layouts: "fixed_two" keeps two records regardless of corpus size
(one holds every accessible vector); "vectors_per_record" grows the record
count linearly, v vectors per record. The same physical graph serves every
layout: rows are relabelled between measurements, never re-inserted.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .hnsw import ChunkRow, HnswIndex, HnswParams

MODE_FIXED_TWO = "fixed_two"
MODE_PER_RECORD = "vectors_per_record"

LATENCY_CSV_COLUMNS = [
    "mode",
    "n",
    "fraction",
    "trials",
    "mean_latency_s",
    "std_latency_s",
    "oracle_checks",
    "oracle_violations",
    "mean_oracle_recall",
]
MEMORY_CSV_COLUMNS = [
    "n",
    "graph_bytes",
    "rows_bytes",
    "total_bytes",
    "graph_kb_per_vector",
    "total_kb_per_vector",
]

# reference storage costs reported for a PostgreSQL deployment, shown next
# to ours for comparison only
REFERENCE_GRAPH_KB_PER_VECTOR = 7.5
REFERENCE_TOTAL_KB_PER_VECTOR = 13.7


@dataclass
class BenchConfig:
    n_max: int = 200_000
    checkpoints: tuple = (1_000, 5_000, 10_000, 50_000, 100_000, 200_000)
    dim: int = 1024
    k: int = 50
    access_fractions: tuple = (0.01, 0.1, 1.0)
    record_mode: str = MODE_FIXED_TWO
    vectors_per_record: int = 100
    trials: int = 100
    seed: int = 0
    hnsw: Optional[HnswParams] = None
    oracle_sample_rate: float = 0.01

    def __post_init__(self):
        if self.record_mode not in (MODE_FIXED_TWO, MODE_PER_RECORD):
            raise ValueError(f"unknown record_mode {self.record_mode!r}")
        if not self.checkpoints:
            raise ValueError("checkpoints must be non-empty")
        if list(self.checkpoints) != sorted(set(self.checkpoints)):
            raise ValueError("checkpoints must be strictly ascending")
        if self.checkpoints[-1] > self.n_max:
            raise ValueError("checkpoints must not exceed n_max")
        if not all(0.0 < f <= 1.0 for f in self.access_fractions):
            raise ValueError("access fractions must lie in (0, 1]")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if self.vectors_per_record < 1:
            raise ValueError("vectors_per_record must be at least 1")
        if not 0.0 <= self.oracle_sample_rate <= 1.0:
            raise ValueError("oracle_sample_rate must lie in [0, 1]")


@dataclass(frozen=True)
class LatencyPoint:
    mode: str
    n: int
    fraction: float
    trials: int
    mean_latency_s: float
    std_latency_s: float
    oracle_checks: int
    oracle_violations: int
    mean_oracle_recall: float


@dataclass(frozen=True)
class MemoryPoint:
    n: int
    graph_bytes: int
    rows_bytes: int
    total_bytes: int


@dataclass(frozen=True)
class CurveFit:
    kind: str  # logarithmic | linear | linear_through_origin
    a: float
    b: float
    r_squared: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "logarithmic":
            return self.a * np.log(x) + self.b
        return self.a * x + self.b


@dataclass
class BenchResult:
    latency_points: list = field(default_factory=list)
    latency_fits: dict = field(default_factory=dict)  # (fraction, kind) -> CurveFit
    memory_points: list = field(default_factory=list)
    memory_fits: dict = field(default_factory=dict)  # series name -> CurveFit


# ---------------------------------------------------------------------------
# corpus and index plumbing
# ---------------------------------------------------------------------------


def generate_corpus(n: int, dim: int, seed: int) -> np.ndarray:
    """n unit vectors with uniformly random directions, reproducible by seed."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    vectors = rng.standard_normal((n, dim)).astype(np.float32)
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return (vectors / norms).astype(np.float32)


def extend_index(
    index: HnswIndex, corpus: np.ndarray, start: int, stop: int
) -> None:
    """Insert corpus rows [start, stop) as ids start+1..stop."""
    for i in range(start, stop):
        index.insert(
            ChunkRow(
                id=i + 1,
                record_id=1,
                from_metadata=False,
                file_name=None,
                embedding=corpus[i],
                text="",
            )
        )


def relabel_fixed_two(index: HnswIndex, n: int, fraction: float) -> dict:
    """Two records: record 1 holds the accessible share, record 2 the rest.
    Returns the grant table for the accessible user."""
    cutoff = max(1, round(fraction * n))
    index.reassign_record_ids(lambda row_id: 1 if row_id <= cutoff else 2)
    return {1: True}


def relabel_per_record(
    index: HnswIndex, n: int, vectors_per_record: int, fraction: float
) -> dict:
    """v vectors per record; the first fraction-share of records is granted."""
    v = vectors_per_record
    index.reassign_record_ids(lambda row_id: (row_id - 1) // v + 1)
    record_count = math.ceil(n / v)
    granted = max(1, round(fraction * record_count))
    return {record_id: True for record_id in range(1, granted + 1)}


def measure_latency_point(
    index: HnswIndex,
    grants: dict,
    *,
    mode: str,
    n: int,
    fraction: float,
    k: int,
    trials: int,
    rng: np.random.Generator,
    oracle_sample_rate: float = 0.01,
) -> LatencyPoint:
    """Time `trials` filtered queries; re-check a sample against the exact
    oracle. The timed section covers grant-set materialization plus the
    filtered search, matching the live search path."""
    dim = index.params.dim
    timings = np.empty(trials, dtype=np.float64)
    oracle_checks = 0
    oracle_violations = 0
    recalls = []
    for trial in range(trials):
        query = rng.standard_normal(dim).astype(np.float32)
        query /= np.linalg.norm(query)

        started = time.perf_counter()
        allowed = set(grants)
        found = index.knn_filtered(query, k, allowed)
        timings[trial] = time.perf_counter() - started

        if rng.random() < oracle_sample_rate:
            oracle_checks += 1
            if any(index.get_row(nb.id).record_id not in allowed for nb in found):
                oracle_violations += 1
            exact = index.brute_force_knn(query, k, allowed)
            if exact:
                exact_ids = {nb.id for nb in exact}
                recalls.append(
                    len(exact_ids & {nb.id for nb in found}) / len(exact_ids)
                )
            else:
                recalls.append(1.0)
    return LatencyPoint(
        mode=mode,
        n=n,
        fraction=fraction,
        trials=trials,
        mean_latency_s=float(timings.mean()),
        std_latency_s=float(timings.std()),
        oracle_checks=oracle_checks,
        oracle_violations=oracle_violations,
        mean_oracle_recall=float(np.mean(recalls)) if recalls else float("nan"),
    )


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


def _r_squared(y: np.ndarray, predicted: np.ndarray) -> float:
    y = np.asarray(y, dtype=np.float64)
    residual = float(np.sum((y - predicted) ** 2))
    total = float(np.sum((y - y.mean()) ** 2))
    if total == 0.0:
        # constant data: perfect iff the residual is zero at float precision
        return 1.0 if residual <= 1e-12 * (1.0 + float(np.sum(y * y))) else 0.0
    return 1.0 - residual / total


def fit_logarithmic(ns: Sequence[float], ys: Sequence[float]) -> CurveFit:
    x = np.log(np.asarray(ns, dtype=np.float64))
    a, b = np.polyfit(x, np.asarray(ys, dtype=np.float64), 1)
    fit = CurveFit("logarithmic", float(a), float(b), 0.0)
    return CurveFit("logarithmic", fit.a, fit.b, _r_squared(ys, fit.predict(ns)))


def fit_linear(
    ns: Sequence[float], ys: Sequence[float], *, nonnegative_intercept: bool = False
) -> CurveFit:
    x = np.asarray(ns, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    if nonnegative_intercept and b < 0.0:
        return fit_linear_through_origin(ns, ys)
    fit = CurveFit("linear", float(a), float(b), 0.0)
    return CurveFit("linear", fit.a, fit.b, _r_squared(y, fit.predict(x)))


def fit_linear_through_origin(ns: Sequence[float], ys: Sequence[float]) -> CurveFit:
    x = np.asarray(ns, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    a = float(np.sum(x * y) / np.sum(x * x))
    fit = CurveFit("linear_through_origin", a, 0.0, 0.0)
    return CurveFit(
        "linear_through_origin", a, 0.0, _r_squared(y, fit.predict(x))
    )


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


def run_latency_experiment(
    cfg: BenchConfig, out: Optional[str] = None
) -> BenchResult:
    """Grow one index through cfg.checkpoints, timing every (n, fraction)
    cell; fit log curves for fixed_two and linear for vectors_per_record."""
    params = cfg.hnsw or HnswParams(dim=cfg.dim)
    if params.dim != cfg.dim:
        raise ValueError("hnsw params dim must match cfg.dim")
    corpus = generate_corpus(cfg.checkpoints[-1], cfg.dim, cfg.seed)
    index = HnswIndex(params)
    result = BenchResult()
    inserted = 0
    for n in cfg.checkpoints:
        extend_index(index, corpus, inserted, n)
        inserted = n
        for fraction in cfg.access_fractions:
            if cfg.record_mode == MODE_FIXED_TWO:
                grants = relabel_fixed_two(index, n, fraction)
            else:
                grants = relabel_per_record(
                    index, n, cfg.vectors_per_record, fraction
                )
            rng = np.random.default_rng((cfg.seed, n, int(fraction * 1000)))
            result.latency_points.append(
                measure_latency_point(
                    index,
                    grants,
                    mode=cfg.record_mode,
                    n=n,
                    fraction=fraction,
                    k=cfg.k,
                    trials=cfg.trials,
                    rng=rng,
                    oracle_sample_rate=cfg.oracle_sample_rate,
                )
            )

    for fraction in cfg.access_fractions:
        ns = [p.n for p in result.latency_points if p.fraction == fraction]
        ys = [
            p.mean_latency_s for p in result.latency_points if p.fraction == fraction
        ]
        if len(ns) < 2:
            continue
        if cfg.record_mode == MODE_FIXED_TWO:
            result.latency_fits[(fraction, "logarithmic")] = fit_logarithmic(ns, ys)
            result.latency_fits[(fraction, "linear_through_origin")] = (
                fit_linear_through_origin(ns, ys)
            )
        else:
            result.latency_fits[(fraction, "linear")] = fit_linear(ns, ys)

    if out:
        write_latency_csv(out, result.latency_points)
    return result


def run_memory_experiment(
    sizes: Sequence[int],
    dim: int = 1024,
    seed: int = 0,
    hnsw: Optional[HnswParams] = None,
    out: Optional[str] = None,
) -> BenchResult:
    """Grow one index through `sizes`, recording the memory report at each
    and fitting ax+b with a non-negative intercept."""
    sizes = list(sizes)
    if sizes != sorted(set(sizes)) or not sizes:
        raise ValueError("sizes must be non-empty and strictly ascending")
    params = hnsw or HnswParams(dim=dim)
    corpus = generate_corpus(sizes[-1], dim, seed)
    index = HnswIndex(params)
    result = BenchResult()
    inserted = 0
    for n in sizes:
        extend_index(index, corpus, inserted, n)
        inserted = n
        report = index.memory_report()
        result.memory_points.append(
            MemoryPoint(
                n=n,
                graph_bytes=report["graph_bytes"],
                rows_bytes=report["rows_bytes"],
                total_bytes=report["total_bytes"],
            )
        )

    ns = [p.n for p in result.memory_points]
    if len(ns) >= 2:
        result.memory_fits["graph_bytes"] = fit_linear(
            ns,
            [p.graph_bytes for p in result.memory_points],
            nonnegative_intercept=True,
        )
        result.memory_fits["total_bytes"] = fit_linear(
            ns,
            [p.total_bytes for p in result.memory_points],
            nonnegative_intercept=True,
        )

    if out:
        write_memory_csv(out, result.memory_points)
    return result


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def write_latency_csv(path: str, points: Iterable[LatencyPoint]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(LATENCY_CSV_COLUMNS)
        for p in points:
            writer.writerow(
                [
                    p.mode,
                    p.n,
                    p.fraction,
                    p.trials,
                    f"{p.mean_latency_s:.9f}",
                    f"{p.std_latency_s:.9f}",
                    p.oracle_checks,
                    p.oracle_violations,
                    "" if math.isnan(p.mean_oracle_recall) else f"{p.mean_oracle_recall:.4f}",
                ]
            )


def write_memory_csv(path: str, points: Iterable[MemoryPoint]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(MEMORY_CSV_COLUMNS)
        for p in points:
            writer.writerow(
                [
                    p.n,
                    p.graph_bytes,
                    p.rows_bytes,
                    p.total_bytes,
                    f"{p.graph_bytes / p.n / 1024:.3f}",
                    f"{p.total_bytes / p.n / 1024:.3f}",
                ]
            )
