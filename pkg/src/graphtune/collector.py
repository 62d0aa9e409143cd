"""Performance data collection: one build per construction config, then an efS sweep."""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .dataio import NeighborTable, VectorSet
from .hnsw import HnswIndex, IndexParams, build_index
from .space import ParamConfig

log = logging.getLogger(__name__)

K = 10
CSV_HEADER = ["dataset", "efC", "M", "efS", "recall", "adcn", "qps"]


@dataclass(frozen=True)
class PerfRecord:
    config: ParamConfig
    recall: float
    adcn: float
    qps: float

    def __post_init__(self):
        if not 0.0 <= self.recall <= 1.0:
            raise ValueError(f"recall {self.recall} outside [0, 1]")
        if not self.adcn > 0:
            raise ValueError(f"adcn must be positive, got {self.adcn}")
        if not self.qps > 0:
            raise ValueError(f"qps must be positive, got {self.qps}")


@dataclass(frozen=True)
class StopRule:
    """Stop a sweep once recall and efS have both reached their thresholds."""

    recall_threshold: float = 0.995
    min_efs: int = 500

    def __post_init__(self):
        if not 0.0 <= self.recall_threshold <= 1.01:
            raise ValueError("recall_threshold must lie in [0, 1.01]")

    def for_grid(self, efs_grid: Sequence[int]) -> "StopRule":
        """Same rule with ``min_efs`` moved onto the grid (smallest grid value >= it)."""
        snapped = next((s for s in efs_grid if s >= self.min_efs), efs_grid[-1])
        return StopRule(self.recall_threshold, snapped)

    def reached(self, efs: int, recall: float) -> bool:
        return recall >= self.recall_threshold and efs >= self.min_efs


def measure_recall(returned: Iterable[int], truth: Sequence[int], k: int = K) -> float:
    """Fraction of the ``k`` true neighbors present in ``returned``."""
    truth = list(truth)
    if len(truth) != k:
        raise ValueError(f"truth must have exactly k={k} entries, got {len(truth)}")
    return len(set(int(i) for i in returned) & set(int(i) for i in truth)) / k


def batch_recall(ids: np.ndarray, truth: NeighborTable | np.ndarray, k: int = K) -> float:
    """Mean recall over queries; ``ids`` rows may contain -1 padding."""
    t = truth.ids if isinstance(truth, NeighborTable) else np.asarray(truth)
    t = t[:, :k]
    ids = ids[:, :k]
    hits = 0
    for row, trow in zip(ids, t):
        hits += np.intersect1d(row[row >= 0], trow, assume_unique=True).size
    return hits / (k * t.shape[0])


def adcn(total_dcn: int, query_count: int) -> float:
    """Average distance computations per query."""
    if query_count < 1:
        raise ValueError("query_count must be at least 1")
    return float(total_dcn) / float(query_count)


def sweep_index(
    index: HnswIndex,
    queries: VectorSet,
    truth: NeighborTable,
    cparams: tuple[int, int],
    efs_grid: Sequence[int],
    stop: StopRule,
    timing_repeats: int = 1,
) -> list[PerfRecord]:
    """Run every query at ascending efS until ``stop`` is reached."""
    if any(b <= a for a, b in zip(efs_grid, efs_grid[1:])):
        raise ValueError("efs_grid must be ascending")
    efc, m = cparams
    out = []
    for efs in efs_grid:
        ids, dcn, qps = index.timed_search(queries.data, K, efs, repeats=timing_repeats)
        rec = batch_recall(ids, truth)
        out.append(PerfRecord(ParamConfig(efc, m, efs), rec, adcn(int(dcn.sum()), queries.count), qps))
        if stop.reached(efs, rec):
            break
    return out


def collect_for_construction(
    base: VectorSet,
    queries: VectorSet,
    truth: NeighborTable,
    cparams: tuple[int, int],
    efs_grid: Sequence[int],
    stop: StopRule = StopRule(),
    seed: int = 0,
    index_store: Callable[[tuple[int, int], HnswIndex], None] | None = None,
) -> list[PerfRecord]:
    """Build one index for ``cparams`` and sweep ``efs_grid`` over it."""
    if truth.k < K or truth.query_count != queries.count:
        raise ValueError("ground truth does not match the query set at k=10")
    efc, m = cparams
    index = build_index(base, IndexParams(efc, m, seed))
    if index_store is not None:
        index_store(cparams, index)
    return sweep_index(index, queries, truth, cparams, efs_grid, stop)


def collect_many(
    base: VectorSet,
    queries: VectorSet,
    truth: NeighborTable,
    cparams_list: Sequence[tuple[int, int]],
    efs_grid: Sequence[int],
    stop: StopRule = StopRule(),
    seed: int = 0,
    jobs: int = 1,
    index_store=None,
) -> dict[tuple[int, int], list[PerfRecord]]:
    """Collect several construction configs, optionally on a thread pool."""

    def one(cp):
        log.info("collecting efC=%d M=%d", *cp)
        return cp, collect_for_construction(base, queries, truth, cp, efs_grid, stop, seed, index_store)

    if jobs <= 1:
        return dict(one(cp) for cp in cparams_list)
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return dict(pool.map(one, cparams_list))


# --------------------------------------------------------------------------
# CSV persistence


def write_records(path: str | os.PathLike, dataset: str, records: Iterable[PerfRecord], append: bool = True) -> None:
    """Append rows; rows whose (dataset, efC, M, efS) key is already present are skipped."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    existing = set()
    if append and path.exists():
        existing = {(d, r.config.as_tuple()) for d, r in read_records(path)}
    new_file = not path.exists() or not append
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if new_file:
            w.writerow(CSV_HEADER)
        for r in records:
            key = (dataset, r.config.as_tuple())
            if key in existing:
                continue
            existing.add(key)
            w.writerow([dataset, r.config.efC, r.config.M, r.config.efS, repr(r.recall), repr(r.adcn), repr(r.qps)])


def read_records(path: str | os.PathLike) -> list[tuple[str, PerfRecord]]:
    path = Path(path)
    if not path.exists():
        return []
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            cfg = ParamConfig(int(row["efC"]), int(row["M"]), int(row["efS"]))
            out.append((row["dataset"], PerfRecord(cfg, float(row["recall"]), float(row["adcn"]), float(row["qps"]))))
    return out
