"""Exact brute-force k-nearest-neighbor kernel.

Squared Euclidean distances are accumulated in float64 in coordinate order,
the same arithmetic the HNSW kernel uses, so oracle and index agree bit for
bit. Ties are broken by ascending id.
"""
import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _knn_rows(base, queries, k, exclude):
    n, d = base.shape
    nq = queries.shape[0]
    ids = np.full((nq, k), -1, dtype=np.int64)
    dists = np.full((nq, k), np.inf, dtype=np.float64)
    for qi in range(nq):
        skip = exclude[qi]
        row_ids = ids[qi]
        row_d = dists[qi]
        filled = 0
        for j in range(n):
            if j == skip:
                continue
            s = 0.0
            for t in range(d):
                diff = np.float64(base[j, t]) - np.float64(queries[qi, t])
                s += diff * diff
            if filled < k:
                pos = filled
                filled += 1
            elif s < row_d[k - 1]:
                # j is the largest id seen so far, so an equal distance never displaces
                pos = k - 1
            else:
                continue
            while pos > 0 and row_d[pos - 1] > s:
                row_d[pos] = row_d[pos - 1]
                row_ids[pos] = row_ids[pos - 1]
                pos -= 1
            row_d[pos] = s
            row_ids[pos] = j
    return ids, dists


def knn(base: np.ndarray, queries: np.ndarray, k: int, exclude: np.ndarray | None = None):
    """Exact k nearest neighbors of each query row.

    Returns ``(ids, squared_distances)``, both shaped ``(len(queries), k)`` and
    sorted ascending with ties by id. ``exclude[i]`` names one base id to skip for
    query ``i`` (use -1 for none); this is how self-matches are dropped.
    """
    base = np.ascontiguousarray(base)
    queries = np.ascontiguousarray(queries)
    if base.ndim != 2 or queries.ndim != 2:
        raise ValueError("base and queries must be 2-D")
    if base.shape[1] != queries.shape[1]:
        raise ValueError(f"dimension mismatch: base {base.shape[1]} vs queries {queries.shape[1]}")
    available = base.shape[0] - (0 if exclude is None else 1)
    if k < 1 or k > available:
        raise ValueError(f"k={k} not in [1, {available}]")
    if exclude is None:
        exclude = np.full(queries.shape[0], -1, dtype=np.int64)
    else:
        exclude = np.ascontiguousarray(exclude, dtype=np.int64)
    return _knn_rows(base, queries, k, exclude)
