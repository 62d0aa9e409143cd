"""Instrumented HNSW index.

Every base-vector distance evaluated while answering a query is counted
(``dcn``), including the greedy descent through the upper layers. A per-query
distance cache makes repeated visits free, so ``dcn`` is the number of unique
nodes whose distance to the query was computed.

Layout: level-0 adjacency is a dense ``(n, 2M)`` table. Upper-level adjacency
is packed: node ``i`` with level ``L >= 1`` owns rows
``offsets[i] .. offsets[i] + L - 1`` of an ``(R, M)`` table.
"""
from __future__ import annotations

import heapq
import math
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from numba import njit

from .dataio import VectorSet

_MAGIC = b"GTHNSW\x00\x00"
_VERSION = 1
_HEADER = struct.Struct("<IIIIIIqqII")


class IndexFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# numba kernels


@njit(cache=True, inline="always")
def _sqdist_rows(X, a, b):
    s = 0.0
    for t in range(X.shape[1]):
        diff = np.float64(X[a, t]) - np.float64(X[b, t])
        s += diff * diff
    return s


@njit(cache=True, inline="always")
def _dist_q(X, j, q, dcache, dstamp, qstamp, counter):
    if dstamp[j] == qstamp:
        return dcache[j]
    s = 0.0
    for t in range(X.shape[1]):
        diff = np.float64(X[j, t]) - np.float64(q[t])
        s += diff * diff
    dcache[j] = s
    dstamp[j] = qstamp
    counter[0] += 1
    return s


@njit(cache=True, inline="always")
def _neighbors(node, level, links0, deg0, linksU, degU, offsets):
    if level == 0:
        return links0[node], deg0[node]
    r = offsets[node] + level - 1
    return linksU[r], degU[r]


@njit(cache=True)
def _greedy(X, q, cur, curd, level, links0, deg0, linksU, degU, offsets,
            dcache, dstamp, qstamp, counter):
    changed = True
    while changed:
        changed = False
        nb, deg = _neighbors(cur, level, links0, deg0, linksU, degU, offsets)
        for t in range(deg):
            e = np.int64(nb[t])
            de = _dist_q(X, e, q, dcache, dstamp, qstamp, counter)
            if de < curd or (de == curd and e < cur):
                curd = de
                cur = e
                changed = True
    return cur, curd


@njit(cache=True)
def _search_layer(X, q, ep_d, ep_id, ef, level, links0, deg0, linksU, degU, offsets,
                  dcache, dstamp, qstamp, counter, vstamp, vepoch):
    """Beam search on one layer. Returns (dists, ids) ascending by (dist, id)."""
    cand = [(0.0, np.int64(0))]
    cand.pop()
    res = [(0.0, np.int64(0))]
    res.pop()
    for i in range(ep_id.shape[0]):
        e = ep_id[i]
        if vstamp[e] == vepoch:
            continue
        vstamp[e] = vepoch
        heapq.heappush(cand, (ep_d[i], e))
        heapq.heappush(res, (-ep_d[i], -e))
        if len(res) > ef:
            heapq.heappop(res)
    while len(cand) > 0:
        dc, c = heapq.heappop(cand)
        if len(res) >= ef and dc > -res[0][0]:
            break
        nb, deg = _neighbors(c, level, links0, deg0, linksU, degU, offsets)
        for t in range(deg):
            e = np.int64(nb[t])
            if vstamp[e] == vepoch:
                continue
            vstamp[e] = vepoch
            de = _dist_q(X, e, q, dcache, dstamp, qstamp, counter)
            if len(res) < ef or de < -res[0][0]:
                heapq.heappush(cand, (de, e))
                heapq.heappush(res, (-de, -e))
                if len(res) > ef:
                    heapq.heappop(res)
    m = len(res)
    out_d = np.empty(m, dtype=np.float64)
    out_id = np.empty(m, dtype=np.int64)
    for i in range(m - 1, -1, -1):
        nd, nid = heapq.heappop(res)
        out_d[i] = -nd
        out_id[i] = -nid
    return out_d, out_id


@njit(cache=True)
def _select_heuristic(X, cand_d, cand_id, m, keep_pruned):
    """Diversity pruning over candidates sorted ascending by distance to the base node."""
    n = cand_id.shape[0]
    sel = np.empty(min(m, n), dtype=np.int64)
    ns = 0
    pruned = np.empty(n, dtype=np.int64)
    npr = 0
    for i in range(n):
        if ns >= m:
            break
        c = cand_id[i]
        good = True
        for r in range(ns):
            if _sqdist_rows(X, c, sel[r]) <= cand_d[i]:
                good = False
                break
        if good:
            sel[ns] = c
            ns += 1
        else:
            pruned[npr] = c
            npr += 1
    if keep_pruned:
        for i in range(npr):
            if ns >= m:
                break
            sel[ns] = pruned[i]
            ns += 1
    return sel[:ns]


@njit(cache=True)
def _sort_pairs(d, ids):
    # lexicographic (dist, id) order
    order = np.argsort(ids, kind="mergesort")
    d2 = d[order]
    i2 = ids[order]
    order2 = np.argsort(d2, kind="mergesort")
    return d2[order2], i2[order2]


@njit(cache=True)
def _build(X, levels, offsets, n_rows, M, efc, keep_pruned):
    n = X.shape[0]
    M0 = 2 * M
    links0 = np.full((n, M0), -1, dtype=np.int32)
    deg0 = np.zeros(n, dtype=np.int32)
    linksU = np.full((max(n_rows, 1), M), -1, dtype=np.int32)
    degU = np.zeros(max(n_rows, 1), dtype=np.int32)
    dcache = np.zeros(n, dtype=np.float64)
    dstamp = np.zeros(n, dtype=np.int64)
    vstamp = np.zeros(n, dtype=np.int64)
    counter = np.zeros(1, dtype=np.int64)
    entry = np.int64(0)
    max_level = levels[0]
    qstamp = 0
    vepoch = 0
    for i in range(1, n):
        q = X[i]
        qstamp += 1
        li = levels[i]
        cur = entry
        curd = _dist_q(X, cur, q, dcache, dstamp, qstamp, counter)
        for level in range(max_level, li, -1):
            cur, curd = _greedy(X, q, cur, curd, level, links0, deg0, linksU, degU, offsets,
                                dcache, dstamp, qstamp, counter)
        ep_d = np.array([curd])
        ep_id = np.array([cur])
        for level in range(min(li, max_level), -1, -1):
            vepoch += 1
            w_d, w_id = _search_layer(X, q, ep_d, ep_id, efc, level, links0, deg0, linksU, degU,
                                      offsets, dcache, dstamp, qstamp, counter, vstamp, vepoch)
            sel = _select_heuristic(X, w_d, w_id, M, keep_pruned)
            mmax = M0 if level == 0 else M
            nb, _ = _neighbors(i, level, links0, deg0, linksU, degU, offsets)
            for t in range(sel.shape[0]):
                nb[t] = sel[t]
            if level == 0:
                deg0[i] = sel.shape[0]
            else:
                degU[offsets[i] + level - 1] = sel.shape[0]
            for t in range(sel.shape[0]):
                e = sel[t]
                enb, edeg = _neighbors(e, level, links0, deg0, linksU, degU, offsets)
                if edeg < mmax:
                    enb[edeg] = i
                    edeg += 1
                else:
                    cd = np.empty(edeg + 1, dtype=np.float64)
                    cid = np.empty(edeg + 1, dtype=np.int64)
                    for u in range(edeg):
                        cid[u] = enb[u]
                        cd[u] = _sqdist_rows(X, e, enb[u])
                    cid[edeg] = i
                    cd[edeg] = _sqdist_rows(X, e, i)
                    cd, cid = _sort_pairs(cd, cid)
                    keep = _select_heuristic(X, cd, cid, mmax, keep_pruned)
                    for u in range(keep.shape[0]):
                        enb[u] = keep[u]
                    for u in range(keep.shape[0], mmax):
                        enb[u] = -1
                    edeg = keep.shape[0]
                if level == 0:
                    deg0[e] = edeg
                else:
                    degU[offsets[e] + level - 1] = edeg
            ep_d = w_d
            ep_id = w_id
        if li > max_level:
            max_level = li
            entry = i
    return links0, deg0, linksU, degU, entry, max_level


@njit(cache=True)
def _search_batch(X, Q, k, ef, entry, max_level, links0, deg0, linksU, degU, offsets):
    n = X.shape[0]
    nq = Q.shape[0]
    out = np.full((nq, k), -1, dtype=np.int64)
    dcn = np.zeros(nq, dtype=np.int64)
    dcache = np.zeros(n, dtype=np.float64)
    dstamp = np.zeros(n, dtype=np.int64)
    vstamp = np.zeros(n, dtype=np.int64)
    counter = np.zeros(1, dtype=np.int64)
    for qi in range(nq):
        q = Q[qi]
        qstamp = qi + 1
        counter[0] = 0
        cur = np.int64(entry)
        curd = _dist_q(X, cur, q, dcache, dstamp, qstamp, counter)
        for level in range(max_level, 0, -1):
            cur, curd = _greedy(X, q, cur, curd, level, links0, deg0, linksU, degU, offsets,
                                dcache, dstamp, qstamp, counter)
        w_d, w_id = _search_layer(X, q, np.array([curd]), np.array([cur]), ef, 0, links0, deg0,
                                  linksU, degU, offsets, dcache, dstamp, qstamp, counter,
                                  vstamp, qstamp)
        for t in range(min(k, w_id.shape[0])):
            out[qi, t] = w_id[t]
        dcn[qi] = counter[0]
    return out, dcn


# --------------------------------------------------------------------------
# Python surface


@dataclass(frozen=True)
class IndexParams:
    """Construction parameters.

    Grid pairs with ``efC < M`` are legal; the build then uses ``max(efC, M)``
    candidates, since fewer than ``M`` candidates could never fill a node.
    """

    efC: int
    M: int
    seed: int = 0
    keep_pruned: bool = True

    def __post_init__(self):
        if not 20 <= self.efC <= 800:
            raise ValueError(f"efC={self.efC} outside [20, 800]")
        if not 4 <= self.M <= 100:
            raise ValueError(f"M={self.M} outside [4, 100]")

    @property
    def effective_efc(self) -> int:
        return max(self.efC, self.M)


@dataclass(frozen=True)
class SearchResult:
    ids: np.ndarray
    dcn: int


def _level_offsets(levels: np.ndarray) -> tuple[np.ndarray, int]:
    offsets = np.full(levels.shape[0], -1, dtype=np.int64)
    upper = levels > 0
    starts = np.concatenate([[0], np.cumsum(levels[upper])[:-1]]).astype(np.int64)
    offsets[upper] = starts
    return offsets, int(levels[upper].sum())


def draw_levels(n: int, M: int, seed: int) -> np.ndarray:
    """Node levels ``floor(-ln(u) / ln(M))`` with ``u`` uniform in (0, 1]."""
    rng = np.random.default_rng(seed)
    u = 1.0 - rng.random(n)
    return np.floor(-np.log(u) / math.log(M)).astype(np.int32)


class HnswIndex:
    """An immutable HNSW graph over a fixed base set."""

    def __init__(self, vectors, params, levels, links0, deg0, linksU, degU, entry, max_level):
        self.vectors = vectors
        self.params = params
        self.levels = levels
        self.offsets, _ = _level_offsets(levels)
        self.links0 = links0
        self.deg0 = deg0
        self.linksU = linksU
        self.degU = degU
        self.entry_point = int(entry)
        self.max_level = int(max_level)

    @property
    def node_count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def neighbors(self, node: int, level: int = 0) -> np.ndarray:
        if level > self.levels[node]:
            raise ValueError(f"node {node} is not present on level {level}")
        if level == 0:
            return self.links0[node, : self.deg0[node]].copy()
        r = self.offsets[node] + level - 1
        return self.linksU[r, : self.degU[r]].copy()

    def layer_nodes(self, level: int) -> np.ndarray:
        return np.flatnonzero(self.levels >= level)

    def total_occurrences(self) -> int:
        return int((self.levels.astype(np.int64) + 1).sum())

    def search(self, query, k: int, efS: int) -> SearchResult:
        q = np.asarray(query, dtype=np.float32).reshape(1, -1)
        ids, dcn = self.search_batch(q, k, efS)
        return SearchResult(ids[0][ids[0] >= 0], int(dcn[0]))

    def search_batch(self, queries, k: int, efS: int) -> tuple[np.ndarray, np.ndarray]:
        """Answer every query row; returns ``(ids[nq, k], dcn[nq])``."""
        if efS < k:
            raise ValueError(f"efS={efS} must be >= k={k}")
        Q = np.ascontiguousarray(queries, dtype=np.float32)
        if Q.ndim != 2 or Q.shape[1] != self.dim:
            raise ValueError(f"query dimension {Q.shape[-1]} does not match index dimension {self.dim}")
        return _search_batch(self.vectors, Q, k, efS, self.entry_point, self.max_level,
                             self.links0, self.deg0, self.linksU, self.degU, self.offsets)

    def timed_search(self, queries, k: int, efS: int, repeats: int = 3):
        """Like :meth:`search_batch` plus the best-of-``repeats`` wall-clock QPS."""
        best = math.inf
        for _ in range(max(repeats, 1)):
            t0 = time.perf_counter()
            ids, dcn = self.search_batch(queries, k, efS)
            best = min(best, time.perf_counter() - t0)
        qps = len(queries) / max(best, 1e-9)
        return ids, dcn, qps

    def save(self, path, include_vectors: bool = True) -> None:
        p = self.params
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(_HEADER.pack(_VERSION, self.node_count, self.dim, p.efC, p.M, int(p.keep_pruned),
                                 p.seed, self.entry_point, self.max_level, int(include_vectors)))
            f.write(self.levels.astype("<i4").tobytes())
            f.write(self.deg0.astype("<i4").tobytes())
            f.write(self.links0.astype("<i4").tobytes())
            f.write(np.int64(self.degU.shape[0]).astype("<i8").tobytes())
            f.write(self.degU.astype("<i4").tobytes())
            f.write(self.linksU.astype("<i4").tobytes())
            if include_vectors:
                f.write(self.vectors.astype("<f4").tobytes())

    @classmethod
    def load(cls, path, base: VectorSet | None = None) -> "HnswIndex":
        raw = Path(path).read_bytes()
        if raw[: len(_MAGIC)] != _MAGIC:
            raise IndexFormatError(f"{path}: not an index file")
        off = len(_MAGIC)
        (version, n, dim, efc, M, keep, seed, entry, max_level, has_vec) = _HEADER.unpack_from(raw, off)
        if version != _VERSION:
            raise IndexFormatError(f"{path}: unsupported index version {version}")
        off += _HEADER.size

        def take(dtype, count):
            nonlocal off
            arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
            off += arr.nbytes
            return arr.copy()

        levels = take("<i4", n).astype(np.int32)
        deg0 = take("<i4", n).astype(np.int32)
        links0 = take("<i4", n * 2 * M).astype(np.int32).reshape(n, 2 * M)
        rows = int(take("<i8", 1)[0])
        degU = take("<i4", rows).astype(np.int32)
        linksU = take("<i4", rows * M).astype(np.int32).reshape(rows, M)
        if has_vec:
            vectors = take("<f4", n * dim).astype(np.float32).reshape(n, dim)
        elif base is None:
            raise IndexFormatError(f"{path}: stored without vectors; pass the base set")
        else:
            vectors = base.data
        if vectors.shape != (n, dim):
            raise IndexFormatError(f"{path}: base shape {vectors.shape} does not match index ({n}, {dim})")
        params = IndexParams(efc, M, seed, bool(keep))
        return cls(np.ascontiguousarray(vectors), params, levels, links0, deg0, linksU, degU, entry, max_level)


class GraphIndex(Protocol):
    """What the collector and post-processing need from a proximity graph."""

    node_count: int

    def search_batch(self, queries, k: int, efS: int) -> tuple[np.ndarray, np.ndarray]: ...

    def timed_search(self, queries, k: int, efS: int, repeats: int = 3): ...


def build_index(base: VectorSet, params: IndexParams) -> HnswIndex:
    """Insert the base vectors in id order. Deterministic for a given seed."""
    if base is None or base.count < 1:
        raise ValueError("cannot build an index over an empty base set")
    X = base.data
    levels = draw_levels(base.count, params.M, params.seed)
    offsets, n_rows = _level_offsets(levels)
    links0, deg0, linksU, degU, entry, max_level = _build(
        X, levels, offsets, n_rows, params.M, params.effective_efc, params.keep_pruned
    )
    return HnswIndex(X, params, levels, links0, deg0, linksU, degU, entry, max_level)


def search(index: HnswIndex, query, k: int, efS: int) -> SearchResult:
    return index.search(query, k, efS)


def select_neighbors_heuristic(candidates, M: int, vectors, keep_pruned: bool = True) -> list[int]:
    """Prune ``(id, distance)`` candidates of one node down to at most ``M`` ids.

    Distances are Euclidean distances to the node being linked, ascending, and
    ``vectors[id]`` must be the candidate's vector. A candidate survives only if it is strictly closer to that node than to every
    neighbor already kept. With ``keep_pruned`` the nearest pruned candidates
    refill the list up to ``M``.
    """
    if len(candidates) == 0:
        return []
    ids = np.array([c[0] for c in candidates], dtype=np.int64)
    d = np.array([c[1] for c in candidates], dtype=np.float64) ** 2
    X = np.ascontiguousarray(vectors, dtype=np.float32)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return [int(i) for i in _select_heuristic(X, d, ids, M, keep_pruned)]


def level0_connected(index: HnswIndex) -> bool:
    """Whether every node is reachable from the entry point on level 0."""
    seen = np.zeros(index.node_count, dtype=bool)
    stack = [index.entry_point]
    seen[index.entry_point] = True
    while stack:
        u = stack.pop()
        for v in index.links0[u, : index.deg0[u]]:
            if not seen[v]:
                seen[v] = True
                stack.append(int(v))
    return bool(seen.all())
