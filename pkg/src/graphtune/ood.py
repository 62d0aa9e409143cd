"""Dataset similarity detection via nearest-neighbor distances in QPP embedding space."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .features import DatasetFeatures
from .qpp import QppModel
from .space import ConfigSpace

PERCENTILE = 0.95
MAX_CANDIDATE_ROWS = 20000


@dataclass(frozen=True)
class SimilarityVerdict:
    similar: bool
    d_bar: float
    d_tr: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def kth_nn_distances(base, new, k: int = 1, exclude_self: bool = False, chunk: int = 2048) -> np.ndarray:
    """Distance from each ``new`` row to its k-th nearest ``base`` row.

    Candidates come from a BLAS expansion of the squared distance; the chosen
    ``k`` are then re-measured exactly, so identical rows give exactly 0.
    With ``exclude_self`` row ``i`` of ``new`` is row ``i`` of ``base`` and is skipped.
    """
    b = _as_matrix(base)
    n = _as_matrix(new)
    avail = b.shape[0] - (1 if exclude_self else 0)
    if k < 1 or k > avail:
        raise ValueError(f"k={k} not in [1, {avail}]")
    bsq = (b * b).sum(axis=1)
    out = np.empty(n.shape[0])
    width = min(k + 2, avail)
    # keep each distance block near 32 MB whatever the base size
    chunk = max(16, min(chunk, 4_000_000 // max(b.shape[0], 1)))
    for start in range(0, n.shape[0], chunk):
        block = n[start : start + chunk]
        d2 = (block * block).sum(axis=1)[:, None] + bsq[None, :] - 2.0 * block @ b.T
        if exclude_self:
            rows = np.arange(block.shape[0])
            d2[rows, start + rows] = np.inf
        cand = np.argpartition(d2, width - 1, axis=1)[:, :width]
        diff = b[cand] - block[:, None, :]
        exact = np.sqrt((diff * diff).sum(axis=2))
        exact.sort(axis=1)
        out[start : start + block.shape[0]] = exact[:, k - 1]
    return out


def cap_rows(x: np.ndarray, cap: int = MAX_CANDIDATE_ROWS, seed: int = 0) -> np.ndarray:
    """Uniform subsample of at most ``cap`` rows, kept in their original order."""
    if x.shape[0] <= cap:
        return x
    rng = np.random.default_rng(seed)
    return x[np.sort(rng.choice(x.shape[0], size=cap, replace=False))]


def nearest_rank(values, q: float = PERCENTILE) -> float:
    """Nearest-rank percentile: element ``ceil(q * N) - 1`` of the sorted values."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.size == 0:
        raise ValueError("no values")
    return float(v[max(math.ceil(q * v.size) - 1, 0)])


def distance_threshold(base_embeddings, k: int = 1) -> float:
    """95th percentile of each embedding's distance to its k-th nearest other embedding."""
    b = _as_matrix(base_embeddings)
    if b.shape[0] <= k:
        raise ValueError(f"need more than k={k} base embeddings, got {b.shape[0]}")
    return nearest_rank(kth_nn_distances(b, b, k, exclude_self=True))


def mean_nn_distance(new_embeddings, base_embeddings, k: int = 1) -> float:
    """Mean distance from each new embedding to its k-th nearest base embedding."""
    b = _as_matrix(base_embeddings)
    n = _as_matrix(new_embeddings)
    if b.shape[0] == 0:
        raise ValueError("empty base embeddings")
    return float(kth_nn_distances(b, n, k).mean())


def verdict_from_embeddings(base_embeddings, new_embeddings, k: int = 1) -> SimilarityVerdict:
    if len(base_embeddings) == 0 or len(new_embeddings) == 0:
        raise ValueError("both embedding sets must be non-empty")
    d_tr = distance_threshold(base_embeddings, k)
    d_bar = mean_nn_distance(new_embeddings, base_embeddings, k)
    return SimilarityVerdict(bool(d_bar <= d_tr), d_bar, d_tr)


def detect(base_inputs, new_inputs, model: QppModel, k: int = 1) -> SimilarityVerdict:
    """Embed both normalized input sets with the model and compare them."""
    base_inputs = np.asarray(base_inputs)
    new_inputs = np.asarray(new_inputs)
    if len(base_inputs) == 0 or len(new_inputs) == 0:
        raise ValueError("both input sets must be non-empty")
    return verdict_from_embeddings(model.embed_inputs(base_inputs), model.embed_inputs(new_inputs), k)


def candidate_inputs(
    model: QppModel,
    feats: DatasetFeatures,
    space: ConfigSpace,
    cap: int = MAX_CANDIDATE_ROWS,
    seed: int = 0,
) -> np.ndarray:
    """The new dataset's features crossed with every grid config, subsampled to ``cap`` rows."""
    configs = list(space.configs())
    keep = cap_rows(np.arange(len(configs)), cap, seed)
    return model.inputs([configs[i] for i in keep], feats)
