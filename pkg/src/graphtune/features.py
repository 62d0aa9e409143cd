"""Dataset feature vector: sizes, dimensionality, LID and the DS/DR statistics."""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from ._knn import knn
from .dataio import VectorSet

K = 10


@dataclass(frozen=True)
class DatasetFeatures:
    c_b: int
    c_d: int
    d: int
    lid: float
    ds_min: float
    ds_mean: float
    ds_max: float
    ds_std: float
    dr_min: float
    dr_mean: float
    dr_max: float
    dr_std: float

    FIELDS = (
        "c_b", "c_d", "d", "lid",
        "ds_min", "ds_mean", "ds_max", "ds_std",
        "dr_min", "dr_mean", "dr_max", "dr_std",
    )

    def to_vector(self) -> np.ndarray:
        return np.array([float(getattr(self, f)) for f in self.FIELDS])

    @classmethod
    def from_vector(cls, v) -> "DatasetFeatures":
        v = [float(x) for x in v]
        return cls(int(v[0]), int(v[1]), int(v[2]), *v[3:])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "DatasetFeatures":
        names = [f.name for f in fields(cls)]
        return cls(**{n: raw[n] for n in names})


def _sample_ids(n: int, sample: int, seed: int) -> np.ndarray:
    if sample >= n:
        return np.arange(n, dtype=np.int64)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=sample, replace=False)).astype(np.int64)


def _stats(values: np.ndarray) -> tuple[float, float, float, float]:
    return (float(values.min()), float(values.mean()), float(values.max()), float(values.std()))


def estimate_lid(base: VectorSet, k_lid: int = 100, sample: int = 1000, seed: int = 0) -> float:
    """Mean maximum-likelihood LID over sampled points.

    Per point, with neighbor distances d_1 <= ... <= d_k (self excluded):
    ``-1 / ((1/k) * sum_{i<k} ln(d_i / d_k))``. Points with a zero neighbor
    distance are skipped.
    """
    if k_lid < 2:
        raise ValueError("k_lid must be at least 2")
    k = min(k_lid, base.count - 1)
    if k < 2:
        raise ValueError("need at least 3 vectors to estimate LID")
    ids = _sample_ids(base.count, sample, seed)
    _, sq = knn(base.data, base.data[ids], k, exclude=ids)
    dist = np.sqrt(sq)
    ok = (dist[:, 0] > 0) & (dist[:, -1] > dist[:, 0])
    if not ok.any():
        raise ValueError("degenerate distances: every sampled point has a duplicate neighbor")
    dist = dist[ok]
    logs = np.log(dist[:, :-1] / dist[:, -1:]).sum(axis=1) / k
    return float(np.mean(-1.0 / logs))


def compute_ds_stats(base: VectorSet, k: int = K, sample: int = 1000, seed: int = 0):
    """(min, mean, max, std) of each sampled vector's summed distance to its k NNs."""
    if base.count <= k:
        raise ValueError(f"base has {base.count} vectors; need more than k={k}")
    ids = _sample_ids(base.count, sample, seed)
    _, sq = knn(base.data, base.data[ids], k, exclude=ids)
    return _stats(np.sqrt(sq).sum(axis=1))


def compute_dr_stats(base: VectorSet, queries: VectorSet, k: int = K, nonknn_sample: int = 1000, seed: int = 0):
    """(min, mean, max, std) over queries of mean kNN distance / mean non-kNN distance.

    The non-kNN mean uses up to ``nonknn_sample`` base vectors drawn without
    replacement from outside the query's kNN set (all of them if fewer exist).
    """
    if base.count <= k:
        raise ValueError(f"base has {base.count} vectors; need more than k={k}")
    if base.dim != queries.dim:
        raise ValueError("dimension mismatch between base and queries")
    rng = np.random.default_rng(seed)
    knn_ids, sq = knn(base.data, queries.data, k)
    knn_mean = np.sqrt(sq).mean(axis=1)
    n = base.count
    X = base.data.astype(np.float64)
    ratios = []
    for qi in range(queries.count):
        if n - k <= nonknn_sample:
            mask = np.ones(n, dtype=bool)
            mask[knn_ids[qi]] = False
            others = np.flatnonzero(mask)
        else:
            draw = rng.choice(n, size=nonknn_sample + k, replace=False)
            others = draw[~np.isin(draw, knn_ids[qi])][:nonknn_sample]
        diff = X[others] - queries.data[qi].astype(np.float64)
        far = np.sqrt((diff * diff).sum(axis=1)).mean()
        if far == 0:
            continue
        ratios.append(knn_mean[qi] / far)
    if not ratios:
        raise ValueError("every query has zero mean distance to its non-kNN set")
    return _stats(np.asarray(ratios))


def extract_features(
    base: VectorSet,
    queries: VectorSet,
    k: int = K,
    lid_k: int = 100,
    sample: int = 1000,
    nonknn_sample: int = 1000,
    seed: int = 0,
) -> DatasetFeatures:
    if base.dim != queries.dim:
        raise ValueError(f"dimension mismatch: base {base.dim} vs queries {queries.dim}")
    lid = estimate_lid(base, lid_k, sample, seed)
    ds = compute_ds_stats(base, k, sample, seed + 1)
    dr = compute_dr_stats(base, queries, k, nonknn_sample, seed + 2)
    feats = DatasetFeatures(base.count, queries.count, base.dim, lid, *ds, *dr)
    if not all(math.isfinite(x) for x in feats.to_vector()):
        raise ValueError(f"non-finite feature values: {feats}")
    return feats


def load_features(path: str | os.PathLike) -> dict[str, DatasetFeatures]:
    path = Path(path)
    if not path.exists():
        return {}
    raw = json.loads(path.read_text())
    return {name: DatasetFeatures.from_dict(v) for name, v in raw.items()}


def save_features(path: str | os.PathLike, feats: dict[str, DatasetFeatures]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({n: f.to_dict() for n, f in sorted(feats.items())}, indent=2))
