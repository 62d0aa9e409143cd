"""Vector datasets in the fvecs/bvecs/ivecs formats and the ground-truth oracle."""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._knn import knn

_ELEMENT = {
    "fvecs": np.dtype("<f4"),
    "ivecs": np.dtype("<i4"),
    "bvecs": np.dtype("u1"),
}


class VecsFormatError(ValueError):
    """The file does not follow the *vecs record layout."""


@dataclass(frozen=True)
class VectorSet:
    """``count`` vectors of dimension ``dim`` stored as a float32 matrix."""

    data: np.ndarray

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"expected a non-empty 2-D array, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("vector set contains NaN or Inf")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def __len__(self) -> int:
        return self.count

    def scaled(self, factor: float) -> "VectorSet":
        return VectorSet(self.data * np.float32(factor))


@dataclass(frozen=True)
class NeighborTable:
    """Exact neighbors: row ``i`` lists the ``k`` base ids closest to query ``i``."""

    ids: np.ndarray

    def __post_init__(self):
        ids = np.ascontiguousarray(self.ids, dtype=np.int32)
        if ids.ndim != 2:
            raise ValueError("neighbor ids must be 2-D")
        object.__setattr__(self, "ids", ids)

    @property
    def query_count(self) -> int:
        return self.ids.shape[0]

    @property
    def k(self) -> int:
        return self.ids.shape[1]


def _format_of(path: Path, fmt: str | None) -> str:
    fmt = fmt or path.suffix.lstrip(".")
    if fmt not in _ELEMENT:
        raise ValueError(f"unknown vector format {fmt!r}; expected one of {sorted(_ELEMENT)}")
    return fmt


def read_vecs(path: str | os.PathLike, fmt: str | None = None) -> np.ndarray:
    """Raw records of a *vecs file as a 2-D array of the format's element type."""
    path = Path(path)
    fmt = _format_of(path, fmt)
    elem = _ELEMENT[fmt]
    raw = path.read_bytes()
    if not raw:
        raise VecsFormatError(f"{path}: no records")
    if len(raw) < 4:
        raise OSError(f"{path}: truncated header")
    dim = int(np.frombuffer(raw, dtype="<i4", count=1)[0])
    if dim < 1:
        raise VecsFormatError(f"{path}: invalid dimension {dim}")
    rec = 4 + dim * elem.itemsize
    if len(raw) % rec:
        # either a short tail or records of a different dimension
        _check_dims(raw, dim, elem.itemsize, path)
        raise OSError(f"{path}: truncated file ({len(raw)} bytes is not a multiple of {rec})")
    n = len(raw) // rec
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, rec)
    dims = buf[:, :4].copy().view("<i4").ravel()
    if (dims != dim).any():
        bad = int(np.flatnonzero(dims != dim)[0])
        raise VecsFormatError(f"{path}: record {bad} has dimension {dims[bad]}, expected {dim}")
    return buf[:, 4:].copy().view(elem).reshape(n, dim)


def _check_dims(raw: bytes, dim: int, itemsize: int, path: Path) -> None:
    off = 0
    i = 0
    while off + 4 <= len(raw):
        d = int(np.frombuffer(raw, dtype="<i4", count=1, offset=off)[0])
        if d != dim:
            raise VecsFormatError(f"{path}: record {i} has dimension {d}, expected {dim}")
        off += 4 + dim * itemsize
        i += 1


def write_vecs(path: str | os.PathLike, array: np.ndarray, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = _format_of(path, fmt)
    elem = _ELEMENT[fmt]
    array = np.asarray(array)
    if array.ndim != 2 or array.shape[0] == 0:
        raise ValueError("need a non-empty 2-D array")
    n, dim = array.shape
    body = np.ascontiguousarray(array.astype(elem, copy=False)).view(np.uint8).reshape(n, -1)
    head = np.full((n, 1), dim, dtype="<i4").view(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.hstack([head, body]).tobytes())


def load_vectors(path: str | os.PathLike, fmt: str | None = None) -> VectorSet:
    """Load fvecs/bvecs/ivecs; byte and integer components are widened to float32."""
    return VectorSet(read_vecs(path, fmt).astype(np.float32))


def save_vectors(path: str | os.PathLike, vs: VectorSet) -> None:
    write_vecs(path, vs.data, "fvecs")


def load_neighbors(path: str | os.PathLike) -> NeighborTable:
    return NeighborTable(read_vecs(path, "ivecs"))


def save_neighbors(path: str | os.PathLike, table: NeighborTable) -> None:
    write_vecs(path, table.ids, "ivecs")


def compute_ground_truth(base: VectorSet, queries: VectorSet, k: int = 10) -> NeighborTable:
    """Exact ``k`` nearest base ids for every query, ties by ascending id."""
    if base.dim != queries.dim:
        raise ValueError(f"dimension mismatch: base {base.dim} vs queries {queries.dim}")
    if k > base.count:
        raise ValueError(f"k={k} exceeds base cardinality {base.count}")
    ids, _ = knn(base.data, queries.data, k)
    return NeighborTable(ids)


def make_synthetic(
    kind: str, n: int, dim: int, seed: int = 0, n_queries: int = 200
) -> tuple[VectorSet, VectorSet]:
    """Small synthetic (base, queries) pairs for demos and tests.

    ``uniform``: i.i.d. uniform in the unit cube. ``gaussian``: standard normal.
    ``clustered``: a Gaussian mixture with 16 tight clusters. ``lowrank``: data
    on a random 4-dimensional linear subspace plus small noise. Queries are
    drawn from the same distribution as the base.
    """
    rng = np.random.default_rng(seed)
    total = n + n_queries
    if kind == "uniform":
        x = rng.random((total, dim))
    elif kind == "gaussian":
        x = rng.standard_normal((total, dim))
    elif kind == "clustered":
        centers = rng.standard_normal((16, dim)) * 4.0
        x = centers[rng.integers(0, 16, total)] + rng.standard_normal((total, dim)) * 0.5
    elif kind == "lowrank":
        basis = rng.standard_normal((4, dim))
        x = rng.standard_normal((total, 4)) @ basis + rng.standard_normal((total, dim)) * 0.05
    else:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    x = x.astype(np.float32)
    return VectorSet(x[:n]), VectorSet(x[n:])
