"""Query performance prediction: (config, dataset features) -> (recall, ADCN)."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .collector import PerfRecord
from .densenet import DenseNet, TrainSpec, fit
from .features import DatasetFeatures
from .space import EFC_RANGE, EFS_RANGE, M_RANGE, ParamConfig

INPUT_NAMES = ("efC", "M", "efS") + DatasetFeatures.FIELDS
LOG_FEATURES = {"efC", "efS", "c_b", "c_d"}
HIDDEN = (128, 128, 64)
HEADROOM = 0.10

# config axes have fixed bounds; dataset features and ADCN take theirs from data
_FIXED = {"efC": EFC_RANGE, "M": M_RANGE, "efS": EFS_RANGE}


@dataclass
class Normalizer:
    """Per-column transform (``log10`` or ``linear``) followed by min-max to [0, 1]."""

    tags: tuple[str, ...]
    lo: np.ndarray
    hi: np.ndarray
    adcn_lo: float
    adcn_hi: float

    @classmethod
    def fit(cls, raw_inputs: np.ndarray, adcn_values: np.ndarray, headroom: float = HEADROOM) -> "Normalizer":
        raw_inputs = np.asarray(raw_inputs, dtype=np.float64)
        tags = tuple("log10" if n in LOG_FEATURES else "linear" for n in INPUT_NAMES)
        t = _transform(raw_inputs, tags)
        lo = t.min(axis=0)
        hi = t.max(axis=0)
        for j, name in enumerate(INPUT_NAMES):
            if name in _FIXED:
                a, b = _FIXED[name]
                lo[j], hi[j] = (np.log10(a), np.log10(b)) if tags[j] == "log10" else (a, b)
            else:
                lo[j], hi[j] = _widen(lo[j], hi[j], headroom)
        la = np.log10(np.asarray(adcn_values, dtype=np.float64))
        alo, ahi = _widen(la.min(), la.max(), headroom)
        return cls(tags, lo, hi, float(alo), float(ahi))

    def normalize(self, raw_inputs: np.ndarray) -> np.ndarray:
        t = _transform(np.atleast_2d(np.asarray(raw_inputs, dtype=np.float64)), self.tags)
        return np.clip((t - self.lo) / (self.hi - self.lo), 0.0, 1.0)

    def denormalize(self, unit: np.ndarray) -> np.ndarray:
        t = np.atleast_2d(unit) * (self.hi - self.lo) + self.lo
        out = t.copy()
        for j, tag in enumerate(self.tags):
            if tag == "log10":
                out[:, j] = 10.0 ** t[:, j]
        return out

    def adcn_to_unit(self, adcn) -> np.ndarray:
        return (np.log10(adcn) - self.adcn_lo) / (self.adcn_hi - self.adcn_lo)

    def adcn_from_unit(self, unit) -> np.ndarray:
        return 10.0 ** (np.asarray(unit) * (self.adcn_hi - self.adcn_lo) + self.adcn_lo)

    def to_dict(self) -> dict:
        return {
            "names": list(INPUT_NAMES),
            "tags": list(self.tags),
            "lo": self.lo.tolist(),
            "hi": self.hi.tolist(),
            "adcn_lo": self.adcn_lo,
            "adcn_hi": self.adcn_hi,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Normalizer":
        if tuple(raw["names"]) != INPUT_NAMES:
            raise ValueError("normalizer columns do not match this version")
        return cls(tuple(raw["tags"]), np.array(raw["lo"]), np.array(raw["hi"]), raw["adcn_lo"], raw["adcn_hi"])


def _transform(x: np.ndarray, tags: Sequence[str]) -> np.ndarray:
    out = x.copy()
    for j, tag in enumerate(tags):
        if tag == "log10":
            out[:, j] = np.log10(x[:, j])
    return out


def _widen(lo: float, hi: float, headroom: float) -> tuple[float, float]:
    span = hi - lo
    if span <= 0:
        pad = max(abs(lo) * headroom, 1e-3)
        return lo - pad, hi + pad
    return lo - headroom * span, hi + headroom * span


def raw_input_rows(configs: Iterable[ParamConfig], feats: DatasetFeatures) -> np.ndarray:
    df = feats.to_vector()
    cfg = np.array([c.as_tuple() for c in configs], dtype=np.float64).reshape(-1, 3)
    return np.hstack([cfg, np.broadcast_to(df, (cfg.shape[0], df.size))])


@dataclass
class QppSamples:
    """Normalized training rows: inputs ``(N, 15)``, targets ``(N, 2)`` = (recall, unit log-ADCN)."""

    inputs: np.ndarray
    targets: np.ndarray
    provenance: list[str]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def concat(self, other: "QppSamples") -> "QppSamples":
        return QppSamples(
            np.vstack([self.inputs, other.inputs]),
            np.vstack([self.targets, other.targets]),
            self.provenance + other.provenance,
        )

    def subset(self, mask) -> "QppSamples":
        idx = np.flatnonzero(mask)
        return QppSamples(self.inputs[idx], self.targets[idx], [self.provenance[i] for i in idx])


def make_training_matrix(
    perf: Mapping[str, Sequence[PerfRecord]],
    feats: Mapping[str, DatasetFeatures],
    norm: Normalizer | None = None,
) -> tuple[QppSamples, Normalizer]:
    """One normalized sample per record. Fits a normalizer when none is given."""
    raw_rows, adcns, recalls, prov = [], [], [], []
    for name, records in perf.items():
        if name not in feats:
            raise KeyError(f"no features for dataset {name!r}")
        if not records:
            continue
        raw_rows.append(raw_input_rows([r.config for r in records], feats[name]))
        adcns.extend(r.adcn for r in records)
        recalls.extend(r.recall for r in records)
        prov.extend([name] * len(records))
    if not raw_rows:
        raise ValueError("no performance records")
    raw = np.vstack(raw_rows)
    adcns = np.asarray(adcns)
    if norm is None:
        norm = Normalizer.fit(raw, adcns)
    targets = np.column_stack([np.asarray(recalls), norm.adcn_to_unit(adcns)])
    return QppSamples(norm.normalize(raw), targets, prov), norm


class QppModel:
    def __init__(self, net: DenseNet, normalizer: Normalizer):
        self.net = net
        self.normalizer = normalizer

    def copy(self) -> "QppModel":
        return QppModel(self.net.copy(), self.normalizer)

    def inputs(self, configs: Iterable[ParamConfig], feats: DatasetFeatures) -> np.ndarray:
        return self.normalizer.normalize(raw_input_rows(configs, feats))

    def predict_inputs(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out = self.net.forward_batch(x).astype(np.float64)
        recall = np.clip(out[:, 0], 0.0, 1.0)
        return recall, self.normalizer.adcn_from_unit(out[:, 1])

    def predict(self, config: ParamConfig, feats: DatasetFeatures) -> tuple[float, float]:
        r, a = self.predict_inputs(self.inputs([config], feats))
        return float(r[0]), float(a[0])

    def predict_many(self, configs: Sequence[ParamConfig], feats: DatasetFeatures):
        return self.predict_inputs(self.inputs(configs, feats))

    def normalize_adcn(self, adcn: float) -> float:
        return float(self.normalizer.adcn_to_unit(adcn))

    def embed_inputs(self, x: np.ndarray) -> np.ndarray:
        return self.net.penultimate_batch(x).astype(np.float64)

    def embed(self, config: ParamConfig, feats: DatasetFeatures) -> np.ndarray:
        return self.embed_inputs(self.inputs([config], feats))[0]

    def save(self, path: str | os.PathLike) -> None:
        path = Path(path)
        self.net.save(path)
        Path(str(path) + ".norm.json").write_text(json.dumps(self.normalizer.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | os.PathLike) -> "QppModel":
        net = DenseNet.load(path, expect_dims=(len(INPUT_NAMES), *HIDDEN, 2))
        norm = Normalizer.from_dict(json.loads(Path(str(path) + ".norm.json").read_text()))
        return cls(net, norm)


def default_train_spec(n_rows: int, warm: bool = False, seed: int = 0) -> TrainSpec:
    steps = 1500 if warm else 4000
    return TrainSpec(learning_rate=1e-3, batch_size=min(128, max(n_rows, 1)), steps=steps, seed=seed)


def train_qpp(
    samples: QppSamples,
    normalizer: Normalizer,
    spec: TrainSpec | None = None,
    init: QppModel | None = None,
    seed: int = 0,
) -> QppModel:
    """Fit the predictor. With ``init`` the weights start from that model (warm start)."""
    if len(samples) < 1:
        raise ValueError("need at least one training sample")
    spec = spec or default_train_spec(len(samples), warm=init is not None, seed=seed)
    if init is not None:
        net = init.net.copy()
    else:
        net = DenseNet((len(INPUT_NAMES), *HIDDEN, 2), ("sigmoid", "identity"), seed=seed)
    fit(net, samples.inputs, samples.targets, spec)
    return QppModel(net, normalizer)


def mape(pred, true) -> float:
    """Mean absolute percentage error, in percent."""
    pred = np.asarray(pred, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    return float(np.mean(np.abs(pred - true) / np.abs(true)) * 100.0)
