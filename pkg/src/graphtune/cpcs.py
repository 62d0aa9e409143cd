"""Construction config selection for transferring the predictor to a new dataset.

Each round picks two construction configs whose predictor embeddings sit far
from (max) and typically far from (mean-closest) the labeled data, collects
them, warm-retrains the predictor and re-runs the similarity check.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .collector import PerfRecord, read_records, write_records
from .features import DatasetFeatures
from .ood import MAX_CANDIDATE_ROWS, SimilarityVerdict, cap_rows, kth_nn_distances, verdict_from_embeddings
from .qpp import Normalizer, QppModel, QppSamples, make_training_matrix, train_qpp
from .space import ConfigSpace, ParamConfig

log = logging.getLogger(__name__)

DEFAULT_ROUNDS = 7

# (dataset, construction configs) -> records per construction config
CollectFn = Callable[[Sequence[tuple[int, int]]], dict[tuple[int, int], list[PerfRecord]]]


def annd_scores(group_embeddings: Sequence[np.ndarray], base_embeddings) -> np.ndarray:
    """Per group, the mean distance from its rows to their nearest base embedding."""
    base = np.asarray(base_embeddings, dtype=np.float64)
    if base.size == 0:
        raise ValueError("empty base embeddings")
    if len(group_embeddings) == 0:
        raise ValueError("no candidate groups")
    sizes = [len(g) for g in group_embeddings]
    if min(sizes) == 0:
        raise ValueError("empty candidate group")
    nn = kth_nn_distances(base, np.vstack([np.atleast_2d(g) for g in group_embeddings]), 1)
    bounds = np.cumsum([0] + sizes)
    return np.array([nn[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])])


def select_pair(scores) -> tuple[int, int]:
    """``j1`` = argmax; ``j2`` = closest to the mean among the others. Ties go to the lowest index."""
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no scores")
    j1 = int(np.argmax(s))
    if s.size == 1:
        return j1, j1
    gap = np.abs(s - s.mean())
    gap[j1] = np.inf
    return j1, int(np.argmin(gap))


@dataclass
class RoundLog:
    round: int
    j1_config: tuple[int, int]
    j2_config: tuple[int, int]
    d_bar: float
    d_tr: float
    similar: bool
    qpp_mape_if_available: dict | None = None

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "j1_config": list(self.j1_config),
            "j2_config": list(self.j2_config),
            "d_bar": self.d_bar,
            "d_tr": self.d_tr,
            "similar": self.similar,
            "qpp_mape_if_available": self.qpp_mape_if_available,
        }


@dataclass
class CpcsResult:
    model: QppModel
    samples: QppSamples
    rounds_used: int
    selected: list[tuple[int, int]]
    records: list[PerfRecord]
    rounds: list[RoundLog] = field(default_factory=list)


class _State:
    """Round bookkeeping persisted as ``records.csv`` plus ``state.json``."""

    def __init__(self, directory: Path | None):
        self.dir = directory
        self.rounds: list[dict] = []
        self.selected: list[tuple[int, int]] = []
        if directory is not None and (directory / "state.json").exists():
            raw = json.loads((directory / "state.json").read_text())
            self.rounds = raw["rounds"]
            self.selected = [tuple(c) for c in raw["selected"]]

    def records(self, dataset: str) -> list[PerfRecord]:
        if self.dir is None:
            return []
        return [r for d, r in read_records(self.dir / "records.csv") if d == dataset]

    def commit(self, dataset: str, new_records: list[PerfRecord], entry: RoundLog, pair) -> None:
        self.selected.extend(pair)
        self.rounds.append(entry.to_dict())
        if self.dir is None:
            return
        self.dir.mkdir(parents=True, exist_ok=True)
        write_records(self.dir / "records.csv", dataset, new_records)
        tmp = self.dir / "state.json.tmp"
        tmp.write_text(json.dumps({"selected": [list(c) for c in self.selected], "rounds": self.rounds}, indent=2))
        os.replace(tmp, self.dir / "state.json")


def run_cpcs(
    dataset: str,
    feats: DatasetFeatures,
    base_samples: QppSamples,
    normalizer: Normalizer,
    model: QppModel,
    space: ConfigSpace,
    collect: CollectFn,
    rounds: int = DEFAULT_ROUNDS,
    exclude: Sequence[tuple[int, int]] = (),
    state_dir: str | os.PathLike | None = None,
    evaluate: Callable[[QppModel], dict] | None = None,
    seed: int = 0,
) -> CpcsResult:
    """Transfer ``model`` to ``dataset`` by collecting at most ``2 * rounds`` construction configs.

    ``base_samples`` is the labeled pool (normalized rows); for the distance
    computations it is subsampled to ``MAX_CANDIDATE_ROWS`` rows while the
    new dataset's selected rows are always kept. ``collect`` maps a
    list of construction configs to their records. With ``state_dir`` every
    finished round is persisted, and a later call resumes after it. The
    optional ``evaluate`` hook reports held-out error into the round log.
    """
    if rounds < 0:
        raise ValueError("rounds must be non-negative")
    state = _State(Path(state_dir) if state_dir is not None else None)
    done = set(state.selected) | set(map(tuple, exclude))
    candidates = [cp for cp in space.construction_configs() if cp not in done]
    efs = space.efs_grid

    def rows_for(cp) -> np.ndarray:
        return model.inputs([ParamConfig(cp[0], cp[1], s) for s in efs], feats)

    collected = state.records(dataset)
    labeled_inputs = cap_rows(base_samples.inputs, MAX_CANDIDATE_ROWS, seed)
    if state.selected:
        labeled_inputs = np.vstack([labeled_inputs] + [rows_for(cp) for cp in state.selected])
    samples = base_samples
    if collected:
        extra, _ = make_training_matrix({dataset: collected}, {dataset: feats}, normalizer)
        samples = base_samples.concat(extra)
        if len(state.rounds) > 0:
            model = train_qpp(samples, normalizer, init=model, seed=seed + len(state.rounds))
    logs = [RoundLog(r["round"], tuple(r["j1_config"]), tuple(r["j2_config"]), r["d_bar"], r["d_tr"],
                     r["similar"], r.get("qpp_mape_if_available")) for r in state.rounds]
    if logs and logs[-1].similar:
        return CpcsResult(model, samples, len(logs), list(state.selected), collected, logs)

    for rnd in range(len(state.rounds) + 1, rounds + 1):
        if not candidates:
            break
        cand_inputs = [rows_for(cp) for cp in candidates]
        base_emb = model.embed_inputs(labeled_inputs)
        scores = annd_scores([model.embed_inputs(x) for x in cand_inputs], base_emb)
        j1, j2 = select_pair(scores)
        pair = [candidates[j1]] if j1 == j2 else [candidates[j1], candidates[j2]]
        log.info("round %d: collecting %s", rnd, pair)
        got = collect(pair)
        new_records = [r for cp in pair for r in got[cp]]
        extra, _ = make_training_matrix({dataset: new_records}, {dataset: feats}, normalizer)
        samples = samples.concat(extra)
        model = train_qpp(samples, normalizer, init=model, seed=seed + rnd)
        collected.extend(new_records)

        picked = {j1, j2}
        labeled_inputs = np.vstack([labeled_inputs] + [cand_inputs[j] for j in sorted(picked)])
        candidates = [cp for j, cp in enumerate(candidates) if j not in picked]
        if candidates:
            remaining = np.vstack([rows_for(cp) for cp in candidates])
            remaining = cap_rows(remaining, MAX_CANDIDATE_ROWS, seed + rnd)
            verdict = verdict_from_embeddings(model.embed_inputs(labeled_inputs), model.embed_inputs(remaining))
        else:
            verdict = SimilarityVerdict(True, 0.0, 0.0)
        entry = RoundLog(rnd, pair[0], pair[-1], verdict.d_bar, verdict.d_tr, verdict.similar,
                         evaluate(model) if evaluate else None)
        state.commit(dataset, new_records, entry, pair)
        logs.append(entry)
        log.info("round %d: d_bar=%.4g d_tr=%.4g similar=%s", rnd, verdict.d_bar, verdict.d_tr, verdict.similar)
        if verdict.similar:
            break
    return CpcsResult(model, samples, len(logs), list(state.selected), collected, logs)
