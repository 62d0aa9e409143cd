"""Workspace layout, registry, and the pre-training and tuning pipelines.

Everything lives under one workspace directory::

    datasets/<name>/{base,query}.fvecs   groundtruth/<name>.ivecs
    perf/<name>.csv                      features.json
    models/qpp.gtnet (+ .norm.json)      models/pcr/
    indexes/<name>/<efC>_<M>.gthnsw      cpcs/<name>/
    reports/                             registry.json
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import collector, pcr
from .cpcs import DEFAULT_ROUNDS, run_cpcs
from .dataio import NeighborTable, VectorSet, compute_ground_truth, load_neighbors, load_vectors, save_neighbors, save_vectors
from .features import DatasetFeatures, extract_features, load_features, save_features
from .hnsw import HnswIndex, IndexParams, build_index
from .ood import SimilarityVerdict, cap_rows, candidate_inputs, verdict_from_embeddings
from .qpp import QppModel, QppSamples, make_training_matrix, train_qpp
from .space import DEFAULT_TARGETS, ConfigSpace, ParamConfig

log = logging.getLogger(__name__)

REGISTRY_VERSION = 1
DEFAULT_TD3_STEPS = 20000


class TuningError(RuntimeError):
    """Tuning finished without a config that meets the target; ``config`` is the best effort."""

    def __init__(self, message: str, config: ParamConfig, report: dict):
        super().__init__(message)
        self.config = config
        self.report = report


class Workspace:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.builds = 0

    # paths

    def dataset_dir(self, name: str) -> Path:
        return self.root / "datasets" / name

    def base_path(self, name: str) -> Path:
        return self.dataset_dir(name) / "base.fvecs"

    def query_path(self, name: str) -> Path:
        return self.dataset_dir(name) / "query.fvecs"

    def truth_path(self, name: str) -> Path:
        return self.root / "groundtruth" / f"{name}.ivecs"

    def perf_path(self, name: str) -> Path:
        return self.root / "perf" / f"{name}.csv"

    @property
    def features_path(self) -> Path:
        return self.root / "features.json"

    @property
    def qpp_path(self) -> Path:
        return self.root / "models" / "qpp.gtnet"

    @property
    def pcr_dir(self) -> Path:
        return self.root / "models" / "pcr"

    @property
    def registry_path(self) -> Path:
        return self.root / "registry.json"

    def index_path(self, name: str, cparams: tuple[int, int]) -> Path:
        return self.root / "indexes" / name / f"{cparams[0]}_{cparams[1]}.gthnsw"

    def report_dir(self) -> Path:
        return self.root / "reports"

    # datasets

    def add_dataset(self, name: str, base: VectorSet, queries: VectorSet, k: int = collector.K) -> None:
        save_vectors(self.base_path(name), base)
        save_vectors(self.query_path(name), queries)
        save_neighbors(self.truth_path(name), compute_ground_truth(base, queries, k))

    def datasets(self) -> list[str]:
        d = self.root / "datasets"
        return sorted(p.name for p in d.iterdir() if p.is_dir()) if d.exists() else []

    def load_dataset(self, name: str) -> tuple[VectorSet, VectorSet, NeighborTable]:
        if not self.base_path(name).exists():
            raise FileNotFoundError(f"no dataset {name!r} in {self.root}")
        base = load_vectors(self.base_path(name))
        queries = load_vectors(self.query_path(name))
        if not self.truth_path(name).exists():
            save_neighbors(self.truth_path(name), compute_ground_truth(base, queries))
        return base, queries, load_neighbors(self.truth_path(name))

    # registry

    def registry(self) -> dict:
        if not self.registry_path.exists():
            return {"version": REGISTRY_VERSION, "base_datasets": [], "space": None, "models": {}, "transfers": {}}
        return json.loads(self.registry_path.read_text())

    def save_registry(self, reg: dict) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        tmp = self.registry_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(reg, indent=2, sort_keys=True))
        os.replace(tmp, self.registry_path)

    def features(self, name: str, seed: int = 0) -> DatasetFeatures:
        """Cached feature vector of a workspace dataset."""
        feats = load_features(self.features_path)
        if name not in feats:
            base, queries, _ = self.load_dataset(name)
            feats[name] = extract_features(base, queries, seed=seed)
            save_features(self.features_path, feats)
        return feats[name]

    def perf(self, name: str) -> list[collector.PerfRecord]:
        return [r for d, r in collector.read_records(self.perf_path(name)) if d == name]

    def collected_constructions(self, name: str) -> set[tuple[int, int]]:
        return {r.config.construction for r in self.perf(name)}

    # indexes

    def index(self, name: str, cparams: tuple[int, int], base: VectorSet, seed: int = 0) -> HnswIndex:
        """Load the cached index for ``cparams`` or build and cache it."""
        path = self.index_path(name, cparams)
        if path.exists():
            return HnswIndex.load(path, base=base)
        idx = build_index(base, IndexParams(cparams[0], cparams[1], seed))
        self.builds += 1
        idx.save(path, include_vectors=False)
        return idx

    def collect(self, name: str, cparams_list: Sequence[tuple[int, int]], space: ConfigSpace,
                stop: collector.StopRule = collector.StopRule(), seed: int = 0, jobs: int = 1):
        """Collect construction configs not yet in ``perf/<name>.csv``; all requested records are returned."""
        base, queries, truth = self.load_dataset(name)
        have = self.collected_constructions(name)
        todo = [cp for cp in cparams_list if cp not in have]
        stop = stop.for_grid(space.efs_grid)

        def one(cp):
            idx = self.index(name, cp, base, seed)
            return collector.sweep_index(idx, queries, truth, cp, space.efs_grid, stop)

        if jobs > 1 and len(todo) > 1:
            from concurrent.futures import ThreadPoolExecutor

            with ThreadPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(one, todo))
            for recs in results:
                collector.write_records(self.perf_path(name), name, recs)
        else:
            for cp in todo:
                log.info("%s: collecting efC=%d M=%d", name, *cp)
                collector.write_records(self.perf_path(name), name, one(cp))
        by_cp: dict[tuple[int, int], list[collector.PerfRecord]] = {cp: [] for cp in cparams_list}
        for r in self.perf(name):
            if r.config.construction in by_cp:
                by_cp[r.config.construction].append(r)
        return by_cp

    # models

    def training_pool(self, names: Sequence[str], norm=None):
        perf = {n: self.perf(n) for n in names}
        feats = {n: self.features(n) for n in names}
        return make_training_matrix(perf, feats, norm)

    def pool_digest(self, names: Sequence[str]) -> str:
        h = hashlib.sha256()
        for n in sorted(names):
            h.update(n.encode())
            p = self.perf_path(n)
            if p.exists():
                h.update(p.read_bytes())
        return h.hexdigest()

    def load_models(self) -> tuple[QppModel, pcr.TD3Agent]:
        if not self.qpp_path.exists() or not (self.pcr_dir / "agent.json").exists():
            raise FileNotFoundError(f"{self.root} has no pre-trained models; run pretrain first")
        return QppModel.load(self.qpp_path), pcr.TD3Agent.load(self.pcr_dir)


@dataclass
class StageClock:
    stages: dict[str, float] = field(default_factory=dict)
    start: float = field(default_factory=time.perf_counter)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t0

    def total(self) -> float:
        return time.perf_counter() - self.start


def _known(reg: dict) -> set[str]:
    return set(reg["base_datasets"]) | set(reg["transfers"])


def pretrain_pipeline(
    ws: Workspace,
    names: Sequence[str],
    space: ConfigSpace,
    stop: collector.StopRule = collector.StopRule(),
    seed: int = 0,
    jobs: int = 1,
    td3_steps: int = DEFAULT_TD3_STEPS,
    targets: Sequence[float] = DEFAULT_TARGETS,
) -> dict:
    """Features and collection per base dataset, then the predictor, then the agent.

    Completed collections are never repeated, and models are retrained only
    when the training pool changed.
    """
    if not names:
        raise ValueError("need at least one base dataset")
    reg = ws.registry()
    if reg["space"] is not None and reg["space"] != space.to_dict():
        raise ValueError("workspace was pre-trained with a different config space")
    for name in names:
        ws.features(name, seed)
        ws.collect(name, space.construction_configs(), space, stop, seed, jobs)
    names = sorted(set(names))
    digest = ws.pool_digest(names)
    stale = reg["models"].get("pool_digest") != digest or not ws.qpp_path.exists()
    if stale:
        samples, norm = ws.training_pool(names)
        model = train_qpp(samples, norm, seed=seed)
        model.save(ws.qpp_path)
        reg["models"]["qpp_version"] = reg["models"].get("qpp_version", 0) + 1
    else:
        model = QppModel.load(ws.qpp_path)
    if stale or not (ws.pcr_dir / "agent.json").exists():
        feats = load_features(ws.features_path)
        envs = pcr.make_envs([(model, feats[n]) for n in names], space, targets)
        agent = pcr.td3_pretrain(envs, td3_steps, seed=seed)
        agent.save(ws.pcr_dir)
        reg["models"]["pcr_version"] = reg["models"].get("pcr_version", 0) + 1
    reg["models"]["pool_digest"] = digest
    reg["base_datasets"] = names
    reg["space"] = space.to_dict()
    reg["seed"] = seed
    ws.save_registry(reg)
    return reg


def _space_of(reg: dict) -> ConfigSpace:
    s = reg["space"]
    return ConfigSpace(tuple(s["efC"]), tuple(s["M"]), tuple(s["efS"]))


def detect_dataset(ws: Workspace, name: str, model: QppModel | None = None, seed: int = 0) -> SimilarityVerdict:
    """Similarity of ``name`` to the labeled pool, in the current predictor's embedding space."""
    reg = ws.registry()
    if reg["space"] is None:
        raise FileNotFoundError("workspace is not pre-trained")
    model = model or QppModel.load(ws.qpp_path)
    pool, _ = ws.training_pool(sorted(_known(reg)), model.normalizer)
    new = candidate_inputs(model, ws.features(name, seed), _space_of(reg), seed=seed)
    return verdict_from_embeddings(model.embed_inputs(cap_rows(pool.inputs, seed=seed)), model.embed_inputs(new))


def tune_pipeline(
    ws: Workspace,
    name: str,
    target: float,
    max_rounds: int = 250,
    cpcs_rounds: int = DEFAULT_ROUNDS,
    stop: collector.StopRule = collector.StopRule(),
    seed: int = 0,
    jobs: int = 1,
    timing_repeats: int = 3,
) -> tuple[ParamConfig, dict]:
    """Detect, transfer if needed, recommend, then post-process on the real index.

    A dataset the registry already knows (a base dataset or an earlier
    transfer) skips detection and transfer entirely.
    """
    if not 0.0 < target < 1.0:
        raise ValueError(f"target recall {target} outside (0, 1)")
    clock = StageClock()
    reg = ws.registry()
    if reg["space"] is None:
        raise FileNotFoundError("workspace is not pre-trained")
    space = _space_of(reg)
    ws.builds = 0
    report: dict = {"dataset": name, "target_recall": target, "seed": seed}

    with clock.stage("load"):
        model, agent = ws.load_models()
        base, queries, truth = ws.load_dataset(name)
    with clock.stage("features"):
        feats = ws.features(name, seed)

    known = name in _known(reg)
    report["cached_transfer"] = known
    report["verdicts"] = []
    report["rounds_used"] = 0
    report["selected_constructions"] = []
    if not known:
        with clock.stage("detect"):
            pool, norm = ws.training_pool(sorted(_known(reg)), model.normalizer)
            new = candidate_inputs(model, feats, space, seed=seed)
            verdict = verdict_from_embeddings(model.embed_inputs(cap_rows(pool.inputs, seed=seed)), model.embed_inputs(new))
        report["verdicts"].append({"round": 0, **json.loads(verdict.to_json())})
        if not verdict.similar:
            with clock.stage("transfer"):
                res = run_cpcs(
                    name, feats, pool, model.normalizer, model, space,
                    lambda cps: ws.collect(name, cps, space, stop, seed, jobs),
                    rounds=cpcs_rounds, exclude=(), state_dir=ws.root / "cpcs" / name, seed=seed,
                )
                model = res.model
                model.save(ws.qpp_path)
            report["rounds_used"] = res.rounds_used
            report["selected_constructions"] = [list(c) for c in res.selected]
            report["verdicts"].extend(r.to_dict() for r in res.rounds)
        reg["transfers"][name] = {
            "similar_at_start": verdict.similar,
            "rounds_used": report["rounds_used"],
            "constructions": report["selected_constructions"],
        }
        reg["models"]["qpp_version"] = reg["models"].get("qpp_version", 0) + 1
        reg["models"]["pool_digest"] = ws.pool_digest(sorted(_known(reg)))
        ws.save_registry(reg)
    report["builds_before_post_process"] = ws.builds

    with clock.stage("recommend"):
        rec = pcr.recommend(agent, model, feats, target, space, max_rounds=max_rounds, seed=seed)
    report["recommended"] = {**rec.config.to_dict(), "pred_recall": rec.pred_recall,
                             "pred_adcn": rec.pred_adcn, "feasible": rec.feasible}
    stem = f"{name}_t{target:.4f}"
    ws.report_dir().mkdir(parents=True, exist_ok=True)
    pcr.write_trace(ws.report_dir() / f"{stem}_trace.csv", rec.trace)

    error = None
    with clock.stage("post_process"):
        index = ws.index(name, rec.config.construction, base, seed)
        try:
            post = pcr.post_process(rec.config, target, base, queries, truth, space, index=index)
            final, final_recall = post.config, post.recall
            report["post_process_steps"] = [list(x) for x in post.measured]
        except pcr.InfeasibleTargetError as e:
            final, final_recall, error = e.config, e.recall, str(e)
        ids, dcn, qps = index.timed_search(queries.data, collector.K, final.efS, repeats=timing_repeats)
    report["builds_total"] = ws.builds
    report["final"] = {**final.to_dict(), "recall": final_recall, "qps": qps,
                       "adcn": collector.adcn(int(dcn.sum()), queries.count)}
    report["timings"] = dict(clock.stages)
    report["timings"]["total"] = clock.total()
    report["error"] = error
    _write_report(ws.report_dir() / stem, report)
    if error is not None:
        raise TuningError(error, final, report)
    return final, report


def _write_report(stem: Path, report: dict) -> None:
    # the stem holds a dotted target recall, so suffixes are appended rather than swapped
    Path(f"{stem}.json").write_text(json.dumps(report, indent=2))
    lines = [
        f"dataset        {report['dataset']}",
        f"target recall  {report['target_recall']}",
        f"transfer       {'cached' if report['cached_transfer'] else str(report['rounds_used']) + ' round(s)'}",
        f"recommended    efC={report['recommended']['efC']} M={report['recommended']['M']} "
        f"efS={report['recommended']['efS']} (predicted recall {report['recommended']['pred_recall']:.4f})",
        f"final          efC={report['final']['efC']} M={report['final']['M']} efS={report['final']['efS']} "
        f"recall={report['final']['recall']:.4f} qps={report['final']['qps']:.1f}",
        f"index builds   {report['builds_total']}",
    ]
    lines += [f"time {k:<10}{v:9.2f}s" for k, v in report["timings"].items()]
    if report["error"]:
        lines.append(f"error          {report['error']}")
    Path(f"{stem}.txt").write_text("\n".join(lines) + "\n")


def exhaustive_search(ws: Workspace, name: str, target: float, space: ConfigSpace, seed: int = 0,
                      timing_repeats: int = 3) -> tuple[ParamConfig | None, float, list[collector.PerfRecord]]:
    """Grid search baseline: sweep every config, return the highest-QPS config meeting ``target``."""
    base, queries, truth = ws.load_dataset(name)
    best, best_qps, records = None, 0.0, []
    for cp in space.construction_configs():
        idx = build_index(base, IndexParams(cp[0], cp[1], seed))
        recs = collector.sweep_index(idx, queries, truth, cp, space.efs_grid, collector.StopRule(1.01, 10 ** 9),
                                     timing_repeats=timing_repeats)
        records.extend(recs)
        for r in recs:
            if r.recall >= target and r.qps > best_qps:
                best, best_qps = r.config, r.qps
    return best, best_qps, records
