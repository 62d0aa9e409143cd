"""Command-line entry point: ``graphtune <subcommand> ...``.

Exit codes: 0 success, 2 infeasible target, 64 usage error, 66 missing input file.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import collector, orchestrator
from .dataio import VecsFormatError, compute_ground_truth, load_vectors, make_synthetic, save_neighbors
from .features import extract_features
from .hnsw import IndexFormatError
from .space import ConfigSpace

EX_OK = 0
EX_INFEASIBLE = 2
EX_USAGE = 64
EX_NOINPUT = 66
EX_DATAERR = 65


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EX_USAGE, f"{self.prog}: error: {message}\n")


def _recall(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"recall must lie in (0, 1), got {v}")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _existing(text: str) -> Path:
    p = Path(text)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _stop(args) -> collector.StopRule:
    return collector.StopRule(args.stop_recall, args.stop_min_efs)


def _grid(text: str) -> ConfigSpace:
    if text not in ("full", "reduced") and not Path(text).exists():
        raise FileNotFoundError(f"no such grid file: {text}")
    return ConfigSpace.from_name(text)


# --------------------------------------------------------------------------
# subcommands


def cmd_gt(args) -> int:
    base = load_vectors(_existing(args.base))
    queries = load_vectors(_existing(args.query))
    save_neighbors(args.out, compute_ground_truth(base, queries, args.k))
    print(f"wrote {queries.count} x {args.k} neighbors to {args.out}")
    return EX_OK


def cmd_features(args) -> int:
    base = load_vectors(_existing(args.base))
    queries = load_vectors(_existing(args.query))
    feats = extract_features(base, queries, seed=args.seed)
    text = json.dumps(feats.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EX_OK


def cmd_add(args) -> int:
    ws = orchestrator.Workspace(args.workspace)
    ws.add_dataset(args.name, load_vectors(_existing(args.base)), load_vectors(_existing(args.query)))
    print(f"added {args.name} to {ws.root}")
    return EX_OK


def cmd_synth(args) -> int:
    ws = orchestrator.Workspace(args.workspace)
    base, queries = make_synthetic(args.kind, args.n, args.dim, args.seed, args.queries)
    ws.add_dataset(args.name, base, queries)
    print(f"added synthetic {args.kind} dataset {args.name} ({args.n} x {args.dim}) to {ws.root}")
    return EX_OK


def cmd_collect(args) -> int:
    ws = orchestrator.Workspace(args.workspace)
    space = _grid(args.grid)
    ws.load_dataset(args.dataset)
    by_cp = ws.collect(args.dataset, space.construction_configs(), space, _stop(args), args.seed, args.jobs)
    records = [r for recs in by_cp.values() for r in recs]
    if args.out:
        collector.write_records(args.out, args.dataset, records, append=False)
    print(f"{len(records)} records over {len(by_cp)} construction configs")
    return EX_OK


def cmd_pretrain(args) -> int:
    ws = orchestrator.Workspace(args.workspace)
    names = args.datasets.split(",") if args.datasets else ws.datasets()
    if not names:
        raise FileNotFoundError(f"no datasets under {ws.root / 'datasets'}")
    for n in names:
        ws.load_dataset(n)
    reg = orchestrator.pretrain_pipeline(ws, names, _grid(args.grid), _stop(args), args.seed, args.jobs,
                                         args.td3_steps)
    print(json.dumps({"base_datasets": reg["base_datasets"], "models": reg["models"]}, indent=2))
    return EX_OK


def cmd_tune(args) -> int:
    ws = orchestrator.Workspace(args.workspace)
    try:
        final, report = orchestrator.tune_pipeline(
            ws, args.dataset, args.target_recall, args.max_rounds, args.cpcs_rounds, _stop(args), args.seed, args.jobs
        )
    except orchestrator.TuningError as e:
        print(json.dumps({"error": str(e), "best_effort": e.config.to_dict()}, indent=2))
        return EX_INFEASIBLE
    print(json.dumps({**final.to_dict(), "recall": report["final"]["recall"], "qps": report["final"]["qps"]}, indent=2))
    return EX_OK


def cmd_detect(args) -> int:
    ws = orchestrator.Workspace(args.workspace)
    ws.load_dataset(args.dataset)
    print(orchestrator.detect_dataset(ws, args.dataset, seed=args.seed).to_json())
    return EX_OK


def cmd_report(args) -> int:
    ws = orchestrator.Workspace(args.workspace)
    if not ws.perf_path(args.dataset).exists():
        raise FileNotFoundError(f"no performance data for {args.dataset!r}")
    rows = sorted(ws.perf(args.dataset), key=lambda r: r.config.as_tuple())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["efC", "M", "efS", "recall", "qps", "adcn"])
        for r in rows:
            w.writerow([r.config.efC, r.config.M, r.config.efS, repr(r.recall), repr(r.qps), repr(r.adcn)])
    print(f"wrote {len(rows)} rows to {out}")
    return EX_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graphtune", description="Tune HNSW construction and search parameters.")
    p.add_argument("-w", "--workspace", default=".", help="workspace directory (default: current)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_stop(sp):
        sp.add_argument("--stop-recall", type=float, default=0.995)
        sp.add_argument("--stop-min-efs", type=int, default=500)
        sp.add_argument("--jobs", type=_positive, default=1)

    sp = sub.add_parser("gt", help="exact k-NN ground truth")
    sp.add_argument("--base", required=True)
    sp.add_argument("--query", required=True)
    sp.add_argument("--k", type=_positive, default=10)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gt)

    sp = sub.add_parser("features", help="dataset feature vector as JSON")
    sp.add_argument("--base", required=True)
    sp.add_argument("--query", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_features)

    sp = sub.add_parser("add-dataset", help="copy a dataset into the workspace and compute its ground truth")
    sp.add_argument("--name", required=True)
    sp.add_argument("--base", required=True)
    sp.add_argument("--query", required=True)
    sp.set_defaults(func=cmd_add)

    sp = sub.add_parser("synth", help="add a synthetic dataset to the workspace")
    sp.add_argument("--name", required=True)
    sp.add_argument("--kind", choices=["uniform", "gaussian", "clustered", "lowrank"], default="gaussian")
    sp.add_argument("--n", type=_positive, default=5000)
    sp.add_argument("--dim", type=_positive, default=32)
    sp.add_argument("--queries", type=_positive, default=200)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("collect", help="performance records over a grid")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--grid", default="full", help="full, reduced, or a JSON grid file")
    sp.add_argument("--out")
    with_stop(sp)
    sp.set_defaults(func=cmd_collect)

    sp = sub.add_parser("pretrain", help="collect base data and train both models")
    sp.add_argument("--datasets", help="comma-separated names (default: every workspace dataset)")
    sp.add_argument("--grid", default="full")
    sp.add_argument("--td3-steps", type=_positive, default=orchestrator.DEFAULT_TD3_STEPS)
    with_stop(sp)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("tune", help="recommend a config for a dataset and target recall")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--target-recall", type=_recall, required=True)
    sp.add_argument("--max-rounds", type=_positive, default=250)
    sp.add_argument("--cpcs-rounds", type=int, default=7)
    with_stop(sp)
    sp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("detect", help="similarity of a dataset to the labeled pool")
    sp.add_argument("--dataset", required=True)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("report", help="recall/QPS/ADCN table for plotting")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as e:
        print(f"graphtune: {e}", file=sys.stderr)
        return EX_NOINPUT
    except (VecsFormatError, IndexFormatError) as e:
        print(f"graphtune: {e}", file=sys.stderr)
        return EX_DATAERR
    except ValueError as e:
        print(f"graphtune: {e}", file=sys.stderr)
        return EX_USAGE


if __name__ == "__main__":
    sys.exit(main())
