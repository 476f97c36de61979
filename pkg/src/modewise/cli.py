"""Command-line surface: ingest, preprocess, train, evaluate, predict, synth.

Exit codes: 0 ok, 1 usage error, 2 data/format error, 3 numeric failure.
Every artifact-producing command writes a `<artifact>.manifest.json` with the
command line, resolved-parameter hash, seeds, input digests and timestamps so
runs can be reproduced byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .ingest import ModeLabel, Segment, ingest_directory, parse_plt, \
    read_trips_jsonl, write_trips_jsonl
from .models import Ensemble, ModelError, Network, build_config, config_names, \
    load_network, save_network
from .pipeline import (
    GLOBAL_MAX_ACCEL,
    GLOBAL_MAX_SPEED,
    PipelineConfig,
    PipelineError,
    build_dataset,
    chunk_segment,
    drop_time_disorder,
    filter_kinematic_outliers,
    read_tmsg,
    segment_channels,
    split_train_test,
    write_tmsg,
)
from .train_eval import TrainConfig, TrainingDiverged, evaluate, \
    grid_search_dropout, train, train_ensemble

log = logging.getLogger("modewise")

MODE_NAMES = ["walk", "bike", "bus", "driving", "train"]


class CliParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_path: str, args: argparse.Namespace,
                   inputs: list[str]) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    manifest = {
        "command": " ".join(sys.argv),
        "tool_version": __version__,
        "config_hash": hashlib.sha256(
            json.dumps(resolved, sort_keys=True, default=str).encode()).hexdigest(),
        "parameters": {k: str(v) for k, v in resolved.items()},
        "input_digests": {p: sha256_file(p) for p in inputs if os.path.isfile(p)},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    with open(out_path + ".manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


def parse_dropout(text: str):
    parts = [float(p) for p in text.split(",")]
    return parts[0] if len(parts) == 1 else parts


def parse_grid(text: str) -> list[float]:
    """Either 'start:stop:step' (inclusive) or a comma list."""
    if ":" in text:
        start, stop, step = (float(x) for x in text.split(":"))
        n = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(x) for x in text.split(",")]


def parse_filters(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(","))


def load_model_or_ensemble(path: str):
    if os.path.isdir(path):
        members = sorted(
            os.path.join(path, f) for f in os.listdir(path)
            if f.endswith(".tmmd"))
        if not members:
            raise ModelError(f"{path}: no .tmmd member files found")
        return Ensemble([load_network(p) for p in members])
    return load_network(path)


# --- subcommand implementations ----------------------------------------------

def cmd_ingest(args) -> int:
    trips = ingest_directory(args.geolife_dir, gap_s=args.max_gap_min * 60.0,
                             jobs=args.jobs)
    n = write_trips_jsonl(trips, args.out)
    write_manifest(args.out, args, [])
    print(f"wrote {n} trips -> {args.out}")
    return 0


def cmd_preprocess(args) -> int:
    trips = read_trips_jsonl(getattr(args, "in"))
    config = PipelineConfig(
        segment_len=args.segment_len, min_points=args.min_points,
        sg_window=args.sg_window, sg_order=args.sg_order,
        wrap_bearing=args.wrap_bearing)
    dataset = build_dataset(trips, config, jobs=args.jobs,
                            provenance=getattr(args, "in"))
    write_tmsg(dataset, args.out)
    write_manifest(args.out, args, [getattr(args, "in")])
    counts = dataset.class_counts()
    print(f"wrote {len(dataset)} samples -> {args.out}")
    print("  per class: " + ", ".join(
        f"{MODE_NAMES[m]}={counts[m]}" for m in range(5)))
    return 0


def cmd_split(args) -> int:
    dataset = read_tmsg(getattr(args, "in"))
    train_set, test_set = split_train_test(dataset, args.frac, args.seed)
    write_tmsg(train_set, args.out_train)
    write_tmsg(test_set, args.out_test)
    write_manifest(args.out_train, args, [getattr(args, "in")])
    write_manifest(args.out_test, args, [getattr(args, "in")])
    print(f"split {len(dataset)} -> {len(train_set)} train / {len(test_set)} test")
    return 0


def cmd_train(args) -> int:
    train_set = read_tmsg(args.train)
    monitor_set = read_tmsg(args.monitor) if args.monitor else None
    spec = build_config(args.config, M=train_set.M,
                        dropout=parse_dropout(args.dropout),
                        filters=parse_filters(args.filters))
    net = Network.build(spec, seed=args.seed)
    cfg = TrainConfig(batch_size=args.batch_size, max_epochs=args.epochs,
                      early_stop=args.early_stop_on, patience=args.patience,
                      seed=args.seed)
    result = train(net, train_set, cfg, monitor_set)
    save_network(net, args.out)
    write_manifest(args.out, args,
                   [args.train] + ([args.monitor] if args.monitor else []))
    report = result.to_jsonable()
    report["seed"] = args.seed
    if args.report:
        write_json(args.report, report)
    best = f", best epoch {result.best_epoch}" if result.best_epoch else ""
    print(f"trained {args.config} for {len(result.train_acc)} epochs{best} "
          f"({result.wall_time_s:.1f}s) -> {args.out}")
    return 0


def cmd_ensemble_train(args) -> int:
    train_set = read_tmsg(args.train)
    monitor_set = read_tmsg(args.monitor) if args.monitor else None
    spec = build_config(args.config, M=train_set.M,
                        dropout=parse_dropout(args.dropout),
                        filters=parse_filters(args.filters))
    cfg = TrainConfig(batch_size=args.batch_size, max_epochs=args.epochs,
                      early_stop=args.early_stop_on, patience=args.patience,
                      seed=args.seed)
    ensemble, results = train_ensemble(spec, train_set, cfg, n_members=args.n,
                                       monitor_set=monitor_set, jobs=args.jobs)
    os.makedirs(args.out_dir, exist_ok=True)
    for i, member in enumerate(ensemble.members):
        save_network(member, os.path.join(args.out_dir, f"member_{i:02d}.tmmd"))
    summary = {"n_members": args.n, "config": args.config, "seed": args.seed,
               "members": [r.to_jsonable() for r in results]}
    write_json(os.path.join(args.out_dir, "ensemble.json"), summary)
    write_manifest(os.path.join(args.out_dir, "ensemble.json"), args,
                   [args.train] + ([args.monitor] if args.monitor else []))
    print(f"trained {args.n}-member ensemble -> {args.out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    model = load_model_or_ensemble(args.model)
    test_set = read_tmsg(args.test)
    report = evaluate(model, test_set)
    if args.report:
        write_json(args.report, report.to_jsonable())
        write_manifest(args.report, args, [args.test])
    print(report.format_table(MODE_NAMES))
    return 0


def cmd_gridsearch(args) -> int:
    train_set = read_tmsg(args.train)
    result = grid_search_dropout(args.config, train_set, parse_grid(args.grid),
                                 k=args.folds, epochs=args.epochs,
                                 seed=args.seed,
                                 filters=parse_filters(args.filters),
                                 jobs=args.jobs)
    if args.report:
        write_json(args.report, result.to_jsonable())
        write_manifest(args.report, args, [args.train])
    for (p1, p2), acc in sorted(result.table.items()):
        print(f"  p=({p1:g}, {p2:g})  mean CV accuracy {acc:.4f}")
    print(f"best: p1={result.best[0]:g} p2={result.best[1]:g}")
    return 0


def cmd_baseline(args) -> int:
    from .baselines import DecisionTree, KnnClassifier, dataset_features, \
        tune_baseline

    train_set = read_tmsg(args.train)
    test_set = read_tmsg(args.test)
    x_train = dataset_features(train_set)
    y_train = train_set.labels()
    x_test = dataset_features(test_set)

    hp = args.k if args.algo == "knn" else args.depth
    table = {}
    if args.search:
        grid = (list(range(3, 41)) if args.algo == "knn"
                else list(range(1, 41)))
        hp, table = tune_baseline(args.algo, x_train, y_train, grid,
                                  seed=args.seed)
        print(f"tuned {args.algo}: best hyperparameter {hp}")
    if args.algo == "knn":
        clf = KnnClassifier(k=hp).fit(x_train, y_train)
    else:
        clf = DecisionTree(max_depth=hp).fit(x_train, y_train)
    report = evaluate(lambda _x: clf.predict(x_test), test_set)
    if args.report:
        payload = report.to_jsonable()
        payload["algo"] = args.algo
        payload["hyperparameter"] = hp
        if table:
            payload["cv_table"] = {str(k): v for k, v in table.items()}
        write_json(args.report, payload)
        write_manifest(args.report, args, [args.train, args.test])
    print(report.format_table(MODE_NAMES))
    return 0


def cmd_predict(args) -> int:
    model = load_model_or_ensemble(args.model)
    with open(args.plt, "r", encoding="utf-8", errors="replace") as f:
        points = parse_plt(f.read())
    points = drop_time_disorder(points)
    if len(points) < args.min_points:
        raise PipelineError(f"{args.plt}: only {len(points)} usable points")
    # unknown mode: apply the loosest caps
    seg = filter_kinematic_outliers(
        Segment(points, ModeLabel.WALK), max_speed=GLOBAL_MAX_SPEED,
        max_accel=GLOBAL_MAX_ACCEL)
    m = model.members[0].spec.m if isinstance(model, Ensemble) else model.spec.m
    config = PipelineConfig(segment_len=m, min_points=args.min_points)
    channels = segment_channels(seg, config)
    chunks = chunk_segment(channels, 0, M=m, min_pts=args.min_points)
    if not chunks:
        raise PipelineError(f"{args.plt}: no usable chunks after cleaning")
    x = np.stack([c.data for c in chunks]).astype(np.float64)
    probs = model.predict_proba(x)
    results = []
    for i, (chunk, p) in enumerate(zip(chunks, probs)):
        label = int(p.argmax())
        results.append({"chunk": i, "valid_len": chunk.valid_len,
                        "label": label, "mode": MODE_NAMES[label],
                        "probabilities": [round(float(v), 6) for v in p]})
        print(f"chunk {i}: {MODE_NAMES[label]} "
              f"(p={p.max():.3f}, {chunk.valid_len} points)")
    if args.report:
        write_json(args.report, {"file": args.plt, "chunks": results})
    return 0


def cmd_synth(args) -> int:
    from .synthgen import generate

    trips, summary = generate(args.per_mode, args.points, seed=args.seed,
                              noise=args.noise)
    n = write_trips_jsonl(trips, args.out)
    write_manifest(args.out, args, [])
    print(f"wrote {n} synthetic trips -> {args.out} "
          f"(expect {summary.expected_samples()} samples at M=200)")
    return 0


def cmd_spec(args) -> int:
    if args.action != "show":
        raise ValueError(f"unknown spec action {args.action!r}")
    spec = build_config(args.name, M=args.segment_len)
    print(json.dumps(spec.to_jsonable(), indent=2))
    return 0


# --- parser -------------------------------------------------------------------

def make_parser() -> CliParser:
    parser = CliParser(prog="modewise",
                       description="Transportation mode inference from GPS trajectories")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("ingest", help="parse a GeoLife directory into trips")
    p.add_argument("--geolife-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-gap-min", type=float, default=20.0)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("preprocess", help="trips.jsonl -> cleaned TMSG dataset")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--segment-len", type=int, default=200)
    p.add_argument("--min-points", type=int, default=10)
    p.add_argument("--sg-window", type=int, default=9)
    p.add_argument("--sg-order", type=int, default=3)
    p.add_argument("--wrap-bearing", action="store_true",
                   help="fold bearing differences into [0, 180]")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("split", help="random train/test split of a TMSG file")
    p.add_argument("--in", required=True)
    p.add_argument("--frac", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.set_defaults(func=cmd_split)

    def add_train_args(p, ensemble=False):
        p.add_argument("--train", required=True)
        p.add_argument("--config", default="G")
        p.add_argument("--epochs", type=int, default=62)
        p.add_argument("--batch-size", type=int, default=64)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--dropout", default="0.5",
                       help="one value or comma list per dropout layer")
        p.add_argument("--filters", default="32,64,128")
        p.add_argument("--early-stop-on", choices=["val", "test", "none"],
                       default="val")
        p.add_argument("--patience", type=int, default=None)
        p.add_argument("--monitor", default=None,
                       help="TMSG monitored when --early-stop-on test")

    p = sub.add_parser("train", help="train one network")
    add_train_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ensemble-train", help="train a bagged ensemble")
    add_train_args(p)
    p.add_argument("--n", type=int, default=7)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_ensemble_train)

    p = sub.add_parser("evaluate", help="confusion matrix and metrics on a test set")
    p.add_argument("--model", required=True,
                   help=".tmmd file or an ensemble directory")
    p.add_argument("--test", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gridsearch-dropout",
                       help="cross-validated search over dropout probabilities")
    p.add_argument("--train", required=True)
    p.add_argument("--config", default="G")
    p.add_argument("--grid", default="0.2:0.8:0.1",
                   help="start:stop:step or comma list")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--filters", default="32,64,128")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("baseline", help="hand-crafted-feature KNN or decision tree")
    p.add_argument("--algo", choices=["knn", "dt"], required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--search", action="store_true",
                   help="tune the hyperparameter by 5-fold CV")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--depth", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("predict", help="classify an unlabeled .plt track")
    p.add_argument("--model", required=True)
    p.add_argument("--plt", required=True)
    p.add_argument("--min-points", type=int, default=10)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="generate synthetic labeled trips")
    p.add_argument("--per-mode", type=int, required=True)
    p.add_argument("--points", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("spec", help="inspect network configurations")
    p.add_argument("action", choices=["show"])
    p.add_argument("name", help="configuration name A..I")
    p.add_argument("--segment-len", type=int, default=200)
    p.set_defaults(func=cmd_spec)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("MODEWISE_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (PipelineError, ModelError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
