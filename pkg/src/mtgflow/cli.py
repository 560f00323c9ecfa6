"""Command-line entry point: synth, train, score, eval, cluster, export-graph.

Every subcommand reads one optional JSON config whose keys mirror
TrainConfig (or SynthConfig for ``synth``); flags override config fields.
JSON outputs embed the effective config; CSV and array outputs get a
``<file>.meta.json`` sidecar holding it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .cluster import kshape
from .dataset import EmptyInputError, NormStats, ParseError, apply_normalization, load_csv, make_windows, write_csv
from .detect import (
    ThresholdSet,
    UndefinedMetricError,
    auroc,
    classify,
    read_scores_csv,
    write_scores_csv,
    write_thresholds_json,
)
from .errors import ConfigError
from .gradengine import NumericError, OptimizerError
from .graphlearn import EXPORT_THRESHOLD, adjacency_matrices, threshold_adjacency
from .model import TrainConfig
from .pipeline import anomaly_scores, fit, prepare
from .synthgen import SynthConfig, generate, write_ground_truth
from .training import STREAM_KSHAPE, TrainingDivergedError, load_model, save_model

logger = logging.getLogger("mtgflow")

EXIT_USAGE = 2
EXIT_NUMERIC = 1


class UsageError(Exception):
    pass


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {path}")
    return p


def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(_existing(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return doc


def _train_config(args) -> TrainConfig:
    d = _read_config(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.mode is not None:
        d["mode"] = args.mode
    if args.disable_graph:
        d["disable_graph"] = True
    if args.disable_entity_aware:
        d["disable_entity_aware"] = True
    if getattr(args, "epochs", None) is not None:
        d["epochs"] = args.epochs
    try:
        return TrainConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _load_table(path: str, label_column: str | None):
    p = _existing(path)
    if label_column is None:
        with p.open(newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), [])
        label_column = "label" if "label" in [h.strip() for h in header] else None
    return load_csv(p, label_column)


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2))


def _sidecar(path, doc: dict) -> None:
    _write_json(f"{path}.meta.json", doc)


def cmd_synth(args) -> int:
    d = _read_config(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    table, intervals = generate(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(table, out / "data.csv")
    _sidecar(out / "data.csv", {"config": cfg.to_dict()})
    write_ground_truth(out / "ground_truth.json", intervals, cfg)
    print(f"wrote {out / 'data.csv'} (K={table.K}, L={table.L}, {len(intervals)} anomaly intervals)")
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    table = _load_table(args.data, args.label_column)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    det, _ = fit(table, config, log_path=out / "training_log.csv")
    _sidecar(out / "training_log.csv", {"config": config.to_dict()})
    save_model(out / "model.json", det.model, det.entity_names, det.norm, det.assignment, det.thresholds)
    if det.assignment is not None:
        _write_json(out / "clusters.json", {"config": config.to_dict(), "assignment": det.assignment.to_dict(det.entity_names)})
    print(f"trained {config.epochs} epochs; final mean NLL {det.result.epoch_nll[-1]:.4f}")
    return 0


def _model_and_data(args):
    model, extra = load_model(_existing(args.checkpoint))
    table = _load_table(args.data, args.label_column)
    names = tuple(extra["entity_names"])
    if table.K != model.K:
        raise ConfigError(f"{args.data} has {table.K} entities, checkpoint expects {model.K}")
    norm = NormStats.from_dict(extra["normalization"])
    if args.split == "all":
        part = apply_normalization(table, norm)
    else:
        splits, _ = prepare(table, model.config, norm)
        part = getattr(splits, args.split)
        if part is None:
            raise ConfigError(f"the {args.split} split of {args.data} is empty")
    return model, extra, names, part


def cmd_score(args) -> int:
    model, extra, names, part = _model_and_data(args)
    scores = anomaly_scores(model, part)
    thresholds = ThresholdSet.from_dict(extra["thresholds"], names) if "thresholds" in extra else None
    verdicts = classify(scores, thresholds) if thresholds is not None and scores.N else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scores_csv(out / "scores.csv", scores, verdicts, names)
    _sidecar(out / "scores.csv", {"config": model.config.to_dict(), "split": args.split})
    if thresholds is not None:
        write_thresholds_json(out / "thresholds.json", thresholds, names, model.config.to_dict())
    print(f"scored {scores.N} windows")
    return 0


def cmd_eval(args) -> int:
    starts, labels, scores = read_scores_csv(_existing(args.scores))
    if args.labels is not None:
        table = _load_table(args.labels, args.label_column or "label")
        M = int(args.window)
        if np.any(starts + M > table.L):
            raise ConfigError(f"windows of size {M} run past the end of {args.labels}")
        labels = np.array([table.labels[s : s + M].max() for s in starts])
    if labels is None:
        raise UsageError(f"{args.scores} has no label column; pass --labels")
    value = auroc(labels, scores)
    print(f"AUROC {value:.4f}")
    report = {"auroc": value, "n_windows": len(scores), "n_anomalous": int(np.sum(labels)),
              "scores": str(args.scores)}
    meta = Path(f"{args.scores}.meta.json")
    if meta.is_file():
        report["config"] = json.loads(meta.read_text()).get("config")
    _write_json(args.out, report)
    return 0


def cmd_cluster(args) -> int:
    config = _train_config(args)
    table = _load_table(args.data, args.label_column)
    splits, _ = prepare(table, config)
    m = args.m if args.m is not None else min(config.n_clusters, table.K)
    res = kshape(splits.train.values, m, seed=[config.seed, STREAM_KSHAPE], max_iter=config.kshape_max_iter)
    _write_json(args.out, {"config": config.to_dict(), "assignment": res.to_dict(table.entity_names)})
    print(f"{m} clusters: {res.labels.tolist()}")
    return 0


def cmd_export_graph(args) -> int:
    model, _, names, part = _model_and_data(args)
    batch = make_windows(part, model.config.M, model.config.S)
    graphs = adjacency_matrices(batch.windows, model.attention, batch.window_starts)
    doc = [{"window_start": g.window_index, "adjacency": threshold_adjacency(g.A, args.threshold).tolist(),
            "threshold_applied": args.threshold} for g in graphs]
    _write_json(args.out, doc)
    _sidecar(args.out, {"config": model.config.to_dict(), "entity_names": list(names), "split": args.split})
    print(f"exported {len(doc)} adjacency matrices")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtgflow", description="Graph-conditioned flow anomaly detection.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--mode", choices=("entity", "cluster"))
        p.add_argument("--disable-graph", action="store_true")
        p.add_argument("--disable-entity-aware", action="store_true")
        if data:
            p.add_argument("--data", required=True, help="dataset CSV")
            p.add_argument("--label-column", help="label column name (default: 'label' when present)")

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a model and write a checkpoint")
    common(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("score", cmd_score, "score windows with a checkpoint"),
                              ("export-graph", cmd_export_graph, "export per-window adjacency matrices")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--label-column")
        p.add_argument("--split", choices=("all", "train", "valid", "test"), default="all")
        p.add_argument("--out", required=True)
        if name == "export-graph":
            p.add_argument("--threshold", type=float, default=EXPORT_THRESHOLD)
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="AUROC of a scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--labels", help="dataset CSV whose labels override the scores file")
    p.add_argument("--label-column")
    p.add_argument("--window", type=int, default=60, help="window size used with --labels")
    p.add_argument("--out", required=True, help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cluster", help="KShape cluster assignment of the training split")
    common(p)
    p.add_argument("--m", type=int, help="number of clusters (default: min(n_clusters, K))")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_cluster)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (TrainingDivergedError, NumericError, OptimizerError, UndefinedMetricError, FloatingPointError) as exc:
        print(f"mtgflow {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ParseError, EmptyInputError, ValueError, KeyError) as exc:
        # ValueError/KeyError here come from malformed checkpoints or configs
        print(f"mtgflow {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
