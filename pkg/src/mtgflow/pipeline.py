"""End-to-end fit/score flow: normalize on train, cluster, train, threshold, score."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .cluster import ClusterAssignment
from .dataset import NormStats, SplitSpec, TimeSeriesTable, apply_normalization, fit_normalization, make_windows, split
from .detect import ScoreSeries, ThresholdSet, fit_thresholds
from .errors import ConfigError
from .model import MTGFlow, TrainConfig
from .training import TrainResult, build_targets, train

logger = logging.getLogger(__name__)


@dataclass
class Splits:
    train: TimeSeriesTable
    valid: TimeSeriesTable | None
    test: TimeSeriesTable | None


@dataclass
class FittedDetector:
    model: MTGFlow
    norm: NormStats
    entity_names: tuple[str, ...]
    thresholds: ThresholdSet
    train_scores: ScoreSeries
    result: TrainResult | None = None
    assignment: ClusterAssignment | None = None


def split_spec(config: TrainConfig) -> SplitSpec:
    return SplitSpec(config.train_frac, config.valid_frac, config.test_frac)


def prepare(table: TimeSeriesTable, config: TrainConfig, norm: NormStats | None = None) -> tuple[Splits, NormStats]:
    """Chronological split, then z-score every part with training statistics."""
    train_t, valid_t, test_t = split(table, split_spec(config))
    if train_t is None:
        raise ConfigError("training split is empty")
    if norm is None:
        norm = fit_normalization(train_t)
    parts = [None if t is None else apply_normalization(t, norm) for t in (train_t, valid_t, test_t)]
    return Splits(*parts), norm


def anomaly_scores(model: MTGFlow, table_or_windows, chunk: int = 256) -> ScoreSeries:
    """Eval-mode negative log-likelihood per window and entity.

    Accepts a normalized table (windowed with the model's M and S) or a
    WindowBatch.
    """
    cfg = model.config
    batch = table_or_windows
    if isinstance(table_or_windows, TimeSeriesTable):
        batch = make_windows(table_or_windows, cfg.M, cfg.S)
    x = batch.windows
    out = np.empty((batch.N, model.K))
    for i in range(0, batch.N, chunk):
        out[i : i + chunk] = -model.entity_log_prob(x[i : i + chunk]).data
    return ScoreSeries(out, np.asarray(batch.window_starts), cfg.M, np.asarray(batch.window_labels))


def fit(table: TimeSeriesTable, config: TrainConfig, log_path=None) -> tuple[FittedDetector, Splits]:
    splits, norm = prepare(table, config)
    targets, assignment = build_targets(config, table.K, splits.train.values)
    model = MTGFlow(config, table.K, targets)
    train_w = make_windows(splits.train, config.M, config.S)
    valid_w = make_windows(splits.valid, config.M, config.S) if splits.valid is not None else None
    result = train(train_w, config, model, valid_w, log_path=log_path)
    train_scores = anomaly_scores(model, train_w)
    lambdas = np.full(table.K, config.lambda_)
    thresholds = fit_thresholds(train_scores, lambdas)
    det = FittedDetector(model, norm, table.entity_names, thresholds, train_scores, result, assignment)
    return det, splits
