"""Anomaly scores, IQR thresholds, verdicts and AUROC."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

IQR_FACTOR = 1.5
DEFAULT_LAMBDA = 0.8


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreSeries:
    """Per-window score (mean over entities) and per-entity scores."""

    entity_scores: np.ndarray  # N x K, negative log-likelihood per entity
    window_starts: np.ndarray
    window_size: int
    labels: np.ndarray | None = None

    @property
    def scores(self) -> np.ndarray:
        return self.entity_scores.mean(axis=1)

    @property
    def N(self) -> int:
        return self.entity_scores.shape[0]


@dataclass(frozen=True)
class ThresholdSet:
    global_threshold: float
    entity_thresholds: np.ndarray
    lambdas: np.ndarray

    def to_dict(self, entity_names=None) -> dict:
        names = list(entity_names) if entity_names is not None else [str(k) for k in range(len(self.lambdas))]
        return {
            "global": self.global_threshold,
            "entity": dict(zip(names, self.entity_thresholds.tolist())),
            "lambda": dict(zip(names, self.lambdas.tolist())),
        }

    @classmethod
    def from_dict(cls, d: dict, entity_names) -> ThresholdSet:
        names = list(entity_names)
        return cls(float(d["global"]), np.array([d["entity"][n] for n in names], float),
                   np.array([d["lambda"][n] for n in names], float))


@dataclass(frozen=True)
class Verdicts:
    anomalous: np.ndarray  # N bools
    culprits: np.ndarray  # N x K bools


def quartiles(values) -> tuple[float, float]:
    """25th/75th percentiles, linear interpolation at position p * (n - 1)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = v.size

    def at(p: float) -> float:
        pos = p * (n - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, n - 1)
        return float(v[lo] + (pos - lo) * (v[hi] - v[lo]))

    return at(0.25), at(0.75)


def iqr_threshold(training_scores, scale: float = 1.0) -> float:
    """``scale * (Q3 + 1.5 * (Q3 - Q1))`` over training-window scores."""
    v = np.asarray(training_scores, dtype=np.float64).ravel()
    if v.size < 4:
        raise ConfigError(f"IQR threshold needs at least 4 scores, got {v.size}")
    q1, q3 = quartiles(v)
    return float(scale * (q3 + IQR_FACTOR * (q3 - q1)))


def entity_thresholds(training: ScoreSeries, lambdas=None) -> np.ndarray:
    K = training.entity_scores.shape[1]
    lam = np.full(K, DEFAULT_LAMBDA) if lambdas is None else np.asarray(lambdas, dtype=np.float64)
    if lam.shape != (K,):
        raise ConfigError(f"need one lambda per entity (K={K}), got shape {lam.shape}")
    return np.array([iqr_threshold(training.entity_scores[:, k], lam[k]) for k in range(K)])


def fit_thresholds(training: ScoreSeries, lambdas=None) -> ThresholdSet:
    K = training.entity_scores.shape[1]
    lam = np.full(K, DEFAULT_LAMBDA) if lambdas is None else np.asarray(lambdas, dtype=np.float64)
    return ThresholdSet(iqr_threshold(training.scores), entity_thresholds(training, lam), lam)


def classify(scores: ScoreSeries, thresholds: ThresholdSet) -> Verdicts:
    """Strict ``>`` on both levels; entity culprits only inside anomalous windows."""
    anomalous = scores.scores > thresholds.global_threshold
    culprits = (scores.entity_scores > thresholds.entity_thresholds[None, :]) & anomalous[:, None]
    return Verdicts(anomalous, culprits)


def auroc(labels, scores) -> float:
    """Mann-Whitney AUROC with ties counted as one half."""
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.shape != s.shape:
        raise ValueError(f"labels {y.shape} and scores {s.shape} differ in shape")
    n_pos = int(y.sum())
    n_neg = int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs at least one positive and one negative label")
    # midranks handle ties
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def write_scores_csv(path, scores: ScoreSeries, verdicts: Verdicts | None, entity_names) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["window_start", "window_end", "score", "label", "verdict", *(f"score_{n}" for n in entity_names)])
        for i in range(scores.N):
            start = int(scores.window_starts[i])
            label = "" if scores.labels is None else int(scores.labels[i])
            verdict = "" if verdicts is None else int(verdicts.anomalous[i])
            w.writerow([start, start + scores.window_size, repr(float(scores.scores[i])), label, verdict,
                        *(repr(float(v)) for v in scores.entity_scores[i])])


def read_scores_csv(path) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Return (window_starts, labels or None, scores) from a scores CSV."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no score rows")
    starts = np.array([int(r["window_start"]) for r in rows])
    scores = np.array([float(r["score"]) for r in rows])
    labels = None
    if all(r.get("label", "") != "" for r in rows):
        labels = np.array([int(r["label"]) for r in rows])
    return starts, labels, scores


def write_thresholds_json(path, thresholds: ThresholdSet, entity_names, config: dict | None = None) -> None:
    doc = thresholds.to_dict(entity_names)
    if config is not None:
        doc["config"] = config
    Path(path).write_text(json.dumps(doc, indent=2))
