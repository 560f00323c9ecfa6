"""Deterministic synthetic multivariate series with labeled anomalies.

Entities belong to shape groups (each group shares a base period).  Each
entity is a phase-shifted sinusoid of its group's period plus an AR(1)
component; a coupling matrix then mixes entities within a group, so the
ground-truth dependence graph is block structured.  Anomalies are injected
over recorded intervals, in the evaluation region (``count`` per AnomalySpec) and
in the training region (until ``contamination`` of its timesteps are
anomalous).
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataset import TimeSeriesTable
from .errors import ConfigError

logger = logging.getLogger(__name__)

KINDS = ("spike", "level_shift", "pattern_break")


@dataclass
class AnomalySpec:
    kind: str
    count: int
    duration: int
    magnitude: float = 4.0


@dataclass
class SynthConfig:
    K: int = 5
    L: int = 5000
    groups: list[int] | None = None  # group id per entity; default alternates two groups
    periods: list[float] = field(default_factory=lambda: [50.0, 23.0])
    coupling: list[list[float]] | None = None  # K x K; default within-group mixing
    coupling_strength: float = 0.4
    ar_coef: float = 0.8
    ar_scale: float = 0.15
    noise_sigma: float = 0.1
    anomalies: list[AnomalySpec] = field(default_factory=lambda: [
        AnomalySpec("spike", 4, 5, 5.0),
        AnomalySpec("level_shift", 3, 30, 3.0),
        AnomalySpec("pattern_break", 3, 40, 1.0),
    ])
    contamination: float = 0.1
    train_frac: float = 0.6
    intervals: list[dict] | None = None  # explicit {"start", "end", "kind"} list; overrides random placement
    seed: int = 0

    def __post_init__(self):
        self.anomalies = [a if isinstance(a, AnomalySpec) else AnomalySpec(**a) for a in self.anomalies]
        self.validate()

    def validate(self) -> None:
        if self.K < 1 or self.L < 2:
            raise ConfigError(f"need K >= 1 and L >= 2, got K={self.K}, L={self.L}")
        if not 0.0 <= self.contamination <= 0.3:
            raise ConfigError(f"contamination must lie in [0, 0.3], got {self.contamination}")
        if not 0.0 < self.train_frac <= 1.0:
            raise ConfigError(f"train_frac must lie in (0, 1], got {self.train_frac}")
        for a in self.anomalies:
            if a.kind not in KINDS:
                raise ConfigError(f"unknown anomaly kind {a.kind!r}; expected one of {KINDS}")
            if a.count < 0 or a.duration < 1:
                raise ConfigError(f"anomaly {a.kind}: count must be >= 0 and duration >= 1")
        if self.groups is not None and len(self.groups) != self.K:
            raise ConfigError(f"groups must list one id per entity (K={self.K})")
        if self.coupling is not None and np.shape(self.coupling) != (self.K, self.K):
            raise ConfigError(f"coupling must be {self.K} x {self.K}")
        for iv in self.intervals or ():
            if not 0 <= iv["start"] < iv["end"] <= self.L:
                raise ConfigError(f"interval {iv} lies outside [0, {self.L})")

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def group_ids(self) -> np.ndarray:
        if self.groups is not None:
            return np.asarray(self.groups, dtype=np.int64)
        return np.arange(self.K) % len(self.periods)


@dataclass(frozen=True)
class Interval:
    start: int
    end: int
    kind: str
    entities: tuple[int, ...]


def merge_intervals(intervals: list[Interval]) -> list[Interval]:
    """Merge overlapping or touching intervals (warns when any merge happens)."""
    merged: list[Interval] = []
    for iv in sorted(intervals, key=lambda i: (i.start, i.end)):
        if merged and iv.start <= merged[-1].end:
            last = merged[-1]
            logger.warning("anomaly intervals [%d, %d) and [%d, %d) overlap; merged", last.start, last.end, iv.start, iv.end)
            merged[-1] = Interval(last.start, max(last.end, iv.end), last.kind,
                                  tuple(sorted(set(last.entities) | set(iv.entities))))
        else:
            merged.append(iv)
    return merged


def _place(rng, lo: int, hi: int, duration: int, taken: list[tuple[int, int]], gap: int) -> tuple[int, int] | None:
    if hi - lo < duration:
        return None
    for _ in range(200):
        s = int(rng.integers(lo, hi - duration + 1))
        e = s + duration
        if all(e + gap <= a or s >= b + gap for a, b in taken):
            return s, e
    return None


def _base_signals(cfg: SynthConfig, rng) -> np.ndarray:
    K, L = cfg.K, cfg.L
    t = np.arange(L)
    groups = cfg.group_ids()
    phases = rng.uniform(0, 2 * np.pi, size=K)
    amps = rng.uniform(0.8, 1.2, size=K)
    innov = rng.standard_normal((K, L)) * cfg.ar_scale
    ar = np.zeros((K, L))
    for i in range(1, L):
        ar[:, i] = cfg.ar_coef * ar[:, i - 1] + innov[:, i]
    s = np.empty((K, L))
    for k in range(K):
        period = cfg.periods[groups[k] % len(cfg.periods)]
        s[k] = amps[k] * np.sin(2 * np.pi * t / period + phases[k]) + ar[k]
    if cfg.coupling is not None:
        W = np.asarray(cfg.coupling, dtype=np.float64)
    else:
        same = groups[:, None] == groups[None, :]
        W = np.eye(K) + cfg.coupling_strength * (same & ~np.eye(K, dtype=bool))
        W /= W.sum(axis=1, keepdims=True)
    return W @ s + rng.standard_normal((K, L)) * cfg.noise_sigma


def _inject(values: np.ndarray, iv: Interval, magnitude: float, rng, periods: list[float]) -> None:
    s, e = iv.start, iv.end
    n = e - s
    for k in iv.entities:
        scale = max(values[k].std(), 1e-6)
        if iv.kind == "spike":
            signs = rng.choice([-1.0, 1.0], size=n)
            values[k, s:e] += signs * magnitude * scale
        elif iv.kind == "level_shift":
            values[k, s:e] += rng.choice([-1.0, 1.0]) * magnitude * scale
        else:
            # replace the segment by a faster oscillation of the same scale
            fast = min(periods) / 4.0
            values[k, s:e] = values[k, s:e].mean() + magnitude * scale * np.sqrt(2) * np.sin(2 * np.pi * np.arange(n) / fast)


def generate(cfg: SynthConfig) -> tuple[TimeSeriesTable, list[Interval]]:
    """Return the labeled table and the list of (merged) anomaly intervals."""
    rng = np.random.default_rng(cfg.seed)
    values = _base_signals(cfg, rng)
    K, L = cfg.K, cfg.L
    train_end = int(cfg.train_frac * L)
    magnitudes = {a.kind: a.magnitude for a in cfg.anomalies}

    def pick_entities():
        n = int(rng.integers(1, max(1, (K + 1) // 2) + 1))
        return tuple(sorted(rng.choice(K, size=n, replace=False).tolist()))

    intervals: list[Interval] = []
    if cfg.intervals is not None:
        for iv in cfg.intervals:
            ents = tuple(iv.get("entities", pick_entities()))
            intervals.append(Interval(int(iv["start"]), int(iv["end"]), iv.get("kind", "spike"), ents))
        intervals = merge_intervals(intervals)
    else:
        taken: list[tuple[int, int]] = []
        for a in cfg.anomalies:
            for _ in range(a.count):
                spot = _place(rng, train_end, L, a.duration, taken, gap=1)
                if spot is None:
                    logger.warning("no room for another %s anomaly of length %d", a.kind, a.duration)
                    continue
                taken.append(spot)
                intervals.append(Interval(spot[0], spot[1], a.kind, pick_entities()))
        target = cfg.contamination * train_end
        labeled = 0
        kinds = [a for a in cfg.anomalies if a.duration <= train_end] or [AnomalySpec("spike", 1, 5)]
        j = 0
        while labeled < target:
            a = kinds[j % len(kinds)]
            j += 1
            dur = int(min(a.duration, np.ceil(target - labeled)))
            spot = _place(rng, 0, train_end, dur, taken, gap=1)
            if spot is None:
                logger.warning("training region full; contamination %.3f not reached", labeled / max(train_end, 1))
                break
            taken.append(spot)
            intervals.append(Interval(spot[0], spot[1], a.kind, pick_entities()))
            labeled += dur
        intervals.sort(key=lambda i: i.start)

    labels = np.zeros(L, dtype=np.int64)
    for iv in intervals:
        _inject(values, iv, magnitudes.get(iv.kind, 4.0), rng, cfg.periods)
        labels[iv.start : iv.end] = 1
    names = tuple(f"e{k}" for k in range(K))
    return TimeSeriesTable(values, labels, names), intervals


def write_ground_truth(path, intervals: list[Interval], config: SynthConfig | None = None) -> None:
    doc = {"intervals": [asdict(iv) for iv in intervals]}
    if config is not None:
        doc["config"] = config.to_dict()
    Path(path).write_text(json.dumps(doc, indent=2))
