"""Joint maximum-likelihood training and model checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gradengine as ge
from .cluster import kshape
from .dataset import NormStats, WindowBatch
from .errors import ConfigError
from .flow import TargetBank, init_targets, zero_targets
from .model import MTGFlow, TrainConfig

logger = logging.getLogger(__name__)

# independent RNG streams derived from the run seed
STREAM_TARGETS = 1
STREAM_DROPOUT = 2
STREAM_SHUFFLE = 3
STREAM_KSHAPE = 4


class TrainingDivergedError(RuntimeError):
    pass


def stream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *keys])


def build_targets(config: TrainConfig, K: int, train_values: np.ndarray | None = None):
    """Target bank for the configured mode, plus the cluster assignment if any.

    ``train_values`` (K x L, normalized training split) is required in
    cluster mode.
    """
    if config.disable_entity_aware:
        return zero_targets(K, config.M), None
    seed = [config.seed, STREAM_TARGETS]
    if config.mode == "entity":
        return init_targets("entity", K, config.M, seed), None
    if train_values is None:
        raise ConfigError("cluster mode needs the training series to run KShape")
    m = min(config.n_clusters, K)
    assignment = kshape(train_values, m, seed=[config.seed, STREAM_KSHAPE], max_iter=config.kshape_max_iter)
    return init_targets("cluster", K, config.M, seed, assignment.labels), assignment


def mean_nll(model: MTGFlow, windows: np.ndarray, chunk: int = 256) -> float:
    """Eval-mode mean NLL over all windows (chunked, fixed order)."""
    total = 0.0
    for i in range(0, len(windows), chunk):
        lp = model.entity_log_prob(windows[i : i + chunk]).data
        total += float(-lp.sum())
    return total / (len(windows) * model.K)


@dataclass
class TrainResult:
    model: MTGFlow
    initial_nll: float
    epoch_nll: list[float]
    valid_nll: list[float]


def train(data: WindowBatch, config: TrainConfig, model: MTGFlow, valid: WindowBatch | None = None,
          log_path=None) -> TrainResult:
    """Adam on the negative mean log-likelihood, all modules jointly.

    ``epoch_nll[e]`` is the eval-mode mean NLL over the whole training set
    after epoch e.  Window order is reshuffled each epoch from the run seed
    and attention dropout draws from a per-batch stream, so two runs with
    the same seed are identical.
    """
    if data.N == 0:
        raise ConfigError("no training windows (series shorter than the window size?)")
    x = data.windows
    initial = mean_nll(model, x)
    if not math.isfinite(initial):
        raise TrainingDivergedError(f"initial NLL is not finite ({initial})")
    history: list[float] = []
    valid_hist: list[float] = []
    for epoch in range(config.epochs):
        order = stream(config.seed, STREAM_SHUFFLE, epoch).permutation(data.N)
        for b, i in enumerate(range(0, data.N, config.batch_size)):
            idx = order[i : i + config.batch_size]
            lp = model.entity_log_prob(x[idx], training=True, rng=stream(config.seed, STREAM_DROPOUT, epoch, b))
            if not np.all(np.isfinite(lp.data)):
                w, k = np.argwhere(~np.isfinite(lp.data))[0]
                raise TrainingDivergedError(f"non-finite log-likelihood at epoch {epoch + 1}, batch {b}, "
                                            f"window {int(idx[w])}, entity {int(k)}")
            loss = -ge.mean(lp)
            model.store.zero_grad()
            loss.backward()
            ge.adam_step(model.store, config.lr)
        nll = mean_nll(model, x)
        history.append(nll)
        if valid is not None and valid.N:
            valid_hist.append(mean_nll(model, valid.windows))
        logger.info("epoch %d  mean NLL %.4f", epoch + 1, nll)
        if not math.isfinite(nll) or nll - initial > 9.0 * abs(initial):
            raise TrainingDivergedError(f"training diverged at epoch {epoch + 1}: NLL {nll:.4g} vs initial {initial:.4g}")
    if log_path is not None:
        write_training_log(log_path, history)
    return TrainResult(model, initial, history, valid_hist)


def write_training_log(path, history: list[float]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_nll"])
        for e, v in enumerate(history, start=1):
            w.writerow([e, repr(float(v))])


def save_model(path, model: MTGFlow, entity_names, norm: NormStats | None = None, assignment=None,
               thresholds=None) -> None:
    extra = {
        "config": model.config.to_dict(),
        "K": model.K,
        "entity_names": list(entity_names),
        "targets": model.targets.to_dict(),
    }
    if norm is not None:
        extra["normalization"] = norm.to_dict()
    if assignment is not None:
        extra["assignment"] = assignment.labels.tolist()
    if thresholds is not None:
        extra["thresholds"] = thresholds.to_dict(entity_names)
    ge.save_checkpoint(path, model.store.state_dict(), extra)


def load_model(path) -> tuple[MTGFlow, dict]:
    params, extra = ge.load_checkpoint(path)
    config = TrainConfig.from_dict(extra["config"])
    model = MTGFlow(config, int(extra["K"]), TargetBank.from_dict(extra["targets"]))
    model.store.load_state_dict(params)
    return model, extra
