"""The full density model: attention graph, LSTM, conditions and shared flow."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import gradengine as ge
from .condition import init_condition, spatio_temporal_condition
from .errors import ConfigError
from .flow import TargetBank, forward_transform, init_flow, log_prob
from .gradengine import ParamStore, ShapeError, Tensor
from .graphlearn import attention_adjacency, init_attention, pairwise_scores
from .temporal import encode, init_lstm


@dataclass
class TrainConfig:
    """Model and optimization settings.

    Defaults: window 60, stride 10, Adam at 0.002, 40 epochs, one flow
    block, batch 256, 20 clusters, lambda 0.8 and 0.2 attention dropout.
    Widths 32/32/64 keep CPU training quick.  ``graph_lag=1`` mixes the
    previous step's hidden states in the graph term (see condition).
    """

    M: int = 60
    S: int = 10
    lr: float = 0.002
    epochs: int = 40
    batch_size: int = 256
    flow_blocks: int = 1
    d_h: int = 32
    d_c: int = 32
    d_f: int = 64
    mode: str = "entity"
    n_clusters: int = 20
    seed: int = 0
    disable_graph: bool = False
    disable_entity_aware: bool = False
    dropout: float = 0.2
    lambda_: float = 0.8
    train_frac: float = 0.6
    valid_frac: float = 0.2
    test_frac: float = 0.2
    kshape_max_iter: int = 100
    graph_lag: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("M", "S", "epochs", "batch_size", "flow_blocks", "d_h", "d_c", "d_f", "n_clusters"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.mode not in ("entity", "cluster"):
            raise ConfigError(f"mode must be 'entity' or 'cluster', got {self.mode!r}")
        if self.graph_lag not in (0, 1):
            raise ConfigError(f"graph_lag must be 0 or 1, got {self.graph_lag}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @classmethod
    def univariate(cls, **overrides) -> TrainConfig:
        """Short-window defaults for univariate series (window 10, stride 10, two blocks)."""
        base = dict(M=10, S=10, flow_blocks=2)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


class MTGFlow:
    """Joint model; ``entity_log_prob`` is the only forward entry point."""

    def __init__(self, config: TrainConfig, K: int, targets: TargetBank):
        if targets.group_of.shape != (K,) or targets.M != config.M:
            raise ConfigError(f"target bank is for K={targets.group_of.shape[0]}, M={targets.M}; "
                              f"model has K={K}, M={config.M}")
        self.config = config
        self.K = K
        self.targets = targets
        self.store = ParamStore(seed=config.seed)
        self.attention = init_attention(self.store, config.M, config.dropout)
        self.lstm = init_lstm(self.store, config.d_h)
        self.condition = init_condition(self.store, config.d_h, config.d_c)
        self.flow = init_flow(self.store, config.M, config.d_c, config.flow_blocks, config.d_f)

    def adjacency(self, windows, training: bool = False, rng=None) -> Tensor:
        scores = pairwise_scores(windows, self.attention)
        return attention_adjacency(scores, training, rng, self.attention.dropout_rate)

    def conditions(self, windows, training: bool = False, rng=None) -> Tensor:
        """(N, K, M, d_c) spatio-temporal conditions."""
        H = encode(windows, self.lstm)
        use_graph = not self.config.disable_graph
        A = self.adjacency(windows, training, rng) if use_graph else None
        return spatio_temporal_condition(A, H, self.condition, use_graph, self.config.graph_lag)

    def latents(self, windows) -> np.ndarray:
        """Eval-mode flow outputs z, shape (N, K, M)."""
        x = np.asarray(windows, dtype=np.float64)
        N, K, M = x.shape
        C = self.conditions(x)
        z, _ = forward_transform(x.reshape(N * K, M), ge.reshape(C, (N * K, M, self.config.d_c)), self.flow)
        return z.data.reshape(N, K, M)

    def entity_log_prob(self, windows, training: bool = False, rng=None) -> Tensor:
        """log P(x_k^c) for every window c and entity k, shape (N, K)."""
        x = np.asarray(windows, dtype=np.float64)
        if x.ndim != 3 or x.shape[1:] != (self.K, self.config.M):
            raise ShapeError(f"windows must be (N, {self.K}, {self.config.M}), got {x.shape}")
        N, K, M = x.shape
        C = self.conditions(x, training, rng)
        rows = x.reshape(N * K, M)
        cond = ge.reshape(C, (N * K, M, self.config.d_c))
        mean = np.tile(self.targets.entity_means(), N)[:, None]
        lp = log_prob(rows, cond, self.flow, mean)
        return ge.reshape(lp, (N, K))


def mle_loss(model: MTGFlow, windows, training: bool = False, rng=None) -> Tensor:
    """Negative mean log-likelihood over windows and entities."""
    if len(windows) == 0:
        raise ConfigError("mle_loss needs at least one window")
    return -ge.mean(model.entity_log_prob(windows, training, rng))
