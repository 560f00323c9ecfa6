"""Spatio-temporal conditions: graph-mixed hidden states plus each node's own history."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradengine as ge
from .errors import ConfigError
from .gradengine import ParamStore, ShapeError, Tensor


@dataclass
class ConditionParams:
    W1: Tensor  # hidden x cond, graph-convolution path
    W2: Tensor  # hidden x cond, history path
    W3: Tensor  # cond x cond

    @property
    def cond_dim(self) -> int:
        return self.W3.shape[1]


def init_condition(store: ParamStore, hidden: int, cond_dim: int, prefix: str = "cond") -> ConditionParams:
    return ConditionParams(
        store.uniform(f"{prefix}.W1", (hidden, cond_dim), 1.0 / np.sqrt(hidden)),
        store.uniform(f"{prefix}.W2", (hidden, cond_dim), 1.0 / np.sqrt(hidden)),
        store.uniform(f"{prefix}.W3", (cond_dim, cond_dim), 1.0 / np.sqrt(cond_dim)),
    )


def shift_history(H) -> Tensor:
    """H^{t-1} for every t, with zeros at t = 0.  H is (..., K, M, d)."""
    H = ge.as_tensor(H)
    zero = Tensor(np.zeros(H.shape[:-2] + (1, H.shape[-1])))
    return ge.concat([zero, H[..., :-1, :]], axis=-2)


def pre_activation(A, H, params: ConditionParams, use_graph: bool = True, graph_lag: int = 0) -> Tensor:
    """ReLU(A H^{t-lag} W1 + H^{t-1} W2), shape (..., K, M, cond)."""
    H = ge.as_tensor(H)
    *lead, K, M, d = H.shape
    if params.W1.shape[0] != d:
        raise ShapeError(f"hidden width {d} does not match W1 shape {params.W1.shape}")
    hist = shift_history(H) @ params.W2
    if not use_graph:
        return ge.relu(hist)
    A = ge.as_tensor(A)
    if A.shape[-2:] != (K, K):
        raise ShapeError(f"adjacency shape {A.shape} does not match K={K}")
    if graph_lag not in (0, 1):
        raise ConfigError(f"graph_lag must be 0 or 1, got {graph_lag}")
    src = shift_history(H) if graph_lag else H
    flat = ge.reshape(src, tuple(lead) + (K, M * d))
    mixed = ge.reshape(A @ flat, tuple(lead) + (K, M, d))
    return ge.relu(mixed @ params.W1 + hist)


def spatio_temporal_condition(A, H, params: ConditionParams, use_graph: bool = True,
                              graph_lag: int = 0) -> Tensor:
    """C[k, t] = ReLU(A H^{t-lag} W1 + H^{t-1} W2)[k] W3.

    ``graph_lag=0`` mixes the current hidden states, which include x_k^t
    itself.  ``graph_lag=1`` mixes H^{t-1} so that C[k, t] depends only on
    values strictly before t.  With ``use_graph=False`` the graph path is
    dropped entirely and the condition is ReLU(H^{t-1} W2) W3.
    """
    return pre_activation(A, H, params, use_graph, graph_lag) @ params.W3
