"""Dynamic graph structure learning by scaled dot-product self-attention.

Each entity's window is a graph node.  The adjacency for a window is the
row-wise softmax of pairwise query/key scores, so row i says how much node i
attends to every other node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradengine as ge
from .gradengine import ParamStore, ShapeError, Tensor

DEFAULT_DROPOUT = 0.2
EXPORT_THRESHOLD = 0.15


@dataclass
class AttentionParams:
    W_query: Tensor  # M x M
    W_key: Tensor  # M x M
    dropout_rate: float = DEFAULT_DROPOUT

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def M(self) -> int:
        return self.W_query.shape[0]


@dataclass(frozen=True)
class AdjacencyMatrix:
    A: np.ndarray  # K x K
    window_index: int


def init_attention(store: ParamStore, M: int, dropout_rate: float = DEFAULT_DROPOUT, prefix: str = "attn") -> AttentionParams:
    bound = 1.0 / np.sqrt(M)
    return AttentionParams(
        store.uniform(f"{prefix}.W_query", (M, M), bound),
        store.uniform(f"{prefix}.W_key", (M, M), bound),
        dropout_rate,
    )


def pairwise_scores(x_window, params: AttentionParams) -> Tensor:
    """e_ij = (x_i W_q) . (x_j W_k) / sqrt(M) for a (..., K, M) window stack."""
    x = ge.as_tensor(x_window)
    M = params.M
    if x.ndim < 2 or x.shape[-1] != M:
        raise ShapeError(f"window shape {x.shape} does not match attention width M={M}")
    q = x @ params.W_query
    k = x @ params.W_key
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    return (q @ ge.transpose(k, axes)) * (1.0 / np.sqrt(M))


def attention_adjacency(scores, training: bool = False, rng: np.random.Generator | None = None,
                        dropout_rate: float = DEFAULT_DROPOUT) -> Tensor:
    """Row softmax of ``scores``; inverted dropout on the weights when training.

    Dropped rows are not renormalized, so row sums are exactly one only in
    eval mode.
    """
    A = ge.softmax(scores)
    if training and dropout_rate > 0:
        if rng is None:
            raise ValueError("training-mode dropout needs an rng")
        keep = rng.random(A.shape) >= dropout_rate
        A = A * (keep / (1.0 - dropout_rate))
    return A


def adjacency_matrices(windows: np.ndarray, params: AttentionParams, window_indices=None) -> list[AdjacencyMatrix]:
    """Eval-mode adjacency for each window in an (N, K, M) array."""
    A = attention_adjacency(pairwise_scores(windows, params)).data
    if window_indices is None:
        window_indices = range(len(A))
    return [AdjacencyMatrix(a, int(c)) for a, c in zip(A, window_indices)]


def threshold_adjacency(A: np.ndarray, threshold: float = EXPORT_THRESHOLD) -> np.ndarray:
    """Zero out attention weights at or below ``threshold`` (for visualization only)."""
    return np.where(A > threshold, A, 0.0)
