"""Single-layer LSTM run independently over each entity's window."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradengine as ge
from .gradengine import ParamStore, Tensor


@dataclass
class RecurrentParams:
    """Gate order in the stacked weights is input, forget, cell, output."""

    W_ih: Tensor  # 1 x 4h
    W_hh: Tensor  # h x 4h
    b: Tensor  # 4h

    @property
    def hidden(self) -> int:
        return self.W_hh.shape[0]


def init_lstm(store: ParamStore, hidden: int, prefix: str = "lstm") -> RecurrentParams:
    bound = 1.0 / np.sqrt(hidden)
    return RecurrentParams(
        store.uniform(f"{prefix}.W_ih", (1, 4 * hidden), bound),
        store.uniform(f"{prefix}.W_hh", (hidden, 4 * hidden), bound),
        store.uniform(f"{prefix}.b", (4 * hidden,), bound),
    )


def lstm_cell(x_t, h, c, params: RecurrentParams) -> tuple[Tensor, Tensor]:
    """One step for a batch of scalar inputs; x_t is (R, 1), h and c are (R, hidden)."""
    d = params.hidden
    gates = x_t * params.W_ih + h @ params.W_hh + params.b
    sig = ge.sigmoid(gates)
    i = sig[:, 0:d]
    f = sig[:, d : 2 * d]
    o = sig[:, 3 * d : 4 * d]
    g = ge.tanh(gates[:, 2 * d : 3 * d])
    c = f * c + i * g
    h = o * ge.tanh(c)
    return h, c


def encode(x_window, params: RecurrentParams) -> Tensor:
    """Hidden states for every entity and timestep: (..., K, M) -> (..., K, M, hidden).

    Each row starts from the zero state; weights are shared across rows.
    """
    x = ge.as_tensor(x_window)
    lead = x.shape[:-1]
    M = x.shape[-1]
    rows = ge.reshape(x, (-1, M))
    R = rows.shape[0]
    d = params.hidden
    h = Tensor(np.zeros((R, d)))
    c = Tensor(np.zeros((R, d)))
    states = []
    for t in range(M):
        h, c = lstm_cell(rows[:, t : t + 1], h, c, params)
        states.append(h)
    H = ge.stack(states, axis=1)
    return ge.reshape(H, lead + (M, d))
