"""Conditional masked autoregressive flow with entity/cluster Gaussian targets.

Direction convention: the forward map sends data to latent,
``z_i = (x_i - shift_i) * exp(-logscale_i)``, where shift and log-scale for
coordinate i are produced by a MADE conditioner from ``x_<i`` and the
condition.  The log-determinant of the forward map is therefore
``-sum(logscale)``.

Conditions arrive per coordinate (one ``cond_dim`` vector per timestep).
They enter the conditioner twice: as masked inputs to the hidden layer
(coordinate j's condition reaches only units that may feed outputs i >= j)
and as a direct per-coordinate linear term on the outputs.  Output i thus
depends on ``x_<i`` and ``cond_<=i`` only, so a condition built from
values before each timestep keeps the whole map autoregressive in x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import gradengine as ge
from .errors import ConfigError
from .gradengine import NumericError, ParamStore, ShapeError, Tensor

LOGSCALE_CLAMP = 7.0
LOG_2PI = math.log(2.0 * math.pi)


def made_masks(M: int, hidden: int) -> tuple[np.ndarray, np.ndarray]:
    """Input->hidden (M x hidden) and hidden->output (hidden x M) masks.

    Input j has degree j + 1, hidden unit u has degree ``u mod M``.  Input j
    feeds unit u iff ``j + 1 <= deg(u)``; unit u feeds output i iff
    ``deg(u) <= i``.  Output i therefore sees only inputs j < i.
    """
    deg_in = np.arange(1, M + 1)
    deg_hidden = np.arange(hidden) % M
    mask_in = (deg_in[:, None] <= deg_hidden[None, :]).astype(np.float64)
    mask_out = (deg_hidden[:, None] <= np.arange(M)[None, :]).astype(np.float64)
    return mask_in, mask_out


def context_mask(M: int, cond_dim: int, hidden: int) -> np.ndarray:
    """(M * cond_dim) x hidden mask: coordinate j's condition feeds unit u iff ``j <= deg(u)``."""
    deg_hidden = np.arange(hidden) % M
    allowed = np.arange(M)[:, None] <= deg_hidden[None, :]
    return np.repeat(allowed, cond_dim, axis=0).astype(np.float64)


@dataclass
class MAFBlock:
    W_in: Tensor  # M x hidden (masked)
    W_ctx: Tensor  # (M * cond_dim) x hidden (masked)
    b_hidden: Tensor
    W_out: Tensor  # hidden x 2M (masked); shift columns first
    U_out: Tensor  # cond_dim x 2, per-coordinate condition term
    b_out: Tensor  # 2M
    reverse: bool = False
    mask_in: np.ndarray = field(init=False, repr=False)
    mask_out: np.ndarray = field(init=False, repr=False)
    mask_ctx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.mask_in, mask_out = made_masks(self.M, self.hidden)
        self.mask_out = np.concatenate([mask_out, mask_out], axis=1)
        self.mask_ctx = context_mask(self.M, self.cond_dim, self.hidden)

    @property
    def M(self) -> int:
        return self.W_in.shape[0]

    @property
    def hidden(self) -> int:
        return self.W_in.shape[1]

    @property
    def cond_dim(self) -> int:
        return self.U_out.shape[0]

    def conditioner(self, x, cond) -> tuple[Tensor, Tensor]:
        """Shift and clamped log-scale for rows of x (R, M), cond (R, M, cond_dim).

        Both are in the block's own coordinate order (already reversed if
        ``reverse``).
        """
        x = ge.as_tensor(x)
        cond = ge.as_tensor(cond)
        R, M = x.shape
        flat = ge.reshape(cond, (R, M * self.cond_dim))
        h = ge.relu(x @ (self.W_in * self.mask_in) + flat @ (self.W_ctx * self.mask_ctx) + self.b_hidden)
        out = h @ (self.W_out * self.mask_out) + self.b_out
        direct = cond @ self.U_out
        shift = out[:, :M] + direct[:, :, 0]
        logscale = ge.clip(out[:, M:] + direct[:, :, 1], -LOGSCALE_CLAMP, LOGSCALE_CLAMP)
        return shift, logscale

    def forward(self, x, cond) -> tuple[Tensor, Tensor]:
        x = ge.as_tensor(x)
        cond = ge.as_tensor(cond)
        if self.reverse:
            x = ge.flip(x, -1)
            cond = ge.flip(cond, -2)
        shift, logscale = self.conditioner(x, cond)
        z = (x - shift) * ge.exp(-logscale)
        if self.reverse:
            z = ge.flip(z, -1)
        return z, -ge.sum_(logscale, axis=-1)

    def inverse(self, z: np.ndarray, cond: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        cond = np.asarray(cond, dtype=np.float64)
        if self.reverse:
            z = z[:, ::-1]
            cond = cond[:, ::-1, :]
        x = np.zeros_like(z)
        for i in range(self.M):
            shift, logscale = self.conditioner(x, cond)
            x[:, i] = z[:, i] * np.exp(logscale.data[:, i]) + shift.data[:, i]
        if self.reverse:
            x = x[:, ::-1]
        return np.ascontiguousarray(x)


@dataclass
class FlowStack:
    blocks: list[MAFBlock]

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("a flow stack needs at least one block")

    @property
    def M(self) -> int:
        return self.blocks[0].M


def init_flow(store: ParamStore, M: int, cond_dim: int, n_blocks: int = 1, hidden: int = 64,
              prefix: str = "flow") -> FlowStack:
    blocks = []
    for b in range(n_blocks):
        p = f"{prefix}.{b}"
        blocks.append(
            MAFBlock(
                store.uniform(f"{p}.W_in", (M, hidden), 1.0 / math.sqrt(M)),
                store.uniform(f"{p}.W_ctx", (M * cond_dim, hidden), 1.0 / math.sqrt(M * cond_dim)),
                store.uniform(f"{p}.b_hidden", (hidden,), 1.0 / math.sqrt(M)),
                store.uniform(f"{p}.W_out", (hidden, 2 * M), 1.0 / math.sqrt(hidden)),
                store.uniform(f"{p}.U_out", (cond_dim, 2), 1.0 / math.sqrt(cond_dim)),
                store.uniform(f"{p}.b_out", (2 * M,), 1.0 / math.sqrt(hidden)),
                reverse=bool(b % 2),
            )
        )
    return FlowStack(blocks)


def _check_inputs(x, cond, stack: FlowStack) -> tuple[Tensor, Tensor]:
    x = ge.as_tensor(x)
    cond = ge.as_tensor(cond)
    if x.ndim == 1:
        x = ge.reshape(x, (1, -1))
    if cond.ndim == 2:
        cond = ge.reshape(cond, (1,) + cond.shape)
    M = stack.M
    cd = stack.blocks[0].cond_dim
    if x.shape[-1] != M or cond.shape[1:] != (M, cd) or cond.shape[0] != x.shape[0]:
        raise ShapeError(f"flow expects x (R, {M}) and condition (R, {M}, {cd}); got {x.shape} and {cond.shape}")
    return x, cond


def forward_transform(x, cond, stack: FlowStack) -> tuple[Tensor, Tensor]:
    """Data -> latent for rows x (R, M) with conditions (R, M, cond_dim).

    Returns z (R, M) and log|det dz/dx| (R,).  A single window may be
    passed as x (M,) and cond (M, cond_dim); the row axis is added.
    """
    x, cond = _check_inputs(x, cond, stack)
    z = x
    logdet = Tensor(np.zeros(x.shape[0]))
    for b, block in enumerate(stack.blocks):
        z, ld = block.forward(z, cond)
        if not np.all(np.isfinite(z.data)):
            raise NumericError(f"non-finite output from flow block {b}")
        logdet = logdet + ld
    return z, logdet


def inverse_transform(z, cond, stack: FlowStack) -> np.ndarray:
    """Latent -> data by sequential per-coordinate inversion of each block."""
    z, cond = _check_inputs(z, cond, stack)
    x = z.data
    for b in reversed(range(len(stack.blocks))):
        x = stack.blocks[b].inverse(x, cond.data)
        if not np.all(np.isfinite(x)):
            raise NumericError(f"non-finite value inverting flow block {b}")
    return x


def log_prob(x, cond, stack: FlowStack, target_mean) -> Tensor:
    """log N(f(x | cond); mean, I) + log|det|, per row.

    ``target_mean`` broadcasts against z: an (R, M) array, an (M,) vector
    or an (R, 1) column of constant means.
    """
    z, logdet = forward_transform(x, cond, stack)
    M = z.shape[-1]
    resid = z - np.asarray(target_mean, dtype=np.float64)
    return ge.squared_l2(resid, axis=-1) * -0.5 - 0.5 * M * LOG_2PI + logdet


@dataclass(frozen=True)
class TargetBank:
    """Constant-valued Gaussian target means, one scalar per group.

    ``group_of[k]`` is the group (entity or cluster) whose mean entity k
    uses.  Means are never trained.
    """

    group_means: np.ndarray
    group_of: np.ndarray
    M: int
    mode: str

    def entity_means(self) -> np.ndarray:
        """(K,) scalar mean per entity."""
        return self.group_means[self.group_of]

    def mean_vectors(self) -> np.ndarray:
        """(K, M) mean vectors; each row is constant."""
        return np.repeat(self.entity_means()[:, None], self.M, axis=1)

    def to_dict(self) -> dict:
        return {"group_means": self.group_means.tolist(), "group_of": self.group_of.tolist(),
                "M": self.M, "mode": self.mode}

    @classmethod
    def from_dict(cls, d: dict) -> TargetBank:
        return cls(np.asarray(d["group_means"], float), np.asarray(d["group_of"], np.int64), int(d["M"]), d["mode"])


def init_targets(mode: str, K: int, M: int, seed, assignments=None) -> TargetBank:
    """Draw one N(0, 1) scalar per entity ("entity") or per cluster ("cluster").

    Draws happen in group-index order from a generator seeded with
    ``seed``, so singleton clusters labeled 0..K-1 in entity order
    reproduce the per-entity bank exactly.
    """
    rng = np.random.default_rng(seed)
    if mode == "entity":
        return TargetBank(rng.standard_normal(K), np.arange(K), M, mode)
    if mode != "cluster":
        raise ConfigError(f"unknown target mode {mode!r}; expected 'entity' or 'cluster'")
    if assignments is None:
        raise ConfigError("cluster mode needs an entity -> cluster assignment")
    group_of = np.asarray(assignments, dtype=np.int64)
    if group_of.shape != (K,) or np.any(group_of < 0):
        raise ConfigError(f"assignment must give a cluster index for each of the {K} entities")
    m = int(group_of.max()) + 1
    return TargetBank(rng.standard_normal(m), group_of, M, mode)


def zero_targets(K: int, M: int) -> TargetBank:
    """All-zero means (the ablation without entity-aware targets)."""
    return TargetBank(np.zeros(1), np.zeros(K, dtype=np.int64), M, "shared")
