"""Shape-based distance and KShape clustering of whole entity series."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)

_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class ClusterAssignment:
    labels: np.ndarray  # entity -> cluster index
    m: int
    centroids: np.ndarray  # m x L
    objective_history: tuple[float, ...] = field(default=(), compare=False)
    n_iter: int = 0

    def to_dict(self, entity_names) -> dict:
        return {str(name): int(c) for name, c in zip(entity_names, self.labels)}


def _znorm(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    std = x.std(axis=-1, keepdims=True)
    centered = x - x.mean(axis=-1, keepdims=True)
    return np.divide(centered, std, out=np.zeros_like(centered), where=std > _NORM_FLOOR)


def _circular_cc(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """cc[s] = sum_t x[t] * y[t - s mod L], i.e. x against y rolled by s."""
    L = x.shape[-1]
    return np.fft.irfft(np.fft.rfft(x) * np.conj(np.fft.rfft(y)), n=L)


def sbd(x, y) -> tuple[float, int]:
    """Shape-based distance over circular shifts.

    Returns ``(1 - max_s NCC(x, roll(y, s)), s*)`` with ``s*`` in
    ``(-L/2, L/2]``.  Both series are z-normalized first.  A series with zero
    norm gets distance 1 and shift 0.
    """
    x = _znorm(x)
    y = _znorm(y)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"sbd needs two 1-D series of equal length, got {x.shape} and {y.shape}")
    denom = np.linalg.norm(x) * np.linalg.norm(y)
    if denom < _NORM_FLOOR:
        logger.warning("sbd: zero-norm series; distance defined as 1")
        return 1.0, 0
    ncc = _circular_cc(x, y) / denom
    s = int(np.argmax(ncc))
    dist = float(np.clip(1.0 - ncc[s], 0.0, 2.0))
    L = x.shape[0]
    if s > L // 2:
        s -= L
    return dist, s


def _sbd_to_centroids(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Distances (K x m) between z-normalized rows of X and centroids C."""
    D = np.ones((X.shape[0], C.shape[0]))
    nx = np.linalg.norm(X, axis=1)
    nc = np.linalg.norm(C, axis=1)
    for j in range(C.shape[0]):
        if nc[j] < _NORM_FLOOR:
            continue
        cc = _circular_cc(X, C[j][None, :])
        ok = nx > _NORM_FLOOR
        D[ok, j] = np.clip(1.0 - cc[ok].max(axis=1) / (nx[ok] * nc[j]), 0.0, 2.0)
    return D


def _align(x: np.ndarray, ref: np.ndarray) -> np.ndarray:
    if np.linalg.norm(ref) < _NORM_FLOOR:
        return x
    _, s = sbd(ref, x)
    return np.roll(x, s)


def shape_extraction(members: np.ndarray, centroid: np.ndarray) -> np.ndarray:
    """Centroid maximizing the summed squared NCC to the aligned members.

    This is the leading eigenvector of Q^T S Q with S the scatter of the
    aligned members and Q the centering matrix; the sign is chosen to be
    closer (in SBD) to the members.
    """
    L = members.shape[1]
    aligned = np.stack([_align(x, centroid) for x in members])
    S = aligned.T @ aligned
    Q = np.eye(L) - np.full((L, L), 1.0 / L)
    Mx = Q @ S @ Q
    _, vecs = np.linalg.eigh(Mx)
    c = vecs[:, -1]
    if _sbd_to_centroids(aligned, -c[None, :]).sum() < _sbd_to_centroids(aligned, c[None, :]).sum():
        c = -c
    return _znorm(c)


def _canonical(labels: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # cluster ids ordered by their smallest member entity
    order = []
    for lab in labels:
        if lab not in order:
            order.append(int(lab))
    remap = {old: new for new, old in enumerate(order)}
    return np.array([remap[int(l)] for l in labels], dtype=np.int64), centroids[order]


def _assign(D: np.ndarray) -> np.ndarray:
    return np.argmin(D, axis=1)  # ties go to the lower cluster index


def kshape(series: np.ndarray, m: int, seed=0, max_iter: int = 100) -> ClusterAssignment:
    """Cluster K series (K x L) into m shape groups.

    Initial centroids are m distinct entities drawn with ``seed``.  Each
    iteration re-extracts centroids and reassigns by minimum SBD.  An
    iteration is only accepted if the summed within-cluster SBD does not
    grow, so the recorded objective is non-increasing.  A cluster that
    empties is reseeded with the entity farthest from its own centroid.
    Labels are renumbered so cluster ids follow first appearance in entity
    order.
    """
    X = _znorm(np.asarray(series, dtype=np.float64))
    if X.ndim != 2:
        raise ConfigError(f"kshape needs a K x L array, got shape {X.shape}")
    K = X.shape[0]
    if not 1 <= m <= K:
        raise ConfigError(f"number of clusters must satisfy 1 <= m <= K={K}, got {m}")
    rng = np.random.default_rng(seed)
    init = np.sort(rng.choice(K, size=m, replace=False))
    C = X[init].copy()
    D = _sbd_to_centroids(X, C)
    labels = _assign(D)
    labels, C, D = _fill_empty(X, labels, C, D)
    history = [float(D[np.arange(K), labels].sum())]

    it = 0
    for it in range(1, max_iter + 1):
        newC = C.copy()
        for j in range(m):
            members = X[labels == j]
            newC[j] = shape_extraction(members, C[j])
        newD = _sbd_to_centroids(X, newC)
        new_labels = _assign(newD)
        new_labels, newC, newD = _fill_empty(X, new_labels, newC, newD)
        obj = float(newD[np.arange(K), new_labels].sum())
        if obj > history[-1] + 1e-12:
            it -= 1
            break
        history.append(obj)
        changed = not np.array_equal(new_labels, labels)
        labels, C = new_labels, newC
        if not changed:
            break

    labels, C = _canonical(labels, C)
    return ClusterAssignment(labels, m, C, tuple(history), it)


def _fill_empty(X, labels, C, D):
    m = C.shape[0]
    labels = labels.copy()
    for _ in range(m):
        counts = np.bincount(labels, minlength=m)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0:
            break
        j = int(empty[0])
        own = D[np.arange(len(labels)), labels].copy()
        own[counts[labels] <= 1] = -np.inf  # never strip a singleton
        far = int(np.argmax(own))
        C = C.copy()
        C[j] = X[far]
        labels[far] = j
        D = _sbd_to_centroids(X, C)
    return labels, C, D
