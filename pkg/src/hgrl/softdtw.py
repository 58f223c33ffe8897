"""Soft dynamic time warping, its gradient, pairwise matrices and the similarity transform."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np


class SoftDtwError(ValueError):
    pass


@dataclass(frozen=True)
class SoftDtwConfig:
    gamma2: float = 1.0
    bandwidth: int | None = None

    def __post_init__(self):
        if self.gamma2 < 0:
            raise SoftDtwError("gamma2 must be >= 0")


@dataclass
class SimilarityMatrix:
    raw: np.ndarray
    normalized: np.ndarray
    similarity: np.ndarray
    alpha: float


def softmin(values, gamma2: float) -> float:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise SoftDtwError("softmin of an empty list")
    return float(_softmin_rows(v[None, :], gamma2)[0])


def _softmin_rows(v: np.ndarray, gamma2: float) -> np.ndarray:
    """Soft minimum along the last axis, max-shifted; +inf entries are ignored."""
    vmin = v.min(axis=-1)
    if gamma2 == 0:
        return vmin
    finite = np.isfinite(vmin)
    shift = np.where(finite, vmin, 0.0)
    z = np.exp(-(v - shift[..., None]) / gamma2).sum(axis=-1)
    return np.where(finite, shift - gamma2 * np.log(np.where(finite, z, 1.0)), np.inf)


def _as_seq(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] == 0:
        raise SoftDtwError("sequences must be non-empty (length x dim)")
    return a


def _band_ok(i: int, j: int, n: int, m: int, bandwidth: int | None) -> bool:
    return bandwidth is None or abs(i - j) <= bandwidth


def _forward(r: np.ndarray, gamma2: float, bandwidth: int | None) -> np.ndarray:
    """Accumulated-cost table for a batch of cost matrices ``r`` (P x n x m)."""
    P, n, m = r.shape
    D = np.full((P, n + 1, m + 1), np.inf)
    D[:, 0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            if not _band_ok(i, j, n, m, bandwidth):
                continue
            prev = np.stack((D[:, i, j - 1], D[:, i - 1, j], D[:, i - 1, j - 1]), axis=-1)
            D[:, i, j] = r[:, i - 1, j - 1] + _softmin_rows(prev, gamma2)
    return D


def _cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...ijk,...ijk->...ij", diff, diff)


def softdtw(a, b, cfg: SoftDtwConfig | None = None) -> float:
    cfg = cfg or SoftDtwConfig()
    a, b = _as_seq(a), _as_seq(b)
    if a.shape[1] != b.shape[1]:
        raise SoftDtwError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    D = _forward(_cost(a, b)[None], cfg.gamma2, cfg.bandwidth)
    return float(D[0, -1, -1])


def softdtw_batch(A: np.ndarray, B: np.ndarray, cfg: SoftDtwConfig | None = None) -> np.ndarray:
    """Soft-DTW for P equal-shape pairs at once: A is P x n x d, B is P x m x d."""
    cfg = cfg or SoftDtwConfig()
    A, B = np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64)
    if A.shape[0] == 0:
        return np.zeros(0)
    return _forward(_cost(A, B), cfg.gamma2, cfg.bandwidth)[:, -1, -1]


def alignment_expectation(a, b, cfg: SoftDtwConfig) -> np.ndarray:
    """Expected alignment matrix E (n x m): the gradient of soft-DTW w.r.t. the cost matrix."""
    if cfg.gamma2 <= 0:
        raise SoftDtwError("gradient requires gamma2 > 0")
    a, b = _as_seq(a), _as_seq(b)
    r = _cost(a, b)
    n, m = r.shape
    g = cfg.gamma2
    D = _forward(r[None], g, cfg.bandwidth)[0]
    # padded tables: R has -inf outside the grid so exp(...) vanishes there
    R = np.full((n + 2, m + 2), -np.inf)
    R[1:n + 1, 1:m + 1] = D[1:, 1:]
    R[R == np.inf] = -np.inf
    R[n + 1, m + 1] = D[n, m]
    C = np.zeros((n + 2, m + 2))
    C[1:n + 1, 1:m + 1] = r
    E = np.zeros((n + 2, m + 2))
    E[n + 1, m + 1] = 1.0
    for i in range(n, 0, -1):
        for j in range(m, 0, -1):
            if not np.isfinite(R[i, j]):
                continue
            e = 0.0
            for (p, q) in ((i + 1, j), (i, j + 1), (i + 1, j + 1)):
                if E[p, q] == 0.0 or not np.isfinite(R[p, q]):
                    continue
                e += E[p, q] * math.exp((R[p, q] - R[i, j] - C[p, q]) / g)
            E[i, j] = e
    return E[1:n + 1, 1:m + 1]


def softdtw_grad(a, b, cfg: SoftDtwConfig | None = None) -> np.ndarray:
    """Gradient of softdtw(a, b) with respect to ``a`` (same shape as ``a``)."""
    cfg = cfg or SoftDtwConfig()
    a_arr = np.asarray(a, dtype=np.float64)
    a2, b2 = _as_seq(a), _as_seq(b)
    if a2.shape[1] != b2.shape[1]:
        raise SoftDtwError(f"dimension mismatch: {a2.shape[1]} vs {b2.shape[1]}")
    E = alignment_expectation(a2, b2, cfg)
    grad = 2.0 * (E.sum(axis=1)[:, None] * a2 - E @ b2)
    return grad.reshape(a_arr.shape)


def pairwise_matrix(reps, cfg: SoftDtwConfig | None = None) -> np.ndarray:
    """Symmetric soft-DTW distance matrix; the diagonal is 0 by definition."""
    cfg = cfg or SoftDtwConfig()
    seqs = [_as_seq(r) for r in reps]
    n = len(seqs)
    D = np.zeros((n, n))
    if n < 2:
        return D
    dims = {s.shape[1] for s in seqs}
    if len(dims) != 1:
        raise SoftDtwError("all representations must share the embedding dimension")
    # group pairs by shape so each group runs as one batched DP
    groups: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for i, j in combinations(range(n), 2):
        groups.setdefault((len(seqs[i]), len(seqs[j])), []).append((i, j))
    for pairs in groups.values():
        A = np.stack([seqs[i] for i, _ in pairs])
        B = np.stack([seqs[j] for _, j in pairs])
        vals = softdtw_batch(A, B, cfg)
        for (i, j), v in zip(pairs, vals):
            D[i, j] = D[j, i] = v
    return D


def pairwise_divergence(seqs, cfg: SoftDtwConfig | None = None) -> np.ndarray:
    """sdtw(a, b) - (sdtw(a, a) + sdtw(b, b)) / 2 for every pair.

    Removes the length-dependent entropic offset of soft-DTW so that identical
    sequences sit at exactly 0 whatever their length.
    """
    cfg = cfg or SoftDtwConfig()
    seqs = [_as_seq(s) for s in seqs]
    D = pairwise_matrix(seqs, cfg)
    self_cost = np.array([softdtw(s, s, cfg) for s in seqs])
    div = D - 0.5 * (self_cost[:, None] + self_cost[None, :])
    np.fill_diagonal(div, 0.0)
    return div


def similarity(D, alpha: float = 1.0) -> SimilarityMatrix:
    """Min-max normalize off-diagonal distances, then map through exp(-alpha * d) + 1."""
    D = np.asarray(D, dtype=np.float64)
    if not np.isfinite(D).all():
        raise SoftDtwError("distance matrix has non-finite entries")
    if alpha < 0:
        raise SoftDtwError("alpha must be >= 0")
    n = D.shape[0]
    off = ~np.eye(n, dtype=bool)
    norm = np.zeros_like(D)
    if off.any():
        dmin, dmax = D[off].min(), D[off].max()
        if dmax > dmin:
            norm = np.where(off, (D - dmin) / (dmax - dmin), 0.0)
    sim = np.exp(-alpha * norm) + 1.0
    np.fill_diagonal(sim, 2.0)
    return SimilarityMatrix(raw=D, normalized=norm, similarity=sim, alpha=alpha)
