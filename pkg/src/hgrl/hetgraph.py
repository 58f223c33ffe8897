"""Heterogeneous graph over series, subject and shapelet nodes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ctsa import Representation
from .dataio import MtsDataset
from .shapelets import PositioningResult, ShapeletBank
from .softdtw import SimilarityMatrix, SoftDtwConfig, pairwise_divergence, similarity

NODE_TYPES = ("mts", "subject", "shapelet")


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class NodeLayout:
    n_mts: int
    n_sub: int
    n_shp: int

    @property
    def total(self) -> int:
        return self.n_mts + self.n_sub + self.n_shp

    @property
    def ranges(self) -> dict[str, tuple[int, int]]:
        a, b = self.n_mts, self.n_mts + self.n_sub
        return {"mts": (0, a), "subject": (a, b), "shapelet": (b, self.total)}

    def slice(self, kind: str) -> slice:
        lo, hi = self.ranges[kind]
        return slice(lo, hi)

    def node_types(self) -> np.ndarray:
        return np.repeat(np.arange(3), [self.n_mts, self.n_sub, self.n_shp])

    def to_dict(self) -> dict:
        return {"n_mts": self.n_mts, "n_sub": self.n_sub, "n_shp": self.n_shp,
                "ranges": {k: list(v) for k, v in self.ranges.items()}}


@dataclass
class HeteroGraph:
    adjacency: np.ndarray
    layout: NodeLayout
    features: dict[str, np.ndarray]
    normalized: np.ndarray | None = None


@dataclass
class GraphReport:
    checks: dict[str, bool] = field(default_factory=dict)
    messages: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())


def subject_features(ds: MtsDataset) -> np.ndarray:
    return np.eye(ds.meta.n_subjects)


def mts_node_features(reps: list[Representation]) -> np.ndarray:
    if not reps:
        return np.zeros((0, 0))
    dims = {r.embedding_seq.shape[1] for r in reps}
    if len(dims) != 1:
        raise GraphError("representations differ in embedding dimension")
    return np.stack([r.embedding_seq.mean(axis=0) for r in reps])


def shapelet_node_features(bank: ShapeletBank) -> np.ndarray:
    """Values zero-padded to the longest scale, followed by a scale one-hot."""
    width = max(bank.lengths) if bank.lengths else 0
    n_scales = len(bank.lengths)
    rows = []
    for sh in bank.shapelets():
        row = np.zeros(width + n_scales)
        row[:sh.length] = sh.values
        row[width + sh.scale] = 1.0
        rows.append(row)
    return np.array(rows).reshape(len(rows), width + n_scales)


def topk_sparsify(W: np.ndarray, k: int | None) -> np.ndarray:
    """Keep each row's k largest off-diagonal weights, then symmetrize by max."""
    W = np.array(W, dtype=np.float64)
    np.fill_diagonal(W, 0.0)
    n = W.shape[0]
    if not k or k >= n - 1:
        return W
    keep = np.zeros_like(W, dtype=bool)
    for i in range(n):
        cand = np.delete(np.arange(n), i)
        # stable ordering: larger weight first, then lower index
        order = cand[np.lexsort((cand, -W[i, cand]))]
        keep[i, order[:k]] = True
    S = np.where(keep, W, 0.0)
    return np.maximum(S, S.T)


def assemble(
    sim: SimilarityMatrix,
    ds: MtsDataset,
    bank: ShapeletBank,
    pos: PositioningResult,
    reps: list[Representation] | None = None,
    topk: int | None = 5,
    gamma2: float = 1.0,
    alpha: float = 1.0,
) -> HeteroGraph:
    """Six-block adjacency: series/series, series/subject, series/shapelet,
    subject/subject (identity), subject/shapelet, shapelet/shapelet."""
    n, n_sub, n_shp = ds.n, ds.meta.n_subjects, bank.n_shapelets
    if sim.similarity.shape != (n, n):
        raise GraphError(f"similarity is {sim.similarity.shape}, expected ({n}, {n})")
    lay = NodeLayout(n, n_sub, n_shp)
    T, U, P = lay.slice("mts"), lay.slice("subject"), lay.slice("shapelet")
    A = np.zeros((lay.total, lay.total))

    A[T, T] = topk_sparsify(sim.similarity, topk) + np.eye(n)

    m_ts = np.zeros((n, n_sub))
    m_ts[np.arange(n), ds.subject_ids] = 1.0
    A[T, U] = m_ts

    col = {int(sid): j for j, sid in enumerate(bank.flat_ids())}
    m_tp = np.zeros((n, n_shp))
    for sid, i, *_ in pos.matches:
        m_tp[i, col[sid]] = 1.0
    A[T, P] = m_tp

    A[U, U] = np.eye(n_sub)

    m_up = np.zeros((n_sub, n_shp))
    for sid, u in pos.shapelet_subject_edges:
        m_up[u, col[sid]] = 1.0
    A[U, P] = m_up

    if n_shp:
        div = pairwise_divergence([s.values for s in bank.shapelets()], SoftDtwConfig(gamma2))
        A[P, P] = topk_sparsify(similarity(div, alpha).similarity, topk) + np.eye(n_shp)

    # mirror blocks as exact transposes
    A[U, T] = A[T, U].T
    A[P, T] = A[T, P].T
    A[P, U] = A[U, P].T

    features = {
        "mts": mts_node_features(reps) if reps is not None else np.zeros((n, 0)),
        "subject": subject_features(ds),
        "shapelet": shapelet_node_features(bank),
    }
    return HeteroGraph(A, lay, features)


def normalize(g: HeteroGraph) -> HeteroGraph:
    """Symmetric degree normalization D^-1/2 A D^-1/2."""
    deg = g.adjacency.sum(axis=1)
    if (deg <= 0).any():
        raise GraphError(f"zero-degree node(s): {np.flatnonzero(deg <= 0).tolist()}")
    inv = 1.0 / np.sqrt(deg)
    g.normalized = inv[:, None] * g.adjacency * inv[None, :]
    return g


def validate(g: HeteroGraph) -> GraphReport:
    rep = GraphReport()
    A, lay = g.adjacency, g.layout
    rep.checks["shape"] = A.shape == (lay.total, lay.total)
    if not rep.checks["shape"]:
        rep.messages.append(f"adjacency {A.shape} vs layout total {lay.total}")
        return rep
    rep.checks["symmetric"] = bool(np.array_equal(A, A.T))
    rep.checks["nonnegative"] = bool((A >= 0).all())
    rep.checks["positive_degree"] = bool((A.sum(axis=1) > 0).all())
    U = lay.slice("subject")
    rep.checks["subject_identity"] = bool(np.array_equal(A[U, U], np.eye(lay.n_sub)))
    expected = {"mts": lay.n_mts, "subject": lay.n_sub, "shapelet": lay.n_shp}
    rep.checks["feature_rows"] = all(
        g.features.get(k, np.zeros((0, 0))).shape[0] == v for k, v in expected.items()
    )
    for name, ok in rep.checks.items():
        if not ok:
            rep.messages.append(f"check failed: {name}")
    return rep
