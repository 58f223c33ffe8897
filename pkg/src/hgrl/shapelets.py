"""Multi-scale shapelets learned with a sample/subject multi-task loss.

Also covers redundancy pruning by soft-DTW and positioning of shapelets on
series by sliding dot products.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from ._torch import value_and_grad
from .dataio import MtsDataset
from .optim import ParamPack, train_loop
from .softdtw import SoftDtwConfig, pairwise_divergence


class ShapeletError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeletConfig:
    scales: tuple[float, ...] = (0.1, 0.2, 0.3)
    K: int = 64
    delta1: float = -5.0
    lam: float = 0.5
    tau_sim: float = 0.1
    epsilon_percentile: float = 90.0
    epochs: int = 100
    lr: float = 1e-2
    seed: int = 0


@dataclass(frozen=True)
class Shapelet:
    scale: int
    length: int
    values: np.ndarray
    id: int


@dataclass
class ShapeletBank:
    """Shapelets grouped by scale, plus the two linear heads (row 0 is the bias)."""

    lengths: list[int]
    values: list[np.ndarray]
    ids: list[np.ndarray]
    sample_head: np.ndarray
    subject_head: np.ndarray
    delta1: float = -5.0
    lam: float = 0.5
    loss_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        rows = self.n_shapelets + 1
        if self.sample_head.shape[0] != rows or self.subject_head.shape[0] != rows:
            raise ShapeletError("head row count must equal number of shapelets + 1")

    @property
    def n_shapelets(self) -> int:
        return sum(len(v) for v in self.values)

    def flat_ids(self) -> np.ndarray:
        return np.concatenate(self.ids) if self.ids else np.zeros(0, dtype=np.int64)

    def scale_index(self) -> np.ndarray:
        return np.concatenate([np.full(len(v), j) for j, v in enumerate(self.values)])

    def shapelets(self) -> list[Shapelet]:
        out = []
        for j, (vals, ids) in enumerate(zip(self.values, self.ids)):
            for row, sid in zip(vals, ids):
                out.append(Shapelet(j, self.lengths[j], row, int(sid)))
        return out

    def param_dict(self) -> dict[str, np.ndarray]:
        d = {f"scale{j}": v for j, v in enumerate(self.values)}
        d["sample_head"] = self.sample_head
        d["subject_head"] = self.subject_head
        return d

    def with_params(self, p: dict) -> "ShapeletBank":
        return replace(
            self,
            values=[np.array(p[f"scale{j}"]) for j in range(len(self.values))],
            sample_head=np.array(p["sample_head"]),
            subject_head=np.array(p["subject_head"]),
        )


@dataclass
class PositioningResult:
    matches: list[tuple[int, int, int, int, float]]  # (shapelet_id, series_id, channel, position, response)
    epsilon: float
    shapelet_subject_edges: set[tuple[int, int]]
    max_response: np.ndarray  # (n_shapelets, n_series), bank order


def scale_lengths(fractions, L: int) -> list[int]:
    out: list[int] = []
    for f in fractions:
        n = max(2, int(round(f * L)))
        if n not in out:
            out.append(n)
    return out


def init_bank(ds: MtsDataset, lengths, K: int, rng: np.random.Generator,
              delta1: float = -5.0, lam: float = 0.5) -> ShapeletBank:
    L = ds.meta.length
    values, ids = [], []
    next_id = 0
    for ell in lengths:
        if ell >= L:
            raise ShapeletError(f"shapelet length {ell} must be shorter than L={L}")
        rows = np.empty((K, ell))
        for k in range(K):
            i = rng.integers(ds.n)
            c = rng.integers(ds.meta.n_channels)
            p = rng.integers(L - ell + 1)
            rows[k] = ds.values[i, c, p:p + ell]
        values.append(rows)
        ids.append(np.arange(next_id, next_id + K))
        next_id += K
    rows = K * len(lengths) + 1
    return ShapeletBank(
        list(lengths), values, ids,
        np.zeros((rows, ds.meta.n_classes)), np.zeros((rows, ds.meta.n_subjects)),
        delta1, lam,
    )


def sub_distance(sh, series, channel: int, phi: int) -> float:
    s = np.asarray(getattr(sh, "values", sh), dtype=np.float64)
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if phi < 0 or phi + len(s) > x.shape[1]:
        raise ShapeletError(f"position {phi} out of range for length {len(s)}")
    return float(np.sqrt(((s - x[channel, phi:phi + len(s)]) ** 2).sum()))


def _soft_minimum(d: np.ndarray, delta1: float) -> float:
    z = delta1 * d
    w = np.exp(z - z.max())
    return float((d * w).sum() / w.sum())


def series_distance(sh, series, channel: int | None = None, delta1: float = -5.0) -> float:
    """Exponentially weighted average of the per-position distances.

    With ``channel=None`` the result is the minimum over channels.
    """
    s = np.asarray(getattr(sh, "values", sh), dtype=np.float64)
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    channels = range(x.shape[0]) if channel is None else [channel]
    n_pos = x.shape[1] - len(s) + 1
    if n_pos < 1:
        raise ShapeletError("shapelet longer than series")
    best = np.inf
    for c in channels:
        d = np.array([sub_distance(s, x, c, p) for p in range(n_pos)])
        best = min(best, _soft_minimum(d, delta1))
    return best


def predict(distances, head) -> np.ndarray:
    d = np.asarray(distances, dtype=np.float64)
    head = np.asarray(head, dtype=np.float64)
    if d.shape[-1] != head.shape[0] - 1:
        raise ShapeletError("distance length must equal head rows - 1")
    logits = head[0] + d @ head[1:]
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def _distance_matrix(X: torch.Tensor, groups, delta1: float) -> torch.Tensor:
    """Soft-minimum distances (n_series x n_shapelets) for tensors grouped by length."""
    cols = []
    for S in groups:
        ell = S.shape[1]
        win = X.unfold(-1, ell, 1)                       # n, C, P, ell
        cross = torch.einsum("ncpl,kl->nkcp", win, S)
        sq = (win * win).sum(-1)[:, None] - 2 * cross + (S * S).sum(-1)[None, :, None, None]
        d = torch.sqrt(sq.clamp_min(1e-24))
        w = torch.softmax(delta1 * d, dim=-1)
        cols.append((w * d).sum(-1).min(dim=-1).values)  # min over channels
    return torch.cat(cols, dim=1)


def _xent(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return torch.nn.functional.cross_entropy(logits, targets)


def _multitask(X, labels, subjects, labeled, n_scales, delta1, lam):
    labeled_idx = torch.as_tensor(np.flatnonzero(labeled))

    def fn(p: dict) -> torch.Tensor:
        D = _distance_matrix(X, [p[f"scale{j}"] for j in range(n_scales)], delta1)
        hs, hu = p["sample_head"], p["subject_head"]
        l_sam = _xent(hs[0] + D[labeled_idx] @ hs[1:], labels[labeled_idx])
        l_sub = _xent(hu[0] + D @ hu[1:], subjects)
        return lam * l_sam + (1 - lam) * l_sub

    return fn


def _objective(ds: MtsDataset, bank: ShapeletBank):
    if not ds.labeled_mask.any():
        raise ShapeletError("multi-task loss needs at least one labeled series")
    pack = ParamPack.of(bank.param_dict())
    fn = _multitask(
        torch.as_tensor(ds.values), torch.as_tensor(ds.labels), torch.as_tensor(ds.subject_ids),
        ds.labeled_mask, len(bank.values), bank.delta1, bank.lam,
    )
    return pack, (lambda vec: fn(pack.unflatten(vec)))


def multitask_loss(ds: MtsDataset, bank: ShapeletBank):
    """Total loss and gradients keyed like :meth:`ShapeletBank.param_dict`."""
    pack, fn = _objective(ds, bank)
    loss, g = value_and_grad(fn)(pack.flatten(bank.param_dict()))
    return loss, pack.unflatten(g)


def shapelet_distances(ds: MtsDataset, bank: ShapeletBank) -> np.ndarray:
    with torch.no_grad():
        D = _distance_matrix(torch.as_tensor(ds.values),
                             [torch.as_tensor(v) for v in bank.values], bank.delta1)
    return D.numpy()


def train_shapelets(ds: MtsDataset, cfg: ShapeletConfig) -> ShapeletBank:
    rng = np.random.default_rng(cfg.seed)
    lengths = scale_lengths(cfg.scales, ds.meta.length)
    bank = init_bank(ds, lengths, cfg.K, rng, cfg.delta1, cfg.lam)
    if cfg.epochs == 0:
        return bank
    pack, fn = _objective(ds, bank)
    step = value_and_grad(fn)
    vec, trace = train_loop(lambda v, _e: step(v), pack.flatten(bank.param_dict()), cfg.epochs, cfg.lr)
    out = bank.with_params(pack.unflatten(vec))
    out.loss_trace = trace
    return out


def prune(bank: ShapeletBank, tau_sim: float, gamma2: float = 1.0) -> ShapeletBank:
    """Drop the less important member of every shapelet pair closer than ``tau_sim``.

    Closeness is the soft-DTW divergence; importance is the L2 norm of the
    shapelet's sample-head weights (ties keep the lower id). Shapelets are
    visited by decreasing importance and kept unless near an already kept one.
    """
    if tau_sim < 0:
        raise ShapeletError("tau_sim must be >= 0")
    shps = bank.shapelets()
    if len(shps) < 2 or tau_sim == 0:
        return bank
    div = pairwise_divergence([s.values for s in shps], SoftDtwConfig(gamma2))
    importance = np.linalg.norm(bank.sample_head[1:], axis=1)
    order = sorted(range(len(shps)), key=lambda i: (-importance[i], shps[i].id))
    kept: list[int] = []
    for i in order:
        if all(div[i, j] >= tau_sim for j in kept):
            kept.append(i)
    keep = np.zeros(len(shps), dtype=bool)
    keep[kept] = True
    return _select(bank, keep)


def _select(bank: ShapeletBank, keep: np.ndarray) -> ShapeletBank:
    values, ids, pos = [], [], 0
    for v, i in zip(bank.values, bank.ids):
        k = keep[pos:pos + len(v)]
        values.append(v[k])
        ids.append(i[k])
        pos += len(v)
    rows = np.concatenate([[True], keep])
    return replace(bank, values=values, ids=ids,
                   sample_head=bank.sample_head[rows], subject_head=bank.subject_head[rows])


def sliding_response(values: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Sliding dot product along the last axis, accumulated in shapelet order."""
    ell = len(s)
    n_pos = values.shape[-1] - ell + 1
    acc = np.zeros(values.shape[:-1] + (n_pos,))
    for j in range(ell):
        acc = acc + values[..., j:j + n_pos] * s[j]
    return acc


def position(bank: ShapeletBank, ds: MtsDataset, epsilon: float | None = None,
             percentile: float = 90.0) -> PositioningResult:
    """Match shapelets to series where the best sliding response exceeds ``epsilon``.

    ``epsilon=None`` uses the given percentile of all (shapelet, series) maxima.
    """
    shps = bank.shapelets()
    n = ds.n
    best = np.full((len(shps), n), -np.inf)
    where = np.zeros((len(shps), n, 2), dtype=np.int64)
    for k, sh in enumerate(shps):
        resp = sliding_response(ds.values, sh.values)          # n, C, P
        flat = resp.reshape(n, -1)
        arg = flat.argmax(axis=1)
        best[k] = flat[np.arange(n), arg]
        where[k, :, 0], where[k, :, 1] = np.divmod(arg, resp.shape[-1])
    if epsilon is None:
        epsilon = float(np.percentile(best, percentile)) if best.size else 0.0
    matches, edges = [], set()
    for k, sh in enumerate(shps):
        for i in np.flatnonzero(best[k] > epsilon):
            c, p = where[k, i]
            matches.append((sh.id, int(i), int(c), int(p), float(best[k, i])))
            edges.add((sh.id, int(ds.subject_ids[i])))
    return PositioningResult(matches, float(epsilon), edges, best)
