"""Contrast temporal self-attention (CTSA).

Each channel is cut into overlapping sliding-window tokens. Attention is
restricted to tokens of the same channel whose overlap stays below
``gamma1``, and the projections are trained with a cosine triplet loss
whose anchors come from each series' highest-variance channels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from ._torch import as_tensor, value_and_grad
from .dataio import MtsDataset
from .optim import ParamPack, train_loop

log = logging.getLogger(__name__)


class CtsaError(ValueError):
    pass


@dataclass(frozen=True)
class CtsaConfig:
    W: int = 8
    S: int = 4
    gamma1: float = 0.5
    d_k: int = 16
    N_a: int = 3
    K_neg: int = 2
    epochs: int = 40
    lr: float = 1e-2
    seed: int = 0
    n_principal: int | None = None


@dataclass
class TokenGrid:
    window_len: int
    stride: int
    starts: np.ndarray   # (n_tok,)
    values: np.ndarray   # (C, n_tok, W)

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    @property
    def tokens_per_channel(self) -> int:
        return self.values.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.n_channels * self.tokens_per_channel

    def flat_values(self) -> np.ndarray:
        """Tokens in channel-major order: flat index = channel * n_tok + t."""
        return self.values.reshape(-1, self.window_len)

    def flat_channels(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_channels), self.tokens_per_channel)

    def flat_starts(self) -> np.ndarray:
        return np.tile(self.starts, self.n_channels)

    def index(self, channel: int, t: int) -> int:
        return channel * self.tokens_per_channel + t


@dataclass
class CtsaParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray

    def __post_init__(self):
        if not (self.wq.shape == self.wk.shape == self.wv.shape):
            raise CtsaError("query/key/value weights must share a shape")

    @property
    def d_k(self) -> int:
        return self.wq.shape[0]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv}

    @classmethod
    def init(cls, W: int, d_k: int, rng: np.random.Generator) -> "CtsaParams":
        bound = 1.0 / np.sqrt(W)
        return cls(*(rng.uniform(-bound, bound, size=(d_k, W)) for _ in range(3)))


@dataclass
class MaskPair:
    m1: np.ndarray
    m2: np.ndarray
    gamma1: float

    @property
    def allowed(self) -> np.ndarray:
        return (self.m1 > 0) & (self.m2 > 0)


@dataclass
class PcaResult:
    mean: np.ndarray
    covariance: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    channel_scores: np.ndarray
    principal_dims: list[int]


@dataclass
class Triplet:
    """Flat token indices into a :class:`TokenGrid`."""

    channel: int
    anchor: list[int]
    positive: list[int]
    negatives: list[list[int]]
    negative_channels: list[int] = field(default_factory=list)
    series_id: int = 0


@dataclass
class Representation:
    series_id: int
    embedding_seq: np.ndarray  # (n_tok, d_k)


def tokenize(series, W: int, S: int) -> TokenGrid:
    x = np.asarray(series, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    L = x.shape[1]
    if S < 1:
        raise CtsaError("stride must be >= 1")
    if not 1 <= W <= L:
        raise CtsaError(f"window length {W} must lie in [1, L={L}]")
    starts = np.arange(0, L - W + 1, S)
    idx = starts[:, None] + np.arange(W)[None, :]
    return TokenGrid(W, S, starts, x[:, idx])


def build_masks(grid: TokenGrid, gamma1: float) -> MaskPair:
    if not 0 <= gamma1 <= 1:
        raise CtsaError("gamma1 must lie in [0, 1]")
    ch = grid.flat_channels()
    st = grid.flat_starts()
    W = grid.window_len
    m1 = (ch[:, None] == ch[None, :]).astype(np.int8)
    shared = np.clip(W - np.abs(st[:, None] - st[None, :]), 0, None)
    m2 = (shared / W < gamma1).astype(np.int8)
    return MaskPair(m1, m2, gamma1)


def _attend(X: torch.Tensor, wq, wk, wv, allowed: torch.Tensor):
    """Masked scaled dot-product attention over token rows of ``X`` (..., T, W)."""
    q, k, v = X @ wq.T, X @ wk.T, X @ wv.T
    scores = q @ k.transpose(-1, -2) / np.sqrt(wq.shape[0])
    scores = scores.masked_fill(~allowed, float("-inf"))
    has_any = allowed.any(dim=-1, keepdim=True)
    # fully masked rows: softmax over zeros, then zeroed out below
    scores = torch.where(has_any, scores, torch.zeros_like(scores))
    weights = torch.softmax(scores, dim=-1) * has_any
    return weights @ v, weights


def _params_t(params: CtsaParams):
    return as_tensor(params.wq), as_tensor(params.wk), as_tensor(params.wv)


def attention_forward(grid: TokenGrid, params: CtsaParams, masks: MaskPair) -> np.ndarray:
    out, _ = attention_with_weights(grid, params, masks)
    return out


def attention_with_weights(grid: TokenGrid, params: CtsaParams, masks: MaskPair):
    allowed = torch.as_tensor(masks.allowed)
    if allowed.shape != (grid.n_tokens, grid.n_tokens):
        raise CtsaError("mask size does not match token grid")
    with torch.no_grad():
        out, w = _attend(as_tensor(grid.flat_values()), *_params_t(params), allowed)
    return out.numpy(), w.numpy()


def principal_dimensions(series, m: int) -> PcaResult:
    x = np.asarray(series, dtype=np.float64)
    C, L = x.shape
    if not 1 <= m <= C:
        raise CtsaError(f"m={m} must lie in [1, C={C}]")
    if L < 2:
        raise CtsaError("need at least 2 time points")
    obs = x.T
    mean = obs.mean(axis=0)
    centered = obs - mean
    cov = centered.T @ centered / (L - 1)
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scores = (evecs ** 2) @ evals
    ranking = sorted(range(C), key=lambda c: (-scores[c], c))
    return PcaResult(mean, cov, evals, evecs, scores, ranking[:m])


def default_principal_count(C: int) -> int:
    return max(1, C // 3)


def sample_triplets(
    grid: TokenGrid,
    pca: PcaResult,
    N_a: int,
    K: int,
    rng: np.random.Generator,
    count: int = 1,
    series_id: int = 0,
) -> list[Triplet]:
    n_tok = grid.tokens_per_channel
    W, S = grid.window_len, grid.stride
    if N_a < 1 or N_a > n_tok:
        raise CtsaError(f"N_a={N_a} must lie in [1, tokens_per_channel={n_tok}]")
    principal = list(pca.principal_dims)
    others = [c for c in range(grid.n_channels) if c not in principal]
    if K > 0 and not others:
        raise CtsaError("no non-principal channel available for negative sampling")
    # positive offsets o (in tokens) must keep both spans overlapping: o*S < (N_a-1)*S + W
    max_overlap = ((N_a - 1) * S + W - 1) // S
    max_anchor = n_tok - N_a - 1
    if max_anchor < 0 or max_overlap < 1:
        raise CtsaError("series too short for an overlapping positive sample")
    out = []
    for _ in range(count):
        ch = int(principal[rng.integers(len(principal))])
        t = int(rng.integers(0, max_anchor + 1))
        hi = min(max_overlap, n_tok - N_a - t)
        o = int(rng.integers(1, hi + 1))
        anchor = [grid.index(ch, t + i) for i in range(N_a)]
        positive = [grid.index(ch, t + o + i) for i in range(N_a)]
        negatives, neg_ch = [], []
        for _ in range(K):
            nc = int(others[rng.integers(len(others))])
            t2 = int(rng.integers(0, n_tok - N_a + 1))
            negatives.append([grid.index(nc, t2 + i) for i in range(N_a)])
            neg_ch.append(nc)
        out.append(Triplet(ch, anchor, positive, negatives, neg_ch, series_id))
    return out


def _cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    ok = (na >= 1e-12) & (nb >= 1e-12)
    if not bool(ok.all()):
        log.warning("degenerate CTSA embedding (norm < 1e-12); cosine treated as 0")
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    return torch.where(ok, (a * b).sum(-1) / denom, torch.zeros_like(na))


def _triplet_terms(out: torch.Tensor, triplets: list[Triplet]) -> torch.Tensor:
    """Per-triplet contrast loss; ``out`` is (n_series, T, d_k) or (T, d_k)."""
    if out.dim() == 2:
        out = out[None]
    losses = []
    for tr in triplets:
        o = out[tr.series_id]
        f_ref = o[tr.anchor].mean(0)
        f_pos = o[tr.positive].mean(0)
        loss = -torch.nn.functional.logsigmoid(_cosine(f_ref, f_pos))
        for neg in tr.negatives:
            loss = loss - torch.nn.functional.logsigmoid(-_cosine(f_ref, o[neg].mean(0)))
        losses.append(loss)
    return torch.stack(losses)


def contrast_loss(params: CtsaParams, triplet: Triplet, grid: TokenGrid, masks: MaskPair):
    """Triplet loss for one triplet and its gradient as a dict keyed like ``params``."""
    pack = ParamPack.of(params.as_dict())
    X = as_tensor(grid.flat_values())
    allowed = torch.as_tensor(masks.allowed)
    tr = Triplet(triplet.channel, triplet.anchor, triplet.positive, triplet.negatives,
                 triplet.negative_channels, 0)

    def fn(vec):
        p = pack.unflatten(vec)
        out, _ = _attend(X, p["wq"], p["wk"], p["wv"], allowed)
        return _triplet_terms(out, [tr])[0]

    loss, g = value_and_grad(fn)(pack.flatten(params.as_dict()))
    return loss, pack.unflatten(g)


def train_ctsa(ds: MtsDataset, cfg: CtsaConfig, pca_values: np.ndarray | None = None):
    """Adam-train the projections; triplets are resampled every epoch.

    ``pca_values`` (n x C x L) chooses which tensor ranks channels; the pipeline
    passes the un-normalized values, since per-channel z-scoring equalizes
    every channel variance. Returns ``(params, loss_trace)``.
    """
    rng = np.random.default_rng(cfg.seed)
    params = CtsaParams.init(cfg.W, cfg.d_k, rng)
    if cfg.epochs == 0:
        return params, []
    src = ds.values if pca_values is None else np.asarray(pca_values)
    m = cfg.n_principal or default_principal_count(ds.meta.n_channels)
    pcas = [principal_dimensions(x, m) for x in src]
    grids = [tokenize(x, cfg.W, cfg.S) for x in ds.values]
    X = as_tensor(np.stack([g.flat_values() for g in grids]))
    allowed = torch.as_tensor(build_masks(grids[0], cfg.gamma1).allowed)
    pack = ParamPack.of(params.as_dict())

    def loss_and_grad(vec, epoch):
        triplets = []
        for i, (g, pca) in enumerate(zip(grids, pcas)):
            triplets += sample_triplets(g, pca, cfg.N_a, cfg.K_neg, rng, series_id=i)

        def fn(v):
            p = pack.unflatten(v)
            out, _ = _attend(X, p["wq"], p["wk"], p["wv"], allowed)
            return _triplet_terms(out, triplets).mean()

        return value_and_grad(fn)(vec)

    vec, trace = train_loop(loss_and_grad, pack.flatten(params.as_dict()), cfg.epochs, cfg.lr)
    p = pack.unflatten(vec)
    return CtsaParams(p["wq"].copy(), p["wk"].copy(), p["wv"].copy()), trace


def encode(ds: MtsDataset, params: CtsaParams, cfg: CtsaConfig) -> list[Representation]:
    """Per-series token-position embeddings, averaged over channels."""
    if ds.n == 0:
        return []
    grids = [tokenize(x, cfg.W, cfg.S) for x in ds.values]
    X = as_tensor(np.stack([g.flat_values() for g in grids]))
    allowed = torch.as_tensor(build_masks(grids[0], cfg.gamma1).allowed)
    with torch.no_grad():
        out, _ = _attend(X, *_params_t(params), allowed)
    C, n_tok = grids[0].n_channels, grids[0].tokens_per_channel
    seq = out.numpy().reshape(ds.n, C, n_tok, -1).mean(axis=1)
    return [Representation(i, seq[i].copy()) for i in range(ds.n)]
