"""Dual-level (type + node) graph attention for semi-supervised node classification.

Layer ``k`` projects every node with the matrix of its own type, scores each
neighbor type per node (type-level), scores each neighbor (node-level, scaled
by the neighbor's type weight) and aggregates the projected neighbors with the
node-level weights. Variants swap parts out for the ablation study:

* ``node_only`` - type weights fixed to uniform over the types present
* ``type_only`` - neighbor weights are the row-normalized graph weights,
  multiplied by the type weight of the neighbor
* ``gcn``       - plain normalized-adjacency propagation, no attention
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ._torch import value_and_grad
from .hetgraph import NODE_TYPES, HeteroGraph, NodeLayout, normalize
from .optim import ParamPack, PlateauState, train_loop

VARIANTS = ("full", "node_only", "type_only", "gcn")


class GatError(ValueError):
    pass


@dataclass(frozen=True)
class GatConfig:
    layers: int = 2
    hidden: int = 64
    variant: str = "full"
    epochs: int = 300
    lr: float = 1e-3
    seed: int = 0
    patience: int = 10
    factor: float = 0.5
    min_lr: float = 1e-6

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1:
            raise GatError("layers and hidden must be >= 1")
        if self.variant not in VARIANTS:
            raise GatError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")


@dataclass
class GatParams:
    tensors: dict[str, np.ndarray]
    config: GatConfig
    loss_trace: list[float] = field(default_factory=list)

    @property
    def pack(self) -> ParamPack:
        return ParamPack.of(self.tensors)

    def to_json(self) -> str:
        return json.dumps({
            "config": asdict(self.config),
            "tensors": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                        for k, v in self.tensors.items()},
            "loss_trace": self.loss_trace,
        })

    @classmethod
    def from_json(cls, text: str) -> "GatParams":
        try:
            raw = json.loads(text)
            cfg = GatConfig(**raw["config"])
            tensors = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                       for k, v in raw["tensors"].items()}
        except (ValueError, KeyError, TypeError) as exc:
            raise GatError(f"corrupted checkpoint: {exc}") from exc
        return cls(tensors, cfg, list(raw.get("loss_trace", [])))


def init_params(graph: HeteroGraph, n_classes: int, cfg: GatConfig) -> GatParams:
    rng = np.random.default_rng(cfg.seed)
    q = cfg.hidden

    def glorot(fan_in, fan_out, shape):
        bound = math.sqrt(6.0 / max(fan_in + fan_out, 1))
        return rng.uniform(-bound, bound, size=shape)

    t: dict[str, np.ndarray] = {}
    for k in range(cfg.layers):
        for kind in NODE_TYPES:
            d_in = graph.features[kind].shape[1] if k == 0 else q
            t[f"M{k}_{kind}"] = glorot(d_in, q, (d_in, q))
        if cfg.variant != "gcn":
            for kind in NODE_TYPES:
                t[f"xi{k}_{kind}"] = glorot(2 * q, 1, (2 * q,))
            t[f"eta{k}"] = glorot(2 * q, 1, (2 * q,))
    t["W"] = glorot(q, n_classes, (q, n_classes))
    return GatParams(t, cfg)


@dataclass
class _GraphT:
    norm: torch.Tensor       # N x N normalized weights
    edge: torch.Tensor       # N x N bool
    col_type: torch.Tensor   # N
    type_cols: list[torch.Tensor]
    features: list[torch.Tensor]
    layout: NodeLayout


def _graph_tensors(graph: HeteroGraph) -> _GraphT:
    if graph.normalized is None:
        normalize(graph)
    types = graph.layout.node_types()
    return _GraphT(
        norm=torch.as_tensor(graph.normalized),
        edge=torch.as_tensor(graph.adjacency > 0),
        col_type=torch.as_tensor(types),
        type_cols=[torch.as_tensor(types == j) for j in range(3)],
        features=[torch.as_tensor(np.asarray(graph.features[k], dtype=np.float64)) for k in NODE_TYPES],
        layout=graph.layout,
    )


def _masked_softmax(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    scores = scores.masked_fill(~mask, float("-inf"))
    has_any = mask.any(dim=-1, keepdim=True)
    scores = torch.where(has_any, scores, torch.zeros_like(scores))
    return torch.softmax(scores, dim=-1) * has_any


def _layer(p: dict, k: int, G: list[torch.Tensor], gt: _GraphT, variant: str, record: dict | None):
    H = torch.cat([G[j] @ p[f"M{k}_{kind}"] for j, kind in enumerate(NODE_TYPES)], dim=0)
    if variant == "gcn":
        return gt.norm @ H
    q = H.shape[1]
    present = torch.stack([(gt.edge & tc[None, :]).any(dim=1) for tc in gt.type_cols], dim=1)
    if variant == "node_only":
        alpha = _masked_softmax(torch.zeros(present.shape, dtype=H.dtype), present)
    else:
        scores = []
        for j, kind in enumerate(NODE_TYPES):
            xi = p[f"xi{k}_{kind}"]
            S = (gt.norm * gt.type_cols[j][None, :]) @ H
            scores.append(torch.tanh(H @ xi[:q] + S @ xi[q:]))
        alpha = _masked_softmax(torch.stack(scores, dim=1), present)
    alpha_col = alpha[:, gt.col_type]                      # alpha of each neighbor's type, per node
    if variant == "type_only":
        w = gt.norm * gt.edge
        beta = w / w.sum(dim=1, keepdim=True)
        out = (alpha_col * beta) @ H
    else:
        eta = p[f"eta{k}"]
        b = torch.tanh(alpha_col * ((H @ eta[:q])[:, None] + (H @ eta[q:])[None, :]))
        beta = _masked_softmax(b, gt.edge)
        out = beta @ H
    if record is not None:
        record["alpha"], record["beta"], record["present"] = alpha, beta, present
    return out


def _forward(p: dict, gt: _GraphT, cfg: GatConfig, record: dict | None = None) -> torch.Tensor:
    G = gt.features
    sizes = [gt.layout.n_mts, gt.layout.n_sub, gt.layout.n_shp]
    for k in range(cfg.layers):
        last = k == cfg.layers - 1
        out = _layer(p, k, G, gt, cfg.variant, record if last else None)
        if not last:
            out = torch.relu(out)
        G = list(torch.split(out, sizes, dim=0))
    return torch.cat(G, dim=0) @ p["W"]


def _tensor_params(params: GatParams) -> dict:
    return {k: torch.as_tensor(v) for k, v in params.tensors.items()}


def embeddings_and_probs(graph: HeteroGraph, params: GatParams) -> np.ndarray:
    with torch.no_grad():
        logits = _forward(_tensor_params(params), _graph_tensors(graph), params.config)
    return torch.softmax(logits, dim=1).numpy()


def classify(G_final, W) -> np.ndarray:
    logits = np.asarray(G_final, dtype=np.float64) @ np.asarray(W, dtype=np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def masked_nll(Y_hat, labels, labeled_mask, layout: NodeLayout) -> float:
    """Mean negative log-likelihood over labeled series nodes only."""
    Y = np.asarray(Y_hat)
    mask = np.asarray(labeled_mask, dtype=bool)
    if mask.shape != (layout.n_mts,):
        raise GatError("mask must address the series nodes only")
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise GatError("empty label mask")
    return float(-np.mean(np.log(Y[idx, np.asarray(labels)[idx]])))


def _loss_fn(graph: HeteroGraph, labels, mask, params: GatParams):
    gt = _graph_tensors(graph)
    idx = np.flatnonzero(np.asarray(mask, dtype=bool))
    if idx.size == 0:
        raise GatError("empty label mask")
    if len(mask) != graph.layout.n_mts:
        raise GatError("mask must address the series nodes only")
    idx_t = torch.as_tensor(idx)
    y = torch.as_tensor(np.asarray(labels)[idx])
    pack = params.pack

    def fn(vec):
        logits = _forward(pack.unflatten(vec), gt, params.config)
        return torch.nn.functional.cross_entropy(logits[idx_t], y)

    return pack, fn


def loss_and_grad(graph: HeteroGraph, labels, mask, params: GatParams):
    """Masked NLL and its gradient with respect to the flattened parameters."""
    pack, fn = _loss_fn(graph, labels, mask, params)
    return value_and_grad(fn)(pack.flatten(params.tensors))


def train_gat(graph: HeteroGraph, labels, mask, cfg: GatConfig, n_classes: int | None = None) -> GatParams:
    n_classes = n_classes or int(np.max(labels)) + 1
    params = init_params(graph, n_classes, cfg)
    if cfg.epochs == 0:
        return params
    pack, fn = _loss_fn(graph, labels, mask, params)
    step = value_and_grad(fn)
    sched = PlateauState(current_lr=cfg.lr, patience=cfg.patience, factor=cfg.factor, min_lr=cfg.min_lr)
    vec, trace = train_loop(lambda v, _e: step(v), pack.flatten(params.tensors), cfg.epochs, cfg.lr, sched)
    out = {k: np.array(v) for k, v in pack.unflatten(vec).items()}
    return GatParams(out, cfg, trace)


def predict(graph: HeteroGraph, params: GatParams) -> np.ndarray:
    """Class index per series node; ties go to the lower class index."""
    Y = embeddings_and_probs(graph, params)
    return np.argmax(Y[graph.layout.slice("mts")], axis=1)


def final_attention(graph: HeteroGraph, params: GatParams) -> dict[str, np.ndarray]:
    """Type weights (N x 3, NaN where a type is absent) and neighbor weights of the last layer."""
    if params.config.variant == "gcn":
        raise GatError("the gcn variant has no attention")
    rec: dict = {}
    with torch.no_grad():
        _forward(_tensor_params(params), _graph_tensors(graph), params.config, rec)
    alpha = rec["alpha"].numpy().copy()
    alpha[~rec["present"].numpy()] = np.nan
    return {"alpha": alpha, "beta": rec["beta"].numpy()}


def layer_inputs(graph: HeteroGraph, params: GatParams, layer: int) -> np.ndarray:
    """Projected embeddings H (N x q) entering the attention of ``layer``."""
    p = _tensor_params(params)
    gt = _graph_tensors(graph)
    sizes = [gt.layout.n_mts, gt.layout.n_sub, gt.layout.n_shp]
    G = gt.features
    with torch.no_grad():
        for k in range(layer):
            G = list(torch.split(torch.relu(_layer(p, k, G, gt, params.config.variant, None)), sizes, dim=0))
        H = torch.cat([G[j] @ p[f"M{layer}_{kind}"] for j, kind in enumerate(NODE_TYPES)], dim=0)
    return H.numpy()


# Per-node reference forms. The vectorized layer above is checked against these.

def type_attention(v: int, H: np.ndarray, graph: HeteroGraph, xi: dict[str, np.ndarray]) -> dict[str, float]:
    """Softmax over the neighbor types of ``v`` of tanh(<xi_type, [h_v ; weighted type sum]>)."""
    if graph.normalized is None:
        normalize(graph)
    types = graph.layout.node_types()
    nbrs = np.flatnonzero(graph.adjacency[v] > 0)
    if nbrs.size == 0:
        raise GatError(f"node {v} is isolated")
    q = H.shape[1]
    scores = {}
    for j, kind in enumerate(NODE_TYPES):
        sel = nbrs[types[nbrs] == j]
        if sel.size == 0:
            continue
        s = (graph.normalized[v, sel][:, None] * H[sel]).sum(axis=0)
        scores[kind] = math.tanh(float(xi[kind][:q] @ H[v] + xi[kind][q:] @ s))
    top = max(scores.values())
    z = {k: math.exp(a - top) for k, a in scores.items()}
    total = sum(z.values())
    return {k: e / total for k, e in z.items()}


def node_attention(v: int, H: np.ndarray, alpha: dict[str, float], graph: HeteroGraph,
                   eta: np.ndarray) -> dict[int, float]:
    """Softmax over neighbors v' of tanh(alpha_type(v') * <eta, [h_v ; h_v']>)."""
    types = graph.layout.node_types()
    nbrs = np.flatnonzero(graph.adjacency[v] > 0)
    if nbrs.size == 0:
        raise GatError(f"node {v} is isolated")
    q = H.shape[1]
    b = {int(u): math.tanh(alpha[NODE_TYPES[types[u]]] * float(eta[:q] @ H[v] + eta[q:] @ H[u]))
         for u in nbrs}
    top = max(b.values())
    z = {u: math.exp(x - top) for u, x in b.items()}
    total = sum(z.values())
    return {u: e / total for u, e in z.items()}
