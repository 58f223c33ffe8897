"""End-to-end orchestration: train, evaluate, inspect and sweep.

Stage order: CTSA train + encode, pairwise soft-DTW and similarity, shapelet
train + prune + position, subject features, graph assembly + normalization,
dual-level GAT training, prediction. Every stage writes its artifact under
``out_dir`` so later stages can be rerun or inspected in isolation.

Per-stage seeds derive from the master seed with fixed offsets:
label mask ``seed``, CTSA ``seed + 1``, shapelets ``seed + 2``, GAT ``seed + 3``.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import config as config_mod
from .config import PipelineConfig
from .ctsa import CtsaConfig, encode, train_ctsa
from .dataio import MtsDataset, load_dataset, make_label_mask, znormalize
from .dualgat import GatConfig, GatParams, final_attention, predict, train_gat
from .hetgraph import NODE_TYPES, HeteroGraph, NodeLayout, assemble, normalize, validate
from .shapelets import ShapeletConfig, position, prune, train_shapelets
from .softdtw import SoftDtwConfig, pairwise_matrix, similarity

log = logging.getLogger(__name__)

SEED_OFFSETS = {"mask": 0, "ctsa": 1, "shapelets": 2, "gat": 3}
INSPECT_TARGETS = ("graph", "shapelets", "attention", "similarity")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class RunArtifacts:
    out_dir: str
    files: dict[str, str] = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)


def write_matrix(path: str, M) -> None:
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows([repr(float(v)) for v in row] for row in M)


def read_matrix(path: str) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
    return np.array(rows, dtype=np.float64)


def _write_rows(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _dump_json(path: str, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


@contextmanager
def _stage(name: str, timings: dict):
    t0 = time.perf_counter()
    log.info("stage %s: start", name)
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # tag every failure with its stage
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
    timings[name] = time.perf_counter() - t0
    log.info("stage %s: %.2fs", name, timings[name])


def module_configs(cfg: PipelineConfig) -> tuple[CtsaConfig, ShapeletConfig, GatConfig]:
    c, s, g = cfg.ctsa, cfg.shapelets, cfg.gat
    ctsa = CtsaConfig(W=c.W, S=c.S, gamma1=c.gamma1, d_k=c.d_k, N_a=c.N_a, K_neg=c.K_neg,
                      epochs=c.epochs, lr=c.lr, seed=cfg.seed + SEED_OFFSETS["ctsa"])
    shp = ShapeletConfig(scales=tuple(s.scales), K=s.K, delta1=s.delta1, lam=s.lambda_,
                         tau_sim=s.tau_sim, epsilon_percentile=s.epsilon_percentile,
                         epochs=s.epochs, lr=s.lr, seed=cfg.seed + SEED_OFFSETS["shapelets"])
    gat = GatConfig(layers=g.layers, hidden=g.hidden, variant=g.variant, epochs=g.epochs,
                    lr=g.lr, seed=cfg.seed + SEED_OFFSETS["gat"])
    return ctsa, shp, gat


def _label_mask(raw: MtsDataset, cfg: PipelineConfig) -> np.ndarray:
    if os.path.exists(os.path.join(cfg.dataset_dir, "mask.csv")):
        return raw.labeled_mask
    return make_label_mask(raw, cfg.label_fraction, cfg.seed + SEED_OFFSETS["mask"])


def save_graph(g: HeteroGraph, gdir: str) -> None:
    os.makedirs(gdir, exist_ok=True)
    write_matrix(os.path.join(gdir, "adjacency.csv"), g.adjacency)
    _dump_json(os.path.join(gdir, "layout.json"), g.layout.to_dict())
    for kind in NODE_TYPES:
        write_matrix(os.path.join(gdir, f"features_{kind}.csv"), g.features[kind])


def load_graph(gdir: str) -> HeteroGraph:
    with open(os.path.join(gdir, "layout.json")) as fh:
        lay = json.load(fh)
    layout = NodeLayout(lay["n_mts"], lay["n_sub"], lay["n_shp"])
    A = read_matrix(os.path.join(gdir, "adjacency.csv")).reshape(layout.total, layout.total)
    feats = {}
    for kind, count in zip(NODE_TYPES, (layout.n_mts, layout.n_sub, layout.n_shp)):
        feats[kind] = read_matrix(os.path.join(gdir, f"features_{kind}.csv")).reshape(count, -1)
    return normalize(HeteroGraph(A, layout, feats))


def run_pipeline(cfg: PipelineConfig) -> RunArtifacts:
    cfg.validate()
    out = cfg.out_dir
    os.makedirs(out, exist_ok=True)
    art = RunArtifacts(out)
    timings: dict[str, float] = {}
    traces: dict[str, list[float]] = {}
    ctsa_cfg, shp_cfg, gat_cfg = module_configs(cfg)

    def path(name: str) -> str:
        art.files[name] = os.path.join(out, name)
        return art.files[name]

    with open(path("config.json"), "w") as fh:
        fh.write(config_mod.dump_config(cfg) + "\n")

    with _stage("load", timings):
        raw = load_dataset(cfg.dataset_dir)
        mask = _label_mask(raw, cfg)
        ds = znormalize(raw).with_mask(mask)
        with open(path("mask.csv"), "w", newline="") as fh:
            csv.writer(fh).writerows([i, int(m)] for i, m in enumerate(mask))

    with _stage("ctsa", timings):
        params, traces["ctsa"] = train_ctsa(ds, ctsa_cfg, pca_values=raw.values)
        reps = encode(ds, params, ctsa_cfg)
        _dump_json(path("ctsa_params.json"), {k: v.tolist() for k, v in params.as_dict().items()})
        _write_rows(path("representations.csv"),
                    ["series_id", "token_idx"] + [f"v_{j}" for j in range(ctsa_cfg.d_k)],
                    ([r.series_id, t, *map(float, row)] for r in reps
                     for t, row in enumerate(r.embedding_seq)))

    with _stage("softdtw", timings):
        D = pairwise_matrix([r.embedding_seq for r in reps], SoftDtwConfig(cfg.softdtw.gamma2))
        sim = similarity(D, cfg.softdtw.alpha)
        write_matrix(path("distance.csv"), D)
        write_matrix(path("similarity.csv"), sim.similarity)

    with _stage("shapelets", timings):
        bank = train_shapelets(ds, shp_cfg)
        traces["shapelets"] = bank.loss_trace
        bank = prune(bank, shp_cfg.tau_sim, cfg.softdtw.gamma2)
        pos = position(bank, ds, percentile=shp_cfg.epsilon_percentile)
        _write_rows(path("shapelets.csv"), ["id", "scale", "length", "values"],
                    ([s.id, s.scale, s.length, " ".join(repr(float(v)) for v in s.values)]
                     for s in bank.shapelets()))
        _write_rows(path("positioning.csv"),
                    ["shapelet_id", "series_id", "channel", "position", "response"], pos.matches)
        _dump_json(path("shapelet_bank.json"), {
            "lengths": bank.lengths, "epsilon": pos.epsilon,
            "ids": [i.tolist() for i in bank.ids],
            "values": [v.tolist() for v in bank.values],
            "sample_head": bank.sample_head.tolist(), "subject_head": bank.subject_head.tolist(),
            "delta1": bank.delta1, "lambda": bank.lam,
        })

    with _stage("graph", timings):
        graph = assemble(sim, ds, bank, pos, reps, topk=cfg.softdtw.topk,
                         gamma2=cfg.softdtw.gamma2, alpha=cfg.softdtw.alpha)
        normalize(graph)
        report = validate(graph)
        if not report.ok:
            raise StageError("graph", "; ".join(report.messages))
        save_graph(graph, os.path.join(out, "graph"))
        art.files["graph"] = os.path.join(out, "graph")

    with _stage("gat", timings):
        gat = train_gat(graph, ds.labels, mask, gat_cfg, n_classes=ds.meta.n_classes)
        traces["gat"] = gat.loss_trace
        with open(path("gat_checkpoint.json"), "w") as fh:
            fh.write(gat.to_json())

    with _stage("predict", timings):
        pred = predict(graph, gat)
        test = ~mask
        acc = float((pred[test] == ds.labels[test]).mean()) if test.any() else float("nan")
        _write_rows(path("predictions.csv"), ["series_id", "predicted", "labeled"],
                    ([i, int(p), int(m)] for i, (p, m) in enumerate(zip(pred, mask))))

    _dump_json(path("losses.json"), traces)
    art.metrics = {
        "accuracy": acc,
        "n_labeled": int(mask.sum()),
        "n_unlabeled": int((~mask).sum()),
        "loss": "nll",
        "final_loss": {k: (v[-1] if v else None) for k, v in traces.items()},
        "per_stage_seconds": timings,
        "config_echo": config_mod.to_flat(cfg),
    }
    _dump_json(path("metrics.json"), art.metrics)
    return art


def evaluate(artifacts_dir: str, dataset_dir: str | None = None) -> dict:
    """Recompute predictions from the saved graph + checkpoint; score the unlabeled-at-train series."""
    try:
        with open(os.path.join(artifacts_dir, "config.json")) as fh:
            flat = json.load(fh)
        cfg = config_mod.from_flat(flat)
        with open(os.path.join(artifacts_dir, "gat_checkpoint.json")) as fh:
            gat = GatParams.from_json(fh.read())
        graph = load_graph(os.path.join(artifacts_dir, "graph"))
        with open(os.path.join(artifacts_dir, "mask.csv"), newline="") as fh:
            mask = np.array([int(r[1]) == 1 for r in csv.reader(fh) if r])
    except FileNotFoundError as exc:
        raise StageError("eval", f"missing artifact: {exc.filename}") from exc
    except (ValueError, KeyError) as exc:
        raise StageError("eval", f"unreadable artifacts: {exc}") from exc
    ds = load_dataset(dataset_dir or cfg.dataset_dir)
    if ds.n != graph.layout.n_mts or len(mask) != ds.n:
        raise StageError("eval", "dataset size does not match the trained graph")
    try:
        pred = predict(graph, gat)
    except (RuntimeError, ValueError, KeyError) as exc:
        raise StageError("eval", f"checkpoint does not fit the graph: {exc}") from exc
    test = ~mask
    acc = float((pred[test] == ds.labels[test]).mean()) if test.any() else float("nan")
    return {"accuracy": acc, "n_labeled": int(mask.sum()), "n_unlabeled": int(test.sum())}


def inspect(artifacts_dir: str, what: str, out_dir: str | None = None) -> list[str]:
    """Write plot-ready CSV/JSON for one artifact family; returns the written paths."""
    if what not in INSPECT_TARGETS:
        raise ValueError(f"unknown inspect target {what!r}; expected one of {INSPECT_TARGETS}")
    dest = out_dir or os.path.join(artifacts_dir, "inspect", what)
    os.makedirs(dest, exist_ok=True)
    written = []

    def copy(src_name: str, dst_name: str | None = None):
        src = os.path.join(artifacts_dir, src_name)
        if not os.path.exists(src):
            raise StageError("inspect", f"missing artifact: {src}")
        dst = os.path.join(dest, dst_name or os.path.basename(src_name))
        with open(src) as fi, open(dst, "w") as fo:
            fo.write(fi.read())
        written.append(dst)

    if what == "graph":
        copy("graph/adjacency.csv")
        copy("graph/layout.json")
    elif what == "similarity":
        copy("similarity.csv")
        copy("distance.csv")
    elif what == "shapelets":
        with open(os.path.join(artifacts_dir, "shapelet_bank.json")) as fh:
            bank = json.load(fh)
        p = os.path.join(dest, "shapelet_values.csv")
        rows = []
        for j, (ids, vals) in enumerate(zip(bank["ids"], bank["values"])):
            for sid, v in zip(ids, vals):
                rows.append([sid, j, len(v), *v])
        width = max((len(r) for r in rows), default=3)
        _write_rows(p, ["id", "scale", "length"] + [f"v_{i}" for i in range(width - 3)], rows)
        written.append(p)
        copy("positioning.csv")
    else:
        graph = load_graph(os.path.join(artifacts_dir, "graph"))
        with open(os.path.join(artifacts_dir, "gat_checkpoint.json")) as fh:
            gat = GatParams.from_json(fh.read())
        att = final_attention(graph, gat)
        p1 = os.path.join(dest, "attention_types.csv")
        _write_rows(p1, ["node", "node_type", *NODE_TYPES],
                    ([v, NODE_TYPES[t], *map(float, att["alpha"][v])]
                     for v, t in enumerate(graph.layout.node_types())))
        p2 = os.path.join(dest, "attention_edges.csv")
        src, dst = np.nonzero(graph.adjacency > 0)
        _write_rows(p2, ["node", "neighbor", "beta"],
                    ([int(a), int(b), float(att["beta"][a, b])] for a, b in zip(src, dst)))
        written += [p1, p2]
    return written


def sweep(cfg: PipelineConfig, key: str, values: list, out_dir: str | None = None) -> list[dict]:
    """Run the pipeline once per value of ``key``; writes ``sweep.csv`` of (value, accuracy)."""
    if not values:
        raise config_mod.ConfigError("sweep needs at least one value")
    flat = config_mod.to_flat(cfg)
    if key not in flat:
        raise config_mod.ConfigError(f"unknown config key: {key}")
    root = out_dir or cfg.out_dir
    os.makedirs(root, exist_ok=True)
    rows = []
    for i, value in enumerate(values):
        run_flat = dict(flat, **{key: value, "seed": cfg.seed + 1000 * i,
                                 "out_dir": os.path.join(root, f"run_{i:02d}")})
        run_cfg = config_mod.from_flat(run_flat)
        art = run_pipeline(run_cfg)
        rows.append({"value": value, "accuracy": art.metrics["accuracy"],
                     "seed": run_cfg.seed, "out_dir": run_cfg.out_dir})
    _write_rows(os.path.join(root, "sweep.csv"), [key, "accuracy", "seed"],
                ([r["value"], r["accuracy"], r["seed"]] for r in rows))
    return rows
