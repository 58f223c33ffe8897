"""Dataset container, CSV/JSON on-disk format, preprocessing and synthetic data."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, replace

import numpy as np

META_KEYS = (
    "n_samples",
    "n_channels",
    "length",
    "n_classes",
    "n_subjects",
    "class_names",
    "subject_names",
)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetMeta:
    n_samples: int
    n_channels: int
    length: int
    n_classes: int
    n_subjects: int
    class_names: list[str]
    subject_names: list[str]

    def __post_init__(self):
        for key in ("n_samples", "n_channels", "length", "n_classes", "n_subjects"):
            if int(getattr(self, key)) < 1:
                raise DatasetError(f"meta.{key} must be >= 1")
        if len(self.class_names) != self.n_classes:
            raise DatasetError("class_names length does not match n_classes")
        if len(self.subject_names) != self.n_subjects:
            raise DatasetError("subject_names length does not match n_subjects")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in META_KEYS}


@dataclass
class MtsDataset:
    """n x C x L tensor plus per-series class, subject and labeled flag."""

    values: np.ndarray
    labels: np.ndarray
    subject_ids: np.ndarray
    labeled_mask: np.ndarray
    meta: DatasetMeta

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subject_ids = np.asarray(self.subject_ids, dtype=np.int64)
        self.labeled_mask = np.asarray(self.labeled_mask, dtype=bool)
        m = self.meta
        if self.values.shape != (m.n_samples, m.n_channels, m.length):
            raise DatasetError(
                f"values shape {self.values.shape} does not match meta "
                f"({m.n_samples}, {m.n_channels}, {m.length})"
            )
        for name, arr, upper in (
            ("labels", self.labels, m.n_classes),
            ("subject_ids", self.subject_ids, m.n_subjects),
        ):
            if arr.shape != (m.n_samples,):
                raise DatasetError(f"{name} must have one entry per series")
            if arr.size and (arr.min() < 0 or arr.max() >= upper):
                raise DatasetError(f"{name} index out of range [0, {upper})")
        if self.labeled_mask.shape != (m.n_samples,):
            raise DatasetError("labeled_mask must have one entry per series")

    @property
    def n(self) -> int:
        return self.meta.n_samples

    def subset(self, idx) -> "MtsDataset":
        idx = np.asarray(idx)
        meta = replace(self.meta, n_samples=len(idx))
        return MtsDataset(
            self.values[idx], self.labels[idx], self.subject_ids[idx],
            self.labeled_mask[idx], meta,
        )

    def with_mask(self, mask) -> "MtsDataset":
        return replace(self, labeled_mask=np.asarray(mask, dtype=bool))


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 0
    per_class: int = 20
    n_classes: int = 3
    n_subjects: int = 2
    C: int = 3
    L: int = 64
    template_len: int = 32
    noise_sigma: float = 0.3
    subject_offset: float = 1.0

    def __post_init__(self):
        if not 1 <= self.template_len < self.L:
            raise DatasetError("template_len must satisfy 1 <= template_len < L")
        if self.noise_sigma < 0:
            raise DatasetError("noise_sigma must be >= 0")
        for key in ("per_class", "n_classes", "n_subjects", "C", "L"):
            if getattr(self, key) < 1:
                raise DatasetError(f"{key} must be >= 1")


def _read_rows(path: str) -> list[list[str]]:
    if not os.path.exists(path):
        raise DatasetError(f"missing file: {path}")
    with open(path, newline="") as fh:
        return [row for row in csv.reader(fh) if row]


def _read_index_file(path: str, n: int, what: str) -> np.ndarray:
    out = np.full(n, -1, dtype=np.int64)
    for row in _read_rows(path):
        if len(row) != 2:
            raise DatasetError(f"{what}: expected 2 columns, got {len(row)}")
        i, v = int(row[0]), int(row[1])
        if not 0 <= i < n:
            raise DatasetError(f"{what}: sample index {i} out of range")
        out[i] = v
    if (out < 0).any() and what != "mask.csv":
        missing = int(np.flatnonzero(out < 0)[0])
        raise DatasetError(f"{what}: no row for sample {missing}")
    return out


def load_dataset(path: str) -> MtsDataset:
    """Read a dataset directory (meta.json, data.csv, labels.csv, subjects.csv[, mask.csv])."""
    meta_path = os.path.join(path, "meta.json")
    if not os.path.exists(meta_path):
        raise DatasetError(f"missing file: {meta_path}")
    with open(meta_path) as fh:
        raw = json.load(fh)
    if set(raw) != set(META_KEYS):
        raise DatasetError(f"meta.json keys must be exactly {sorted(META_KEYS)}")
    meta = DatasetMeta(**raw)
    n, C, L = meta.n_samples, meta.n_channels, meta.length

    rows = _read_rows(os.path.join(path, "data.csv"))
    if len(rows) != n * C:
        raise DatasetError(f"data.csv has {len(rows)} rows, expected n_samples*n_channels={n * C}")
    values = np.zeros((n, C, L))
    seen = np.zeros((n, C), dtype=bool)
    for row in rows:
        if len(row) != L + 2:
            raise DatasetError(f"data.csv row has {len(row) - 2} values, expected length={L}")
        i, c = int(row[0]), int(row[1])
        if not (0 <= i < n and 0 <= c < C):
            raise DatasetError(f"data.csv index ({i}, {c}) out of range")
        values[i, c] = [float(v) for v in row[2:]]
        seen[i, c] = True
    if not seen.all():
        raise DatasetError("data.csv does not cover every (sample, channel) pair")

    labels = _read_index_file(os.path.join(path, "labels.csv"), n, "labels.csv")
    subjects = _read_index_file(os.path.join(path, "subjects.csv"), n, "subjects.csv")
    mask_path = os.path.join(path, "mask.csv")
    if os.path.exists(mask_path):
        mask = _read_index_file(mask_path, n, "mask.csv") == 1
    else:
        mask = np.ones(n, dtype=bool)
    return MtsDataset(values, labels, subjects, mask, meta)


def write_dataset(ds: MtsDataset, path: str, write_mask: bool = False) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(ds.meta.to_dict(), fh, indent=2)
    with open(os.path.join(path, "data.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        for i in range(ds.n):
            for c in range(ds.meta.n_channels):
                w.writerow([i, c, *(repr(float(v)) for v in ds.values[i, c])])
    files = [("labels.csv", ds.labels), ("subjects.csv", ds.subject_ids)]
    if write_mask:
        files.append(("mask.csv", ds.labeled_mask.astype(int)))
    for name, arr in files:
        with open(os.path.join(path, name), "w", newline="") as fh:
            csv.writer(fh).writerows([i, int(v)] for i, v in enumerate(arr))


def znormalize(ds: MtsDataset) -> MtsDataset:
    """Per-(sample, channel) zero mean, unit variance. Constant traces become zeros."""
    x = ds.values
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    # near-constant traces would otherwise blow up floating noise
    flat = sd <= 1e-12 * np.maximum(1.0, np.abs(mu))
    z = np.where(flat, 0.0, (x - mu) / np.where(flat, 1.0, sd))
    return replace(ds, values=z)


def make_label_mask(ds: MtsDataset, fraction: float, seed: int) -> np.ndarray:
    """Stratified mask: ceil(fraction * n_c) labeled series in every class."""
    if not 0 < fraction <= 1:
        raise DatasetError("fraction must be in (0, 1]")
    rng = np.random.default_rng(seed)
    mask = np.zeros(ds.n, dtype=bool)
    for c in range(ds.meta.n_classes):
        members = np.flatnonzero(ds.labels == c)
        if members.size == 0:
            continue
        k = min(members.size, math.ceil(fraction * members.size - 1e-12))
        mask[rng.choice(members, size=k, replace=False)] = True
    return mask


def generate_synthetic(spec: SyntheticSpec) -> MtsDataset:
    """Class templates planted at random (channel, position), subject offset on channel 0, plus noise."""
    rng = np.random.default_rng(spec.seed)
    templates = rng.standard_normal((spec.n_classes, spec.template_len))
    n = spec.per_class * spec.n_classes
    values = np.zeros((n, spec.C, spec.L))
    labels = np.repeat(np.arange(spec.n_classes), spec.per_class)
    subjects = np.tile(np.arange(spec.per_class) % spec.n_subjects, spec.n_classes)
    channels = rng.integers(0, spec.C, size=n)
    starts = rng.integers(0, spec.L - spec.template_len + 1, size=n)
    for i in range(n):
        s = starts[i]
        values[i, channels[i], s:s + spec.template_len] += templates[labels[i]]
        values[i, 0] += spec.subject_offset * subjects[i]
    if spec.noise_sigma > 0:
        values += spec.noise_sigma * rng.standard_normal(values.shape)
    meta = DatasetMeta(
        n_samples=n, n_channels=spec.C, length=spec.L,
        n_classes=spec.n_classes, n_subjects=spec.n_subjects,
        class_names=[f"class_{c}" for c in range(spec.n_classes)],
        subject_names=[f"subject_{u}" for u in range(spec.n_subjects)],
    )
    return MtsDataset(values, labels, subjects, np.ones(n, dtype=bool), meta)
