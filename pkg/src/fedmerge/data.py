"""Synthetic non-IID federations and CSV loading."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fedmerge.models import Batch
from fedmerge.params import SeededRng

SPLITS = ("train", "val", "test")
DEFAULT_FRACTIONS = (0.7, 0.15, 0.15)
# 286 samples leave 200 in the train split at the default fractions
DEFAULT_CLIENT_SIZE = 286


@dataclass
class ClientDataset:
    features: np.ndarray
    labels: np.ndarray
    splits: dict[str, np.ndarray]
    cluster_id: int | None = None

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features/labels shape mismatch")
        if self.n_i < 1:
            raise ValueError("a client needs at least one sample")
        self.splits = {k: np.asarray(self.splits.get(k, []), dtype=np.int64) for k in SPLITS}
        seen = np.concatenate([self.splits[k] for k in SPLITS])
        if seen.shape[0] != self.n_i or not np.array_equal(np.sort(seen), np.arange(self.n_i)):
            raise ValueError("splits must be disjoint and cover every row")

    @property
    def n_i(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def split_size(self, split: str) -> int:
        return int(self.splits[split].shape[0])

    @property
    def n_train(self) -> int:
        return self.split_size("train")

    def split_arrays(self, split: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.splits[split]
        return self.features[idx], self.labels[idx]

    def batch(self, split: str) -> Batch:
        x, y = self.split_arrays(split)
        return Batch(x, y)


def split_indices(n: int, gen: np.random.Generator, fractions: Sequence[float] = DEFAULT_FRACTIONS) -> dict[str, np.ndarray]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or not math.isclose(sum(fractions), 1.0):
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    order = gen.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = min(int(round(fractions[1] * n)), n - n_train)
    return {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train : n_train + n_val]),
        "test": np.sort(order[n_train + n_val :]),
    }


@dataclass
class FederationSpec:
    m: int = 12
    partition: str = "cluster"
    alpha: float = 0.1
    K: int = 3
    sizes: int | list[int] = DEFAULT_CLIENT_SIZE
    seed: int = 0
    # clients per cluster; defaults to an even contiguous split
    cluster_sizes: list[int] | None = None
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS

    def __post_init__(self) -> None:
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.partition not in ("cluster", "dirichlet", "iid"):
            raise ValueError(f"unknown partition {self.partition!r}")
        if self.partition == "dirichlet" and not self.alpha > 0:
            raise ValueError("dirichlet partition needs alpha > 0")
        if self.partition == "cluster" and not 1 <= self.K <= self.m:
            raise ValueError("cluster partition needs 1 <= K <= m")
        self.fractions = tuple(float(f) for f in self.fractions)
        if self.cluster_sizes is not None:
            if len(self.cluster_sizes) != self.K or sum(self.cluster_sizes) != self.m or min(self.cluster_sizes) < 1:
                raise ValueError("cluster_sizes must list K positive counts summing to m")

    def client_sizes(self) -> list[int]:
        if isinstance(self.sizes, int):
            out = [self.sizes] * self.m
        else:
            out = [int(s) for s in self.sizes]
        if len(out) != self.m or min(out) < 1:
            raise ValueError("sizes must give a positive count for each of the m clients")
        return out

    def cluster_assignment(self) -> list[int]:
        counts = self.cluster_sizes
        if counts is None:
            base, extra = divmod(self.m, self.K)
            counts = [base + (1 if k < extra else 0) for k in range(self.K)]
        return [k for k, c in enumerate(counts) for _ in range(c)]


@dataclass
class ClusterTruthSpec:
    """How each ground-truth cluster generates labelled samples.

    With ``permute_labels`` all clusters share the class means and cluster k
    relabels class c as ``(c + k) mod C``, so no single model fits two clusters.
    """

    input_dim: int = 10
    num_classes: int = 4
    class_sep: float = 3.0
    noise: float = 1.0
    permute_labels: bool = True
    shared_means: bool | None = None

    def __post_init__(self) -> None:
        if self.shared_means is None:
            self.shared_means = self.permute_labels
        if self.num_classes < 2 or self.input_dim < 1:
            raise ValueError("need num_classes >= 2 and input_dim >= 1")

    def permutation(self, k: int) -> np.ndarray:
        c = self.num_classes
        if not self.permute_labels:
            return np.arange(c)
        return (np.arange(c) + k) % c


def _class_means(truth: ClusterTruthSpec, gen: np.random.Generator) -> np.ndarray:
    raw = gen.normal(size=(truth.num_classes, truth.input_dim))
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    return truth.class_sep * raw


def gen_cluster_noniid(spec: FederationSpec, truth: ClusterTruthSpec | None = None) -> list[ClientDataset]:
    """Clients grouped into K tasks that disagree on how features map to labels."""
    truth = truth or ClusterTruthSpec()
    if spec.partition != "cluster":
        raise ValueError("spec.partition must be 'cluster'")
    assignment = spec.cluster_assignment()
    sizes = spec.client_sizes()
    root = SeededRng(spec.seed, stream=11)
    means_gen = root.child(0).generator
    shared = _class_means(truth, means_gen)
    means = [shared if truth.shared_means else _class_means(truth, means_gen) for _ in range(spec.K)]
    clients = []
    for i, (k, n) in enumerate(zip(assignment, sizes)):
        gen = root.child(1, i).generator
        latent = gen.integers(truth.num_classes, size=n)
        x = means[k][latent] + truth.noise * gen.normal(size=(n, truth.input_dim))
        y = truth.permutation(k)[latent]
        clients.append(ClientDataset(x, y, split_indices(n, gen, spec.fractions), cluster_id=k))
    return clients


@dataclass
class LabeledPool:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)


def make_gaussian_pool(
    n: int, input_dim: int = 10, num_classes: int = 10, class_sep: float = 3.0, noise: float = 1.0, seed: int = 0
) -> LabeledPool:
    gen = SeededRng(seed, stream=12).generator
    means = _class_means(ClusterTruthSpec(input_dim, num_classes, class_sep, noise, permute_labels=False), gen)
    labels = np.arange(n) % num_classes
    gen.shuffle(labels)
    return LabeledPool(means[labels] + noise * gen.normal(size=(n, input_dim)), labels)


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer counts summing to ``total`` that best match ``proportions``."""
    p = np.asarray(proportions, dtype=np.float64)
    p = p / p.sum()
    raw = total * p
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        # ties go to the lower label index
        order = np.lexsort((np.arange(p.shape[0]), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def gen_dirichlet_noniid(spec: FederationSpec, base: LabeledPool) -> list[ClientDataset]:
    """Label-skewed partition: client i draws label mix q_i ~ Dir(alpha * p).

    ``p`` is the pool's label distribution. Samples are taken without
    replacement; when a label runs dry the client's remaining mass is
    renormalised over labels that still have samples.
    """
    if spec.partition not in ("dirichlet", "iid"):
        raise ValueError("spec.partition must be 'dirichlet' or 'iid'")
    sizes = spec.client_sizes()
    if sum(sizes) > base.labels.shape[0]:
        raise ValueError(f"pool holds {base.labels.shape[0]} samples, {sum(sizes)} requested")
    root = SeededRng(spec.seed, stream=13)
    gen = root.child(0).generator
    classes = np.unique(base.labels)
    remaining = [list(gen.permutation(np.flatnonzero(base.labels == c))) for c in classes]
    prior = np.array([len(r) for r in remaining], dtype=np.float64)
    prior /= prior.sum()
    clients = []
    for i, n in enumerate(sizes):
        q = prior.copy() if spec.partition == "iid" else gen.dirichlet(spec.alpha * prior)
        chosen: list[int] = []
        need = n
        while need > 0:
            avail = np.array([len(r) for r in remaining], dtype=np.float64)
            if avail.sum() == 0:
                raise ValueError(f"pool exhausted while filling client {i}")
            weights = q * (avail > 0)
            if weights.sum() <= 0 or not np.all(np.isfinite(weights)):
                weights = avail
            counts = np.minimum(largest_remainder(need, weights), avail.astype(np.int64))
            if counts.sum() == 0:
                counts[int(np.argmax(avail))] = 1
            for c, cnt in enumerate(counts):
                chosen.extend(remaining[c][:cnt])
                del remaining[c][:cnt]
            need -= int(counts.sum())
        idx = np.array(sorted(chosen), dtype=np.int64)
        cgen = root.child(1, i).generator
        clients.append(ClientDataset(base.features[idx], base.labels[idx], split_indices(n, cgen, spec.fractions)))
    return clients


def generate_federation(spec: FederationSpec, truth: ClusterTruthSpec | None = None) -> list[ClientDataset]:
    truth = truth or ClusterTruthSpec()
    if spec.partition == "cluster":
        return gen_cluster_noniid(spec, truth)
    pool = make_gaussian_pool(
        sum(spec.client_sizes()), truth.input_dim, truth.num_classes, truth.class_sep, truth.noise, seed=spec.seed
    )
    return gen_dirichlet_noniid(spec, pool)


@dataclass
class ColumnSchema:
    label_column: str = "label"
    feature_columns: list[str] | None = None
    labels: list[int] | None = None
    fractions: tuple[float, float, float] = DEFAULT_FRACTIONS
    seed: int = 0
    standardize: bool = True


def _read_client_csv(path: Path, schema: ColumnSchema) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(row for row in fh if not row.startswith("#"))
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        if schema.label_column not in header:
            raise ValueError(f"{path}: missing label column {schema.label_column!r}")
        feats = schema.feature_columns or [h for h in header if h != schema.label_column]
        missing = [f for f in feats if f not in header]
        if missing:
            raise ValueError(f"{path}: missing feature columns {missing}")
        fpos = [header.index(f) for f in feats]
        lpos = header.index(schema.label_column)
        xs, ys = [], []
        for row_idx, row in enumerate(reader):
            if len(row) != len(header):
                raise ValueError(f"{path}: row {row_idx} has {len(row)} cells, header has {len(header)}")
            try:
                xs.append([float(row[p]) for p in fpos])
                label_f = float(row[lpos])
            except ValueError:
                raise ValueError(f"{path}: row {row_idx} has a non-numeric cell") from None
            if not all(math.isfinite(v) for v in xs[-1]) or not label_f.is_integer():
                raise ValueError(f"{path}: row {row_idx} has an invalid value")
            label = int(label_f)
            if label < 0 or (schema.labels is not None and label not in schema.labels):
                raise ValueError(f"{path}: row {row_idx} has unknown label {label}")
            ys.append(label)
    if not ys:
        raise ValueError(f"{path}: no data rows")
    return np.array(xs, dtype=np.float64).reshape(len(ys), len(fpos)), np.array(ys, dtype=np.int64)


def load_csv_federation(paths: Sequence[str | Path], schema: ColumnSchema | None = None) -> list[ClientDataset]:
    """One client per CSV file, standardised with train-split statistics only."""
    schema = schema or ColumnSchema()
    raw = [_read_client_csv(Path(p), schema) for p in paths]
    dims = {x.shape[1] for x, _ in raw}
    if len(dims) != 1:
        raise ValueError(f"clients disagree on feature count: {sorted(dims)}")
    root = SeededRng(schema.seed, stream=14)
    splits = [split_indices(len(y), root.child(i).generator, schema.fractions) for i, (_, y) in enumerate(raw)]
    clients = []
    if schema.standardize:
        train = np.concatenate([x[s["train"]] for (x, _), s in zip(raw, splits)])
        if train.shape[0] == 0:
            raise ValueError("no training rows to compute standardisation statistics")
        mean = train.mean(axis=0)
        std = train.std(axis=0)
        std[std == 0] = 1.0
    for (x, y), s in zip(raw, splits):
        if schema.standardize:
            x = (x - mean) / std
        clients.append(ClientDataset(x, y, s))
    return clients


def write_client_csv(client: ClientDataset, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"f{k}" for k in range(client.input_dim)] + ["label"])
        for row, label in zip(client.features, client.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def federation_manifest(clients: Sequence[ClientDataset], seed: int, extra: dict | None = None) -> dict:
    manifest = {
        "m": len(clients),
        "sizes": [c.n_i for c in clients],
        "cluster_ids": [c.cluster_id for c in clients],
        "seed": seed,
        "splits": [{k: c.splits[k].tolist() for k in SPLITS} for c in clients],
    }
    manifest.update(extra or {})
    return manifest


def export_federation(clients: Sequence[ClientDataset], out_dir: str | Path, seed: int, extra: dict | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, c in enumerate(clients):
        write_client_csv(c, out / f"client_{i:03d}.csv")
    manifest = federation_manifest(clients, seed, extra)
    (out / "federation.json").write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return out / "federation.json"


__all__ = [
    "ClientDataset",
    "ClusterTruthSpec",
    "ColumnSchema",
    "FederationSpec",
    "LabeledPool",
    "export_federation",
    "federation_manifest",
    "gen_cluster_noniid",
    "gen_dirichlet_noniid",
    "generate_federation",
    "load_csv_federation",
    "make_gaussian_pool",
]
