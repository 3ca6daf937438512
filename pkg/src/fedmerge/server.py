"""FedMerge server: a soup of global models merged into one model per client.

Each round the server sends client i the merged model
``theta_i = sum_j w_ij * Theta_j``, collects the local update ``delta_i`` and
back-propagates it to the soup and to the merging logits:

* ``dTheta_j = sum_{i in A} (n_i / n_A) w_ij delta_i``
* unconstrained: ``da_ij = (n_i / n_A) <Theta_j, delta_i>``
* softmax:       ``da_ij = (n_i / n_A) w_ij <delta_i, Theta_j - theta_i>``

``A`` is the sampled client set and ``n_A`` its total training size.
"""

from __future__ import annotations

import hashlib
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from fedmerge.data import ClientDataset
from fedmerge.models import ModelSpec, evaluate, local_sgd
from fedmerge.params import (
    STREAM_INIT,
    STREAM_LOCAL,
    STREAM_SAMPLE,
    LayerLayout,
    ParamVector,
    SeededRng,
    dot_arrays,
    random_init,
    seq_sum,
)
from fedmerge.reports import RoundReport

Delta = tuple[int, ParamVector]


class WeightMode(str, Enum):
    SOFTMAX = "softmax"
    UNCONSTRAINED = "unconstrained"


class ModelSoup:
    """The d global models; entries are replaced, never mutated."""

    def __init__(self, models: Sequence[ParamVector]):
        if not models:
            raise ValueError("a soup needs at least one model")
        layout = models[0].layout
        if any(m.layout != layout for m in models):
            raise ValueError("all soup members must share one layout")
        self.models = list(models)
        self.layout: LayerLayout = layout
        self._keys: np.ndarray | None = None

    @classmethod
    def random(cls, layout: LayerLayout, d: int, seed: int) -> ModelSoup:
        root = SeededRng(seed, STREAM_INIT)
        return cls([random_init(layout, root.child(j)) for j in range(d)])

    @property
    def d(self) -> int:
        return len(self.models)

    def __getitem__(self, j: int) -> ParamVector:
        return self.models[j]

    def replace(self, j: int, model: ParamVector) -> None:
        if model.layout != self.layout:
            raise ValueError("layout mismatch")
        self.models[j] = model
        self._keys = None

    def norms(self) -> np.ndarray:
        return np.array([m.norm() for m in self.models])

    def keys(self) -> np.ndarray:
        """Content hashes used to order merge sums independently of soup indexing."""
        if self._keys is None:
            self._keys = np.array(
                [int.from_bytes(hashlib.blake2b(m.values.tobytes(), digest_size=8).digest(), "little") for m in self.models],
                dtype=np.uint64,
            )
        return self._keys

    def permuted(self, perm: Sequence[int]) -> ModelSoup:
        return ModelSoup([self.models[j] for j in perm])


def _ordered_sum(values: np.ndarray) -> float:
    # summing in sorted order makes the result independent of column order
    return seq_sum(np.sort(values))


def softmax_row(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    a = np.asarray(logits, dtype=np.float64)
    if mask is not None:
        a = np.where(mask, a, -np.inf)
    e = np.exp(a - np.max(a))
    return e / _ordered_sum(e)


@dataclass
class MergeWeights:
    """Merging logits ``a`` (m x d) and the weights derived from them.

    ``mask`` restricts a client's softmax to a subset of the soup and
    ``frozen`` disables weight updates (both used by the fixed-weight ablation).
    """

    logits: np.ndarray
    mode: WeightMode = WeightMode.SOFTMAX
    mask: np.ndarray | None = None
    frozen: bool = False

    def __post_init__(self) -> None:
        self.logits = np.array(self.logits, dtype=np.float64)
        self.mode = WeightMode(self.mode)
        if self.logits.ndim != 2:
            raise ValueError("logits must be an m x d matrix")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.logits.shape or not self.mask.any(axis=1).all():
                raise ValueError("mask must match logits and keep at least one model per client")

    @classmethod
    def uniform(cls, m: int, d: int, mode: WeightMode | str = WeightMode.SOFTMAX) -> MergeWeights:
        mode = WeightMode(mode)
        init = 0.0 if mode is WeightMode.SOFTMAX else 1.0 / d
        return cls(np.full((m, d), init), mode)

    @property
    def m(self) -> int:
        return self.logits.shape[0]

    @property
    def d(self) -> int:
        return self.logits.shape[1]

    def row(self, i: int) -> np.ndarray:
        if not 0 <= i < self.m:
            raise IndexError(f"client {i} out of range [0, {self.m})")
        if self.mode is WeightMode.UNCONSTRAINED:
            return self.logits[i].copy()
        return softmax_row(self.logits[i], None if self.mask is None else self.mask[i])

    def matrix(self) -> np.ndarray:
        return np.stack([self.row(i) for i in range(self.m)])

    def permuted(self, perm: Sequence[int]) -> MergeWeights:
        perm = list(perm)
        mask = None if self.mask is None else self.mask[:, perm]
        return MergeWeights(self.logits[:, perm], self.mode, mask, self.frozen)


@dataclass
class ServerConfig:
    d: int = 6
    eta_theta: float = 1.0
    eta_w: float = 0.01
    weight_mode: WeightMode = WeightMode.SOFTMAX
    head_only_dot: bool = True
    normalize_w_grad: bool = False
    clients_per_round: int | None = None
    rounds: int = 500
    seed: int = 0
    eta_loc: float = 0.01
    local_epochs: int = 2
    batch_size: int = 64
    threads: int = 1

    def __post_init__(self) -> None:
        self.weight_mode = WeightMode(self.weight_mode)

    def validate(self, m: int) -> None:
        if self.d < 1:
            raise ValueError("d must be >= 1")
        k = self.participants(m)
        if not 0 < k <= m:
            raise ValueError(f"clients_per_round must be in (0, {m}], got {k}")
        if self.eta_loc <= 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("eta_loc > 0, local_epochs >= 1 and batch_size >= 1 required")
        if self.rounds < 0 or self.threads < 1:
            raise ValueError("rounds >= 0 and threads >= 1 required")

    def participants(self, m: int) -> int:
        return m if self.clients_per_round is None else self.clients_per_round


def sample_clients(m: int, k: int, seed: int, round_index: int) -> list[int]:
    """Uniform sample of k clients without replacement, in ascending order."""
    gen = SeededRng(seed, STREAM_SAMPLE).child(round_index).generator
    if k >= m:
        return list(range(m))
    return sorted(int(i) for i in gen.choice(m, size=k, replace=False))


def local_rng(seed: int, round_index: int, client: int) -> SeededRng:
    return SeededRng(seed, STREAM_LOCAL).child(round_index, client)


def merge(soup: ModelSoup, weights: MergeWeights, client: int) -> ParamVector:
    """``sum_j w_ij Theta_j`` for one client."""
    w = weights.row(client)
    if w.shape[0] != soup.d:
        raise ValueError(f"weights have {w.shape[0]} columns, soup has {soup.d} models")
    order = np.lexsort((soup.keys(), w))
    out = w[order[0]] * soup[order[0]].values
    for j in order[1:]:
        out = out + w[j] * soup[j].values
    return ParamVector(out, soup.layout)


def _fractions(deltas: Sequence[Delta], sizes: Sequence[int]) -> list[float]:
    n_a = sum(sizes[i] for i, _ in deltas)
    if n_a <= 0:
        raise ValueError("sampled clients hold no training data")
    return [sizes[i] / n_a for i, _ in deltas]


def soup_update(soup: ModelSoup, weights: MergeWeights, deltas: Sequence[Delta], sizes: Sequence[int]) -> list[ParamVector]:
    """``dTheta_j = sum_{i in A} (n_i / n_A) w_ij delta_i`` for every j."""
    if not deltas:
        return [ParamVector(np.zeros(soup.layout.size), soup.layout) for _ in range(soup.d)]
    fracs = _fractions(deltas, sizes)
    rows = [weights.row(i) for i, _ in deltas]
    out = []
    for j in range(soup.d):
        acc = np.zeros(soup.layout.size)
        for frac, w, (_, delta) in zip(fracs, rows, deltas):
            acc = acc + (frac * w[j]) * delta.values
        out.append(ParamVector(acc, soup.layout))
    return out


def _dot(x: np.ndarray, y: np.ndarray, layout: LayerLayout, head_only: bool) -> float:
    if head_only:
        sl = layout.head_slice
        return dot_arrays(x[sl], y[sl])
    return dot_arrays(x, y)


def normalize_rows(update: np.ndarray, rows: Sequence[int]) -> np.ndarray:
    out = update.copy()
    for i in rows:
        norm = math.sqrt(_ordered_sum(out[i] * out[i]))
        if norm > 0:
            out[i] = out[i] / norm
    return out


def update_weights_unconstrained(
    soup: ModelSoup,
    weights: MergeWeights,
    deltas: Sequence[Delta],
    sizes: Sequence[int],
    head_only: bool = True,
    normalize: bool = False,
) -> np.ndarray:
    """``da_ij = (n_i / n_A) <Theta_j, delta_i>``; rows of unsampled clients are zero."""
    update = np.zeros_like(weights.logits)
    if not deltas:
        return update
    for frac, (i, delta) in zip(_fractions(deltas, sizes), deltas):
        for j in range(soup.d):
            update[i, j] = frac * _dot(soup[j].values, delta.values, soup.layout, head_only)
    return normalize_rows(update, [i for i, _ in deltas]) if normalize else update


def update_weights_softmax(
    soup: ModelSoup,
    weights: MergeWeights,
    merged: Sequence[ParamVector],
    deltas: Sequence[Delta],
    sizes: Sequence[int],
    head_only: bool = True,
    normalize: bool = False,
) -> np.ndarray:
    """``da_ij = (n_i / n_A) w_ij <delta_i, Theta_j - theta_i>``.

    ``merged[k]`` is the model that was sent to the client of ``deltas[k]``.
    With ``normalize`` every sampled row is rescaled to unit L2 norm.
    """
    update = np.zeros_like(weights.logits)
    if not deltas:
        return update
    if len(merged) != len(deltas):
        raise ValueError("need one merged model per delta")
    for frac, theta_i, (i, delta) in zip(_fractions(deltas, sizes), merged, deltas):
        w = weights.row(i)
        for j in range(soup.d):
            diff = soup[j].values - theta_i.values
            update[i, j] = frac * w[j] * _dot(delta.values, diff, soup.layout, head_only)
    return normalize_rows(update, [i for i, _ in deltas]) if normalize else update


def zero_sum_violation(update: np.ndarray, rows: Sequence[int]) -> float:
    if not len(rows):
        return 0.0
    return max(abs(_ordered_sum(update[i])) for i in rows)


def simplex_violation(weights: MergeWeights) -> float:
    if weights.mode is WeightMode.UNCONSTRAINED:
        return float("nan")
    worst = 0.0
    for i in range(weights.m):
        w = weights.row(i)
        worst = max(worst, abs(_ordered_sum(w) - 1.0), float(max(0.0, -w.min(), w.max() - 1.0)))
    return worst


def server_round(
    soup: ModelSoup,
    weights: MergeWeights,
    clients: Sequence[ClientDataset],
    spec: ModelSpec,
    cfg: ServerConfig,
    round_index: int,
) -> RoundReport:
    """One communication round; ``soup`` and ``weights`` are updated in place."""
    m = len(clients)
    if weights.m != m or weights.d != soup.d:
        raise ValueError("weights shape does not match clients x soup")
    report = RoundReport(round=round_index)
    selected = sample_clients(m, cfg.participants(m), cfg.seed, round_index)
    report.selected_clients = selected
    active = []
    for i in selected:
        if clients[i].n_train == 0:
            report.skipped.append(i)
            report.warnings.append(f"client {i} has an empty train split; skipped")
        else:
            active.append(i)

    t0 = time.perf_counter()
    merged = {i: merge(soup, weights, i) for i in active}
    server_time = time.perf_counter() - t0

    def train(i: int) -> ParamVector:
        _, delta = local_sgd(
            spec, merged[i], clients[i], cfg.eta_loc, cfg.local_epochs, cfg.batch_size, local_rng(cfg.seed, round_index, i)
        )
        return delta

    if cfg.threads > 1 and len(active) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            delta_list = list(pool.map(train, active))
    else:
        delta_list = [train(i) for i in active]
    deltas = list(zip(active, delta_list))
    sizes = [c.n_train for c in clients]

    t0 = time.perf_counter()
    theta_updates = soup_update(soup, weights, deltas, sizes)
    if weights.frozen or not deltas:
        w_update = np.zeros_like(weights.logits)
    elif weights.mode is WeightMode.SOFTMAX:
        w_update = update_weights_softmax(
            soup, weights, [merged[i] for i in active], deltas, sizes, cfg.head_only_dot, cfg.normalize_w_grad
        )
    else:
        w_update = update_weights_unconstrained(soup, weights, deltas, sizes, cfg.head_only_dot, cfg.normalize_w_grad)
    for j, upd in enumerate(theta_updates):
        soup.replace(j, ParamVector(soup[j].values + cfg.eta_theta * upd.values, soup.layout))
    if not weights.frozen:
        weights.logits = weights.logits + cfg.eta_w * w_update
    server_time += time.perf_counter() - t0

    norms = soup.norms()
    if not np.all(np.isfinite(norms)):
        raise FloatingPointError(f"soup norm became non-finite in round {round_index}")
    report.diagnostics = {
        "sum_delta_sq": float(sum(dot_arrays(d.values, d.values) for _, d in deltas)),
        "max_theta_norm": float(norms.max()),
        "simplex_violation": simplex_violation(weights),
        "zero_sum_violation": zero_sum_violation(w_update, active) if weights.mode is WeightMode.SOFTMAX else float("nan"),
        "server_time": server_time,
    }
    return report


class FedMergeTrainer:
    """Stateful wrapper that plugs :func:`server_round` into the training loop."""

    name = "fedmerge"

    def __init__(
        self,
        clients: Sequence[ClientDataset],
        spec: ModelSpec,
        cfg: ServerConfig,
        soup: ModelSoup | None = None,
        weights: MergeWeights | None = None,
    ):
        cfg.validate(len(clients))
        self.clients = clients
        self.spec = spec
        self.cfg = cfg
        self.soup = soup if soup is not None else ModelSoup.random(spec.layout, cfg.d, cfg.seed)
        self.weights = weights if weights is not None else MergeWeights.uniform(len(clients), cfg.d, cfg.weight_mode)
        if self.soup.d != self.weights.d or self.weights.m != len(clients):
            raise ValueError("soup / weights / clients sizes disagree")
        self._cache: dict[int, ParamVector] = {}

    def step(self, round_index: int) -> RoundReport:
        self._cache.clear()
        return server_round(self.soup, self.weights, self.clients, self.spec, self.cfg, round_index)

    def merged_model(self, client: int) -> ParamVector:
        if client not in self._cache:
            self._cache[client] = merge(self.soup, self.weights, client)
        return self._cache[client]

    def client_eval(self, client: int, split: str) -> tuple[float, float]:
        return evaluate(self.spec, self.merged_model(client), self.clients[client].batch(split))

    def weight_matrix(self) -> np.ndarray:
        return self.weights.matrix()
