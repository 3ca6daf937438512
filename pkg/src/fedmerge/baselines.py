"""Comparison methods on the same data/model stack: Local, FedAvg, FedAvg+FT, IFCA, FedEM-lite."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedmerge.data import ClientDataset
from fedmerge.models import ModelSpec, evaluate, local_sgd, logits_array, loss_grad_array, sgd_epochs
from fedmerge.params import STREAM_MISC, ParamVector, SeededRng
from fedmerge.reports import RoundReport, run_rounds
from fedmerge.server import ModelSoup, local_rng, sample_clients

METHODS = ("local", "fedavg", "fedavg_ft", "ifca", "fedem")


@dataclass
class BaselineConfig:
    method: str = "fedavg"
    d: int = 1
    finetune_epochs: int = 0
    rounds: int = 500
    clients_per_round: int | None = None
    eta_loc: float = 0.01
    local_epochs: int = 2
    batch_size: int = 64
    seed: int = 0
    # split used by IFCA to pick a cluster model
    ifca_split: str = "train"

    def validate(self, m: int, allow_single: bool = False) -> None:
        """``allow_single`` admits d=1 for ifca/fedem (used by the reduction checks)."""
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.method in ("ifca", "fedem") and self.d < 2 and not allow_single:
            raise ValueError(f"{self.method} needs d >= 2")
        if self.d < 1 or self.finetune_epochs < 0 or self.rounds < 0:
            raise ValueError("d >= 1, finetune_epochs >= 0 and rounds >= 0 required")
        k = self.participants(m)
        if not 0 < k <= m:
            raise ValueError(f"clients_per_round must be in (0, {m}]")
        if self.eta_loc <= 0 or self.local_epochs < 1 or self.batch_size < 1:
            raise ValueError("eta_loc > 0, local_epochs >= 1 and batch_size >= 1 required")
        if self.ifca_split not in ("train", "val"):
            raise ValueError("ifca_split must be 'train' or 'val'")

    def participants(self, m: int) -> int:
        return m if self.clients_per_round is None else self.clients_per_round


def weighted_model_average(models: Sequence[np.ndarray], sizes: Sequence[int]) -> np.ndarray:
    total = float(sum(sizes))
    out = np.zeros_like(models[0])
    for model, n in zip(models, sizes):
        out += (n / total) * model
    return out


def _batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


class _Base:
    name = "base"

    def __init__(self, clients: Sequence[ClientDataset], spec: ModelSpec, cfg: BaselineConfig):
        cfg.validate(len(clients), allow_single=True)
        self.clients = clients
        self.spec = spec
        self.cfg = cfg
        self.sizes = [c.n_train for c in clients]

    def _selected(self, round_index: int, report: RoundReport) -> list[int]:
        chosen = sample_clients(len(self.clients), self.cfg.participants(len(self.clients)), self.cfg.seed, round_index)
        report.selected_clients = chosen
        active = []
        for i in chosen:
            if self.sizes[i] == 0:
                report.skipped.append(i)
                report.warnings.append(f"client {i} has an empty train split; skipped")
            else:
                active.append(i)
        return active

    def _train(self, theta: ParamVector, i: int, round_index: int) -> ParamVector:
        trained, _ = local_sgd(
            self.spec, theta, self.clients[i], self.cfg.eta_loc, self.cfg.local_epochs, self.cfg.batch_size,
            local_rng(self.cfg.seed, round_index, i),
        )
        return trained

    def _grad_evals(self, active: Sequence[int], per_model: int = 1) -> float:
        return float(per_model * self.cfg.local_epochs * sum(_batches(self.sizes[i], self.cfg.batch_size) for i in active))


class FedAvgTrainer(_Base):
    """Weighted averaging of locally trained models, optional local fine-tuning at evaluation."""

    name = "fedavg"

    def __init__(self, clients, spec, cfg):
        super().__init__(clients, spec, cfg)
        self.model = ModelSoup.random(spec.layout, 1, cfg.seed)[0]
        self._ft_cache: dict[int, ParamVector] = {}
        if cfg.finetune_epochs:
            self.name = "fedavg_ft"

    def step(self, round_index: int) -> RoundReport:
        report = RoundReport(round=round_index)
        self._round = round_index
        self._ft_cache.clear()
        active = self._selected(round_index, report)
        trained = [self._train(self.model, i, round_index) for i in active]
        t0 = time.perf_counter()
        if trained:
            new = weighted_model_average([t.values for t in trained], [self.sizes[i] for i in active])
            self.model = ParamVector(new, self.spec.layout)
        report.diagnostics = {
            "server_time": time.perf_counter() - t0,
            "max_theta_norm": self.model.norm(),
            "client_grad_evals": self._grad_evals(active),
        }
        return report

    def client_model(self, client: int) -> ParamVector:
        if not self.cfg.finetune_epochs or self.sizes[client] == 0:
            return self.model
        if client not in self._ft_cache:
            x, y = self.clients[client].split_arrays("train")
            gen = SeededRng(self.cfg.seed, STREAM_MISC).child(getattr(self, "_round", 0), client).generator
            tuned = sgd_epochs(self.spec, self.model.values, x, y, self.cfg.eta_loc, self.cfg.finetune_epochs, self.cfg.batch_size, gen)
            self._ft_cache[client] = ParamVector(tuned, self.spec.layout)
        return self._ft_cache[client]

    def client_eval(self, client: int, split: str) -> tuple[float, float]:
        return evaluate(self.spec, self.client_model(client), self.clients[client].batch(split))


class LocalTrainer(_Base):
    """Every client trains its own model; nothing is shared."""

    name = "local"

    def __init__(self, clients, spec, cfg):
        super().__init__(clients, spec, cfg)
        init = ModelSoup.random(spec.layout, 1, cfg.seed)[0]
        self.models = [init for _ in clients]

    def step(self, round_index: int) -> RoundReport:
        report = RoundReport(round=round_index)
        active = [i for i, n in enumerate(self.sizes) if n > 0]
        report.selected_clients = active
        for i in active:
            self.models[i] = self._train(self.models[i], i, round_index)
        report.diagnostics = {"server_time": 0.0, "client_grad_evals": self._grad_evals(active)}
        return report

    def client_eval(self, client: int, split: str) -> tuple[float, float]:
        return evaluate(self.spec, self.models[client], self.clients[client].batch(split))


class IFCATrainer(_Base):
    """Clients join the soup model with the lowest loss and train only that one."""

    name = "ifca"

    def __init__(self, clients, spec, cfg):
        super().__init__(clients, spec, cfg)
        self.soup = ModelSoup.random(spec.layout, cfg.d, cfg.seed)
        self.assignment = [-1] * len(clients)

    def choose(self, client: int) -> int:
        x, y = self.clients[client].split_arrays(self.cfg.ifca_split)
        if x.shape[0] == 0:
            x, y = self.clients[client].split_arrays("train")
        losses = [loss_grad_array(self.spec, self.soup[j].values, x, y)[0] for j in range(self.soup.d)]
        # np.argmin returns the first minimum: ties go to the lowest index
        return int(np.argmin(losses))

    def step(self, round_index: int) -> RoundReport:
        report = RoundReport(round=round_index)
        active = self._selected(round_index, report)
        groups: dict[int, list[tuple[int, ParamVector]]] = {}
        for i in active:
            j = self.choose(i)
            self.assignment[i] = j
            groups.setdefault(j, []).append((i, self._train(self.soup[j], i, round_index)))
        t0 = time.perf_counter()
        for j, members in sorted(groups.items()):
            new = weighted_model_average([t.values for _, t in members], [self.sizes[i] for i, _ in members])
            self.soup.replace(j, ParamVector(new, self.spec.layout))
        report.diagnostics = {
            "server_time": time.perf_counter() - t0,
            "max_theta_norm": float(self.soup.norms().max()),
            "client_grad_evals": self._grad_evals(active),
            "empty_clusters": float(self.soup.d - len(groups)),
        }
        return report

    def client_eval(self, client: int, split: str) -> tuple[float, float]:
        return evaluate(self.spec, self.soup[self.choose(client)], self.clients[client].batch(split))

    def weight_matrix(self) -> np.ndarray:
        w = np.zeros((len(self.clients), self.soup.d))
        for i, j in enumerate(self.assignment):
            if j >= 0:
                w[i, j] = 1.0
        return w


class FedEMTrainer(_Base):
    """Loss-softmax responsibilities over d shared models ("fedem-lite").

    Each client trains every model with gradients scaled by its responsibility
    and predicts with the responsibility-weighted logit ensemble, so client
    cost grows linearly with d.
    """

    name = "fedem-lite"

    def __init__(self, clients, spec, cfg):
        super().__init__(clients, spec, cfg)
        self.soup = ModelSoup.random(spec.layout, cfg.d, cfg.seed)
        self.resp = np.full((len(clients), cfg.d), 1.0 / cfg.d)

    def responsibilities(self, client: int) -> np.ndarray:
        x, y = self.clients[client].split_arrays("train")
        if x.shape[0] == 0:
            return np.full(self.soup.d, 1.0 / self.soup.d)
        losses = np.array([loss_grad_array(self.spec, self.soup[j].values, x, y)[0] for j in range(self.soup.d)])
        e = np.exp(-(losses - losses.min()))
        return e / e.sum()

    def step(self, round_index: int) -> RoundReport:
        report = RoundReport(round=round_index)
        active = self._selected(round_index, report)
        updates = []
        for i in active:
            r = self.responsibilities(i)
            self.resp[i] = r
            x, y = self.clients[i].split_arrays("train")
            base = local_rng(self.cfg.seed, round_index, i)
            deltas = []
            for j in range(self.soup.d):
                trained = sgd_epochs(
                    self.spec, self.soup[j].values, x, y, self.cfg.eta_loc, self.cfg.local_epochs, self.cfg.batch_size,
                    base.child(j).generator, grad_scale=r[j],
                )
                deltas.append(trained - self.soup[j].values)
            updates.append((i, r, deltas))
        t0 = time.perf_counter()
        if updates:
            for j in range(self.soup.d):
                mass = sum(self.sizes[i] * r[j] for i, r, _ in updates)
                if mass <= 0:
                    continue
                acc = np.zeros(self.spec.num_params)
                for i, r, deltas in updates:
                    acc += (self.sizes[i] * r[j] / mass) * deltas[j]
                self.soup.replace(j, ParamVector(self.soup[j].values + acc, self.spec.layout))
        report.diagnostics = {
            "server_time": time.perf_counter() - t0,
            "max_theta_norm": float(self.soup.norms().max()),
            "client_grad_evals": self._grad_evals(active, per_model=self.soup.d),
        }
        return report

    def client_eval(self, client: int, split: str) -> tuple[float, float]:
        r = self.responsibilities(client)
        batch = self.clients[client].batch(split)
        logits = sum(r[j] * logits_array(self.spec, self.soup[j].values, batch.features) for j in range(self.soup.d))
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = -float(logp[np.arange(len(batch)), batch.labels].mean())
        return loss, float(np.mean(np.argmax(logits, axis=1) == batch.labels))

    def weight_matrix(self) -> np.ndarray:
        return self.resp.copy()


def make_trainer(clients: Sequence[ClientDataset], spec: ModelSpec, cfg: BaselineConfig):
    cfg.validate(len(clients))
    if cfg.method in ("fedavg", "fedavg_ft"):
        if cfg.method == "fedavg" and cfg.finetune_epochs:
            raise ValueError("finetune_epochs only applies to fedavg_ft")
        return FedAvgTrainer(clients, spec, cfg)
    return {"local": LocalTrainer, "ifca": IFCATrainer, "fedem": FedEMTrainer}[cfg.method](clients, spec, cfg)


def _run(method: str, clients, spec, cfg: BaselineConfig, eval_every: int = 1) -> list[RoundReport]:
    if cfg.method != method:
        raise ValueError(f"config is for {cfg.method!r}, not {method!r}")
    return run_rounds(make_trainer(clients, spec, cfg), clients, cfg.rounds, eval_every)


def run_fedavg(clients, spec, cfg, eval_every: int = 1) -> list[RoundReport]:
    return _run("fedavg", clients, spec, cfg, eval_every)


def run_fedavg_ft(clients, spec, cfg, eval_every: int = 1) -> list[RoundReport]:
    return _run("fedavg_ft", clients, spec, cfg, eval_every)


def run_local(clients, spec, cfg, eval_every: int = 1) -> list[RoundReport]:
    return _run("local", clients, spec, cfg, eval_every)


def run_ifca(clients, spec, cfg, eval_every: int = 1) -> list[RoundReport]:
    return _run("ifca", clients, spec, cfg, eval_every)


def run_fedem(clients, spec, cfg, eval_every: int = 1) -> list[RoundReport]:
    return _run("fedem", clients, spec, cfg, eval_every)
