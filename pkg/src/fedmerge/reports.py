"""Per-round reports and the evaluation loop shared by every method."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from fedmerge.data import SPLITS, ClientDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClientMetrics:
    loss: float
    acc: float
    n: int


@dataclass
class RoundReport:
    round: int
    selected_clients: list[int] = field(default_factory=list)
    # split -> one entry per client (empty when the round was not evaluated)
    per_client: dict[str, list[ClientMetrics]] = field(default_factory=dict)
    weighted_avg: dict[str, dict[str, float]] = field(default_factory=dict)
    diagnostics: dict[str, float] = field(default_factory=dict)
    skipped: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    weights: np.ndarray | None = None

    @property
    def evaluated(self) -> bool:
        return bool(self.per_client)


def weighted_average(entries: Sequence[ClientMetrics]) -> dict[str, float]:
    total = sum(e.n for e in entries)
    if total == 0:
        return {"loss": float("nan"), "acc": float("nan"), "n": 0}
    return {
        "loss": sum(e.loss * e.n for e in entries) / total,
        "acc": sum(e.acc * e.n for e in entries) / total,
        "n": total,
    }


class Trainer(Protocol):
    """What the training loop needs from a federated method."""

    name: str

    def step(self, round_index: int) -> RoundReport: ...

    def client_eval(self, client: int, split: str) -> tuple[float, float]: ...


def evaluate_clients(
    eval_fn: Callable[[int, str], tuple[float, float]], clients: Sequence[ClientDataset], report: RoundReport
) -> RoundReport:
    for split in SPLITS:
        rows = []
        for i, c in enumerate(clients):
            n = c.split_size(split)
            if n == 0:
                rows.append(ClientMetrics(float("nan"), float("nan"), 0))
                continue
            loss, acc = eval_fn(i, split)
            rows.append(ClientMetrics(loss, acc, n))
        report.per_client[split] = rows
        report.weighted_avg[split] = weighted_average([r for r in rows if r.n > 0])
    return report


def run_rounds(
    trainer: Trainer,
    clients: Sequence[ClientDataset],
    rounds: int,
    eval_every: int = 1,
    on_report: Callable[[RoundReport], None] | None = None,
) -> list[RoundReport]:
    """Evaluate at round 0, then train ``rounds`` rounds.

    Round r's report describes the state after r rounds of training. The final
    round is always evaluated.
    """
    if rounds < 0 or eval_every < 1:
        raise ValueError("rounds must be >= 0 and eval_every >= 1")
    init = evaluate_clients(trainer.client_eval, clients, RoundReport(round=0))
    init.weights = _weights_of(trainer)
    reports = [init]
    if on_report:
        on_report(init)
    for r in range(1, rounds + 1):
        rep = trainer.step(r)
        if r % eval_every == 0 or r == rounds:
            evaluate_clients(trainer.client_eval, clients, rep)
        rep.weights = _weights_of(trainer)
        for msg in rep.warnings:
            log.warning("%s round %d: %s", trainer.name, r, msg)
        reports.append(rep)
        if on_report:
            on_report(rep)
    return reports


def _weights_of(trainer: Trainer) -> np.ndarray | None:
    getter = getattr(trainer, "weight_matrix", None)
    return None if getter is None else getter()


def best_round(reports: Sequence[RoundReport]) -> RoundReport:
    """Evaluated round with the lowest weighted validation loss (earliest on ties)."""
    evaluated = [r for r in reports if r.evaluated]
    if not evaluated:
        raise ValueError("no evaluated rounds")
    return min(evaluated, key=lambda r: (_nan_last(r.weighted_avg["val"]["loss"]), r.round))


def _nan_last(x: float) -> float:
    return float("inf") if np.isnan(x) else x
