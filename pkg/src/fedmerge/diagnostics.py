"""Joint objective over (soup, merging logits), smoothness estimates and descent checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from fedmerge.data import ClientDataset
from fedmerge.models import ModelSpec, loss_grad_array
from fedmerge.params import SeededRng
from fedmerge.server import MergeWeights, ModelSoup, ServerConfig, WeightMode, server_round


def _softmax_rows(logits: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    a = logits if mask is None else np.where(mask, logits, -np.inf)
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class JointObjective:
    """``F(Theta, a) = sum_i (n_i / n) loss_i(sum_j w_ij Theta_j)`` on full train splits.

    Points are flat arrays: the d soup vectors followed by the m x d logits.
    """

    def __init__(
        self,
        clients: Sequence[ClientDataset],
        spec: ModelSpec,
        d: int,
        mode: WeightMode | str = WeightMode.SOFTMAX,
        mask: np.ndarray | None = None,
    ):
        self.spec = spec
        self.d = d
        self.mode = WeightMode(mode)
        self.mask = mask
        self.data = [c.split_arrays("train") for c in clients]
        sizes = np.array([c.n_train for c in clients], dtype=np.float64)
        self.frac = sizes / sizes.sum()
        self.m = len(clients)
        self.P = spec.num_params

    @property
    def size(self) -> int:
        return self.d * self.P + self.m * self.d

    def pack(self, soup: ModelSoup, weights: MergeWeights) -> np.ndarray:
        return np.concatenate([np.stack([t.values for t in soup.models]).reshape(-1), weights.logits.reshape(-1)])

    def unpack(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        split = self.d * self.P
        return x[:split].reshape(self.d, self.P), x[split:].reshape(self.m, self.d)

    def weight_matrix(self, logits: np.ndarray) -> np.ndarray:
        if self.mode is WeightMode.UNCONSTRAINED:
            return logits
        return _softmax_rows(logits, self.mask)

    def value(self, x: np.ndarray) -> float:
        thetas, logits = self.unpack(x)
        merged = self.weight_matrix(logits) @ thetas
        total = 0.0
        for i, (xi, yi) in enumerate(self.data):
            if xi.shape[0]:
                loss, _ = loss_grad_array(self.spec, merged[i], xi, yi)
                total += self.frac[i] * loss
        return total

    def client_grads(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        """F and the per-client gradients ``g_i = (n_i / n) grad loss_i(theta_i)``."""
        thetas, logits = self.unpack(x)
        merged = self.weight_matrix(logits) @ thetas
        g = np.zeros((self.m, self.P))
        total = 0.0
        for i, (xi, yi) in enumerate(self.data):
            if xi.shape[0]:
                loss, grad = loss_grad_array(self.spec, merged[i], xi, yi)
                total += self.frac[i] * loss
                g[i] = self.frac[i] * grad
        return total, g

    def value_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        thetas, logits = self.unpack(x)
        w = self.weight_matrix(logits)
        merged = w @ thetas
        total, g = self.client_grads(x)
        grad_thetas = w.T @ g
        if self.mode is WeightMode.UNCONSTRAINED:
            grad_logits = g @ thetas.T
        else:
            # w_ij * <g_i, Theta_j - theta_i>
            grad_logits = w * (g @ thetas.T - np.sum(g * merged, axis=1, keepdims=True))
        return total, np.concatenate([grad_thetas.reshape(-1), grad_logits.reshape(-1)])

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.value_and_grad(x)[1]


def estimate_smoothness(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    x0: np.ndarray,
    probes: int = 20,
    rng: SeededRng | None = None,
    step: float = 1e-3,
) -> float:
    """Largest observed ``|grad(u) - grad(v)| / |u - v|`` over probe pairs around ``x0``.

    The first probe direction is random; each later one follows the previous
    gradient difference, which is a power iteration on the local Hessian.
    """
    if probes < 2:
        raise ValueError("need at least two probes")
    gen = (rng or SeededRng(0)).generator
    x0 = np.asarray(x0, dtype=np.float64)
    g0 = grad_fn(x0)
    direction = gen.normal(size=x0.shape)
    best = 0.0
    for _ in range(probes):
        for _attempt in range(100):
            nrm = float(np.linalg.norm(direction))
            if nrm > 0:
                v = x0 + (step / nrm) * direction
                gap = float(np.linalg.norm(v - x0))
                if gap > 0:
                    break
            direction = gen.normal(size=x0.shape)
        else:
            raise RuntimeError("could not draw a distinct probe pair")
        diff = grad_fn(v) - g0
        best = max(best, float(np.linalg.norm(diff)) / gap)
        direction = diff
    return best


@dataclass
class DescentRound:
    round: int
    objective: float
    next_objective: float
    star: float
    sum_g_sq: float
    c_theta: float
    descent_bound: float
    boxed_bound: float
    descent_violated: bool
    boxed_violated: bool


@dataclass
class DescentReport:
    eta: float
    smoothness: float
    d: int = 1
    rounds: list[DescentRound] = field(default_factory=list)
    running_avg: list[float] = field(default_factory=list)
    fit_c: float = float("nan")
    fit_plateau: float = float("nan")

    @property
    def violation_fraction(self) -> float:
        return float(np.mean([r.descent_violated for r in self.rounds])) if self.rounds else 0.0

    @property
    def boxed_violation_fraction(self) -> float:
        return float(np.mean([r.boxed_violated for r in self.rounds])) if self.rounds else 0.0


def descent_config(d: int, eta: float, clients: Sequence[ClientDataset], seed: int = 0) -> ServerConfig:
    """Server settings under which one round is one full gradient step of size ``eta``."""
    return ServerConfig(
        d=d,
        eta_theta=1.0,
        eta_w=1.0,
        weight_mode=WeightMode.SOFTMAX,
        head_only_dot=False,
        normalize_w_grad=False,
        clients_per_round=None,
        eta_loc=eta,
        local_epochs=1,
        batch_size=max(c.n_train for c in clients),
        seed=seed,
    )


def fit_rate_curve(running_avg: Sequence[float], d: int) -> tuple[float, float]:
    """Least-squares fit of ``running_avg[T-1] ~ c / (T d) + plateau``."""
    T = np.arange(1, len(running_avg) + 1, dtype=np.float64)
    basis = np.stack([1.0 / (T * d), np.ones_like(T)], axis=1)
    (c, plateau), *_ = np.linalg.lstsq(basis, np.asarray(running_avg, dtype=np.float64), rcond=None)
    return float(c), float(plateau)


def descent_check(
    clients: Sequence[ClientDataset],
    spec: ModelSpec,
    soup: ModelSoup,
    weights: MergeWeights,
    eta: float,
    rounds: int,
    smoothness: float,
    seed: int = 0,
) -> DescentReport:
    """Run full-gradient FedMerge rounds and test the per-round descent bound.

    A round violates the bound when
    ``F_next > F - eta * max(0, 1 - eta L / 2) * star + tol`` where ``star`` is
    the measured squared norm of the joint gradient. The looser constant form
    ``(m + d C^2) * sum_i |g_i|^2`` in place of ``star`` is tracked alongside.
    ``soup`` and ``weights`` are advanced in place.
    """
    if weights.mode is not WeightMode.SOFTMAX:
        raise ValueError("descent check runs in softmax mode")
    cfg = descent_config(soup.d, eta, clients, seed)
    obj = JointObjective(clients, spec, soup.d, WeightMode.SOFTMAX, weights.mask)
    report = DescentReport(eta=eta, smoothness=smoothness, d=soup.d)
    m, d = len(clients), soup.d
    coef = eta * (1.0 - eta * smoothness / 2.0)
    total_g = 0.0
    for t in range(1, rounds + 1):
        x = obj.pack(soup, weights)
        f, grad = obj.value_and_grad(x)
        _, g = obj.client_grads(x)
        star = float(np.dot(grad, grad))
        sum_g_sq = float(np.sum(g * g))
        c_theta = float(max(np.linalg.norm(soup[j].values) for j in range(d)))
        server_round(soup, weights, clients, spec, cfg, t)
        f_next = obj.value(obj.pack(soup, weights))
        tol = 1e-10 * max(1.0, abs(f))
        descent_bound = f - max(0.0, coef) * star
        boxed_bound = f - coef * (m + d * c_theta**2) * sum_g_sq
        report.rounds.append(
            DescentRound(
                t, f, f_next, star, sum_g_sq, c_theta, descent_bound, boxed_bound,
                f_next > descent_bound + tol, f_next > boxed_bound + tol,
            )
        )
        total_g += sum_g_sq
        report.running_avg.append(total_g / t)
    if report.running_avg:
        report.fit_c, report.fit_plateau = fit_rate_curve(report.running_avg, d)
    return report


def soup_smoothness(
    clients: Sequence[ClientDataset], spec: ModelSpec, soup: ModelSoup, weights: MergeWeights, probes: int, rng: SeededRng
) -> float:
    obj = JointObjective(clients, spec, soup.d, weights.mode, weights.mask)
    return estimate_smoothness(obj.grad, obj.pack(soup, weights), probes, rng)

