from __future__ import annotations

import numpy as np
import pytest

from fedmerge.data import ClientDataset, ClusterTruthSpec, FederationSpec, gen_cluster_noniid
from fedmerge.diagnostics import (
    JointObjective,
    descent_check,
    estimate_smoothness,
    fit_rate_curve,
    soup_smoothness,
)
from fedmerge.gradcheck import central_difference
from fedmerge.models import ModelSpec
from fedmerge.params import ParamVector, SeededRng
from fedmerge.server import MergeWeights, ModelSoup, WeightMode


def test_smoothness_on_quadratic():
    gen = np.random.default_rng(0)
    q, _ = np.linalg.qr(gen.normal(size=(30, 30)))
    eig = np.linspace(0.1, 7.0, 30)
    H = q @ np.diag(eig) @ q.T
    L = estimate_smoothness(lambda x: H @ x, gen.normal(size=30), probes=20, rng=SeededRng(1))
    assert abs(L - 7.0) / 7.0 <= 0.10
    assert L <= 7.0 * (1 + 1e-9)


def test_smoothness_guards():
    # a constant gradient collapses the power iteration; the zero direction is redrawn
    L = estimate_smoothness(lambda x: np.ones_like(x), np.zeros(4), probes=5, rng=SeededRng(0))
    assert L == 0.0
    with pytest.raises(ValueError):
        estimate_smoothness(lambda x: x, np.zeros(3), probes=1)


def test_fit_rate_curve_recovers_parameters():
    T = np.arange(1, 101)
    c, plateau = fit_rate_curve(3.0 / (T * 4) + 0.25, d=4)
    assert c == pytest.approx(3.0) and plateau == pytest.approx(0.25)


@pytest.mark.parametrize("mode", list(WeightMode))
def test_joint_objective_gradient(mode):
    spec = ModelSpec(kind="mlp", input_dim=3, num_classes=3, hidden_dim=4, activation="tanh")
    gen = np.random.default_rng(2)
    clients = []
    for n in (5, 8):
        clients.append(ClientDataset(gen.normal(size=(n, 3)), gen.integers(0, 3, n), {"train": np.arange(n)}))
    obj = JointObjective(clients, spec, 2, mode)
    x = gen.normal(size=obj.size) * 0.5
    _, g = obj.value_and_grad(x)
    fd = central_difference(obj.value, x)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-7


def _zero_gradient_fixture():
    spec = ModelSpec(kind="logistic", input_dim=2, num_classes=2)
    labels = np.array([0, 1, 0, 1])
    clients = [ClientDataset(np.zeros((4, 2)), labels, {"train": np.arange(4)}) for _ in range(3)]
    zero = ParamVector(np.zeros(spec.num_params), spec.layout)
    return spec, clients, ModelSoup([zero, zero]), MergeWeights.uniform(3, 2)


def test_zero_gradient_fixture():
    spec, clients, soup, weights = _zero_gradient_fixture()
    report = descent_check(clients, spec, soup, weights, eta=0.5, rounds=10, smoothness=1.0)
    assert report.running_avg == [0.0] * 10
    assert all(r.objective == r.next_objective == r.descent_bound for r in report.rounds)
    assert report.violation_fraction == 0.0


def _mlp_problem(seed: int):
    clients = gen_cluster_noniid(FederationSpec(m=12, K=3, seed=seed), ClusterTruthSpec())
    return clients, ModelSpec(kind="mlp", input_dim=10, num_classes=4, hidden_dim=32)


def _descent(clients, spec, d, seed, mult, rounds=100):
    soup = ModelSoup.random(spec.layout, d, seed)
    weights = MergeWeights.uniform(len(clients), d)
    L = soup_smoothness(clients, spec, soup, weights, 30, SeededRng(seed, 4))
    return descent_check(clients, spec, soup, weights, mult / L, rounds, L, seed)


def test_descent_small_step_holds():
    clients, spec = _mlp_problem(0)
    report = _descent(clients, spec, 4, 0, 0.1)
    assert report.violation_fraction <= 0.05
    # the per-round objective decreases when the bound holds
    assert report.rounds[-1].next_objective < report.rounds[0].objective


@pytest.mark.parametrize("seed", [0, 1])
def test_plateau_falls_with_d(seed):
    clients, spec = _mlp_problem(seed)
    plateaus = [_descent(clients, spec, d, seed, 0.1).fit_plateau for d in (2, 4, 8)]
    assert plateaus[0] > plateaus[1] > plateaus[2]


def test_descent_requires_softmax():
    spec, clients, soup, _ = _zero_gradient_fixture()
    with pytest.raises(ValueError):
        descent_check(clients, spec, soup, MergeWeights.uniform(3, 2, "unconstrained"), 0.1, 2, 1.0)
