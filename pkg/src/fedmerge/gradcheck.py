"""Finite-difference checks of the server update formulas.

Every formula turns one full-batch local step into a gradient estimate of the
joint objective (divide the update by ``-eta_loc``) and is compared against
central differences of :class:`JointObjective`, which merges through a plain
matrix product and shares no update code with the server.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from fedmerge.data import ClientDataset
from fedmerge.diagnostics import JointObjective
from fedmerge.models import ModelKind, ModelSpec, local_sgd, loss_grad_array
from fedmerge.params import STREAM_MISC, ParamVector, SeededRng, random_init
from fedmerge.server import (
    MergeWeights,
    ModelSoup,
    WeightMode,
    local_rng,
    merge,
    soup_update,
    update_weights_softmax,
    update_weights_unconstrained,
)

TOLERANCE = 1e-5
FD_STEP = 1e-6
ETA_LOC = 0.05


@dataclass
class Case:
    """One small random instance after a single full-batch local step."""

    spec: ModelSpec
    clients: list[ClientDataset]
    soup: ModelSoup
    weights: MergeWeights
    merged: list[ParamVector]
    deltas: list[tuple[int, ParamVector]]
    sizes: list[int]
    eta: float

    @property
    def objective(self) -> JointObjective:
        return JointObjective(self.clients, self.spec, self.soup.d, self.weights.mode)


def make_case(spec: ModelSpec, m: int, d: int, mode: WeightMode | str, seed: int, samples: int = 6) -> Case:
    mode = WeightMode(mode)
    gen = SeededRng(seed, STREAM_MISC).child(0x6C, m, d).generator
    clients = []
    for i in range(m):
        n = samples + i
        x = gen.normal(size=(n, spec.input_dim))
        y = gen.integers(0, spec.num_classes, size=n)
        clients.append(ClientDataset(x, y, {"train": np.arange(n), "val": [], "test": []}, cluster_id=None))
    base = SeededRng(seed, STREAM_MISC).child(0x50)
    soup = ModelSoup([
        ParamVector(random_init(spec.layout, base.child(j)).values + 0.1 * gen.normal(size=spec.num_params), spec.layout)
        for j in range(d)
    ])
    if mode is WeightMode.SOFTMAX:
        logits = gen.normal(size=(m, d))
    else:
        logits = 1.0 / d + 0.3 * gen.normal(size=(m, d))
    weights = MergeWeights(logits, mode)
    merged, deltas = [], []
    for i, c in enumerate(clients):
        theta = merge(soup, weights, i)
        _, delta = local_sgd(spec, theta, c, ETA_LOC, 1, c.n_train, local_rng(seed, 1, i))
        merged.append(theta)
        deltas.append((i, delta))
    return Case(spec, clients, soup, weights, merged, deltas, [c.n_train for c in clients], ETA_LOC)


# Each formula maps a case to a gradient estimate; the reference is fixed per name.
Formula = Callable[[Case], np.ndarray]


def theta_update(case: Case) -> np.ndarray:
    upd = soup_update(case.soup, case.weights, case.deltas, case.sizes)
    return np.stack([u.values for u in upd]) / -case.eta


def unconstrained_weights(case: Case) -> np.ndarray:
    return update_weights_unconstrained(case.soup, case.weights, case.deltas, case.sizes, head_only=False) / -case.eta


def softmax_logits(case: Case) -> np.ndarray:
    upd = update_weights_softmax(case.soup, case.weights, case.merged, case.deltas, case.sizes, head_only=False)
    return upd / -case.eta


def local_gradient(case: Case) -> np.ndarray:
    return np.stack([
        loss_grad_array(case.spec, case.merged[i].values, *c.split_arrays("train"))[1] for i, c in enumerate(case.clients)
    ])


DEFAULT_FORMULAS: dict[str, Formula] = {
    "local_gradient": local_gradient,
    "theta_update[unconstrained]": theta_update,
    "weights[unconstrained]": unconstrained_weights,
    "theta_update[softmax]": theta_update,
    "logits[softmax]": softmax_logits,
}


def central_difference(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b)) / scale


def reference(name: str, case: Case) -> np.ndarray:
    if name == "local_gradient":
        out = []
        for i, c in enumerate(case.clients):
            x, y = c.split_arrays("train")
            out.append(central_difference(lambda t: loss_grad_array(case.spec, t, x, y)[0], case.merged[i].values))
        return np.stack(out)
    obj = case.objective
    fd = central_difference(obj.value, obj.pack(case.soup, case.weights))
    thetas, logits = obj.unpack(fd)
    return thetas if name.startswith("theta_update") else logits


def _mode_of(name: str) -> WeightMode:
    return WeightMode.UNCONSTRAINED if "unconstrained" in name else WeightMode.SOFTMAX


def default_specs() -> list[ModelSpec]:
    return [
        ModelSpec(kind=ModelKind.LOGISTIC, input_dim=5, num_classes=3),
        ModelSpec(kind=ModelKind.MLP, input_dim=4, num_classes=3, hidden_dim=5),
    ]


SHAPES = ((2, 2), (3, 3), (2, 3), (3, 2))


def run_gradcheck(
    formulas: dict[str, Formula] | None = None,
    specs: Sequence[ModelSpec] | None = None,
    shapes: Sequence[tuple[int, int]] = SHAPES,
    seed: int = 0,
) -> dict[str, float]:
    """Worst relative error of every formula over all instances."""
    formulas = dict(DEFAULT_FORMULAS if formulas is None else formulas)
    specs = list(default_specs() if specs is None else specs)
    worst = {name: 0.0 for name in formulas}
    for spec in specs:
        if spec.num_params > 60:
            raise ValueError(f"gradcheck instances need P <= 60, got {spec.num_params}")
        for m, d in shapes:
            if m > 3 or d > 3:
                raise ValueError("gradcheck instances need m <= 3 and d <= 3")
            cases = {mode: make_case(spec, m, d, mode, seed) for mode in WeightMode}
            for name, fn in formulas.items():
                case = cases[_mode_of(name)]
                worst[name] = max(worst[name], relative_error(fn(case), reference(name, case)))
    return worst


def failures(worst: dict[str, float], tol: float = TOLERANCE) -> list[str]:
    return [name for name, err in worst.items() if not err <= tol]
