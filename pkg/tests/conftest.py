from __future__ import annotations

import numpy as np
import pytest

from fedmerge.data import ClientDataset, ClusterTruthSpec, FederationSpec, gen_cluster_noniid
from fedmerge.models import ModelSpec
from fedmerge.params import LayerLayout, ParamVector


def flat_layout(n: int, head: int = 0) -> LayerLayout:
    """Layout with a body layer and a trailing head layer of ``head`` entries."""
    shapes = [("body", (n - head,)), ("head", (head,))] if head else [("body", (n,))]
    return LayerLayout.from_shapes(shapes, head_layers=1)


def vec(values, layout: LayerLayout | None = None) -> ParamVector:
    values = np.asarray(values, dtype=np.float64)
    return ParamVector(values, layout or flat_layout(values.size))


def tiny_client(n: int, input_dim: int, num_classes: int, gen: np.random.Generator, cluster_id: int | None = None) -> ClientDataset:
    """Client whose rows are all in the train split."""
    x = gen.normal(size=(n, input_dim))
    y = gen.integers(0, num_classes, size=n)
    return ClientDataset(x, y, {"train": np.arange(n), "val": [], "test": []}, cluster_id)


@pytest.fixture(scope="session")
def cluster_clients() -> list[ClientDataset]:
    return gen_cluster_noniid(FederationSpec(m=6, K=3, sizes=60, seed=0), ClusterTruthSpec())


@pytest.fixture(scope="session")
def logistic_spec() -> ModelSpec:
    return ModelSpec(kind="logistic", input_dim=10, num_classes=4)


# one line per acceptance criterion, printed after the run whatever the capture mode
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record():
    def _record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
