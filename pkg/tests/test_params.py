from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import flat_layout, vec
from fedmerge.params import (
    InitScheme,
    LayerLayout,
    LayoutMismatchError,
    ParamVector,
    SeededRng,
    axpy,
    dot,
    from_bytes,
    load_vector,
    random_init,
    save_vector,
    to_bytes,
)


def test_axpy_examples():
    assert axpy(0.0, vec([9.0, -3.0]), vec([1.0, 2.0])).values.tolist() == [1.0, 2.0]
    assert axpy(1.0, vec([1.0, 0.0]), vec([0.0, 1.0])).values.tolist() == [1.0, 1.0]
    assert axpy(0.5, vec([2.0, 4.0]), vec([1.0, 1.0])).values.tolist() == [2.0, 3.0]


def test_axpy_leaves_inputs_alone():
    x, y = vec([1.0, 2.0]), vec([3.0, 4.0])
    axpy(2.0, x, y)
    assert x.values.tolist() == [1.0, 2.0] and y.values.tolist() == [3.0, 4.0]
    with pytest.raises(ValueError):
        x.values[0] = 5.0


def test_layout_mismatch():
    with pytest.raises(LayoutMismatchError):
        axpy(1.0, vec([1.0, 2.0]), vec([1.0, 2.0, 3.0]))
    with pytest.raises(LayoutMismatchError):
        dot(vec([1.0]), vec([1.0, 2.0]))


def test_dot_examples():
    assert dot(vec([1.0, 0.0]), vec([0.0, 1.0])) == 0.0
    assert dot(vec([1.0, 2.0]), vec([1.0, 2.0])) == 5.0
    layout = flat_layout(3, head=1)
    assert dot(vec([1.0, 2.0, 3.0], layout), vec([1.0, 1.0, 2.0], layout), restrict_to_head=True) == 6.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=30), st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_head_dot_matches_loop(xs, head, seed):
    head = min(head, len(xs))
    layout = flat_layout(len(xs), head=head)
    ys = np.random.default_rng(seed).normal(size=len(xs))
    total = 0.0
    for k in range(len(xs) - head, len(xs)):
        total += xs[k] * ys[k]
    assert dot(vec(xs, layout), vec(ys, layout), restrict_to_head=True) == total


def test_dot_is_sequential():
    # a pairwise sum would give 1.0 here; left to right loses the 1.0 entirely
    x = vec([1e16, 1.0, -1e16, 1.0])
    y = vec([1.0, 1.0, 1.0, 1.0])
    expected = 0.0
    for a in x.values:
        expected += a
    assert dot(x, y) == expected


def test_non_finite_rejected():
    with pytest.raises(FloatingPointError):
        vec([1.0, np.nan])
    with pytest.raises(FloatingPointError):
        vec([np.inf, 0.0])


def test_layout_validation():
    layout = LayerLayout.from_shapes([("w", (3, 2)), ("b", (2,))])
    assert layout.size == 8 and layout.head_range == (6, 2)
    assert LayerLayout.from_json(layout.to_json()) == layout
    with pytest.raises(ValueError):
        ParamVector(np.zeros(7), layout)


def test_init_determinism_and_streams():
    layout = LayerLayout.from_shapes([("w", (20, 10)), ("b", (10,))])
    a = random_init(layout, SeededRng(3, 1))
    b = random_init(layout, SeededRng(3, 1))
    c = random_init(layout, SeededRng(3, 2))
    assert np.array_equal(a.values, b.values)
    assert not np.array_equal(a.values, c.values)
    assert not np.any(random_init(layout, SeededRng(3, 1), InitScheme.ZEROS).values)


def test_init_statistics():
    # 100 x 100 weight block: U(-r, r) with r = sqrt(6 / 200), so sd = r / sqrt(3)
    layout = LayerLayout.from_shapes([("w", (100, 100))])
    v = random_init(layout, SeededRng(0, 1)).values
    r = np.sqrt(6.0 / 200.0)
    sigma = r / np.sqrt(3.0)
    assert abs(v.mean()) < 3 * sigma / np.sqrt(v.size)
    assert np.abs(v).max() <= r
    assert abs(v.std() - sigma) / sigma < 0.02


def test_serialization_round_trip(tmp_path):
    layout = LayerLayout.from_shapes([("w", (4, 3)), ("b", (3,))])
    v = random_init(layout, SeededRng(1, 1))
    blob = to_bytes(v)
    assert len(blob) == 8 + 8 * 15
    assert int.from_bytes(blob[:8], "little") == 15
    assert np.array_equal(from_bytes(blob, layout).values, v.values)
    save_vector(v, tmp_path / "v.bin")
    assert np.array_equal(load_vector(tmp_path / "v.bin", layout).values, v.values)
    with pytest.raises(ValueError):
        from_bytes(blob[:-1], layout)


def test_rng_children_are_independent_of_parent_use():
    parent = SeededRng(5, 3)
    first = parent.child(1, 2).generator.normal(size=3)
    parent.generator.normal(size=100)
    assert np.array_equal(parent.child(1, 2).generator.normal(size=3), first)
