"""Flat parameter vectors, layer bookkeeping and seeded random streams."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np


class LayoutMismatchError(ValueError):
    """Raised when two parameter vectors do not share a layout."""


@dataclass(frozen=True)
class Layer:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if not self.shape:
            object.__setattr__(self, "shape", (self.length,))
        if math.prod(self.shape) != self.length:
            raise ValueError(f"layer {self.name!r}: shape {self.shape} does not match length {self.length}")


@dataclass(frozen=True)
class LayerLayout:
    """Ordered, contiguous layer slices of a flat parameter vector.

    ``head_range`` is the ``(offset, length)`` slice used by head-restricted
    inner products; by default it covers the trailing ``head_layers`` layers.
    """

    layers: tuple[Layer, ...]
    head_range: tuple[int, int]

    def __post_init__(self) -> None:
        pos = 0
        for layer in self.layers:
            if layer.offset != pos or layer.length < 0:
                raise ValueError(f"layers must be contiguous; {layer.name!r} starts at {layer.offset}, expected {pos}")
            pos += layer.length
        start, length = self.head_range
        if start < 0 or length < 0 or start + length > pos:
            raise ValueError(f"head_range {self.head_range} outside [0, {pos})")

    @classmethod
    def from_shapes(cls, shapes: Sequence[tuple[str, tuple[int, ...]]], head_layers: int = 1) -> LayerLayout:
        layers = []
        offset = 0
        for name, shape in shapes:
            length = math.prod(shape)
            layers.append(Layer(name, offset, length, tuple(shape)))
            offset += length
        if not 0 <= head_layers <= len(layers):
            raise ValueError(f"head_layers={head_layers} out of range for {len(layers)} layers")
        head_start = layers[len(layers) - head_layers].offset if head_layers else offset
        return cls(tuple(layers), (head_start, offset - head_start))

    @property
    def size(self) -> int:
        return self.layers[-1].offset + self.layers[-1].length if self.layers else 0

    @property
    def head_slice(self) -> slice:
        start, length = self.head_range
        return slice(start, start + length)

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def to_json(self) -> str:
        return json.dumps(
            {
                "layers": [[l.name, l.offset, l.length, list(l.shape)] for l in self.layers],
                "head_range": list(self.head_range),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> LayerLayout:
        raw = json.loads(text)
        layers = tuple(Layer(name, int(off), int(n), tuple(shape)) for name, off, n, shape in raw["layers"])
        return cls(layers, (int(raw["head_range"][0]), int(raw["head_range"][1])))


class ParamVector:
    """Immutable float64 parameter vector tied to a :class:`LayerLayout`."""

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: LayerLayout):
        arr = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        if arr.shape[0] != layout.size:
            raise ValueError(f"vector length {arr.shape[0]} != layout size {layout.size}")
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("parameter vector contains non-finite entries")
        arr.setflags(write=False)
        self.values = arr
        self.layout = layout

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"ParamVector(P={len(self)}, head={self.layout.head_range})"

    def view(self, name: str) -> np.ndarray:
        """Read-only view of one layer, reshaped to its declared shape."""
        layer = self.layout.layer(name)
        return self.values[layer.offset : layer.offset + layer.length].reshape(layer.shape)

    @property
    def head(self) -> np.ndarray:
        return self.values[self.layout.head_slice]

    def norm(self) -> float:
        return math.sqrt(dot(self, self))

    def __sub__(self, other: ParamVector) -> ParamVector:
        return axpy(-1.0, other, self)

    def __add__(self, other: ParamVector) -> ParamVector:
        return axpy(1.0, other, self)


def _check_layout(x: ParamVector, y: ParamVector) -> None:
    if x.layout != y.layout:
        raise LayoutMismatchError(f"layout mismatch: {x.layout.size} vs {y.layout.size} parameters")


def axpy(alpha: float, x: ParamVector, y: ParamVector) -> ParamVector:
    """Return ``alpha * x + y`` as a new vector."""
    _check_layout(x, y)
    return ParamVector(alpha * x.values + y.values, y.layout)


def seq_sum(values: np.ndarray) -> float:
    # cumsum accumulates strictly left to right, unlike np.sum's pairwise scheme
    if values.shape[0] == 0:
        return 0.0
    return float(np.cumsum(values)[-1])


def dot_arrays(x: np.ndarray, y: np.ndarray) -> float:
    return seq_sum(x * y)


def dot(x: ParamVector, y: ParamVector, restrict_to_head: bool = False) -> float:
    """Inner product with a fixed ascending summation order.

    With ``restrict_to_head`` only the layout's head slice contributes.
    """
    _check_layout(x, y)
    if restrict_to_head:
        sl = x.layout.head_slice
        return dot_arrays(x.values[sl], y.values[sl])
    return dot_arrays(x.values, y.values)


def zeros(layout: LayerLayout) -> ParamVector:
    return ParamVector(np.zeros(layout.size), layout)


class SeededRng:
    """Named random stream: identical ``(seed, stream, keys)`` give identical draws.

    Streams are derived through :class:`numpy.random.SeedSequence` spawn keys,
    so children never depend on how much their parent has been consumed.
    """

    def __init__(self, seed: int, stream: int = 0, keys: tuple[int, ...] = ()):
        if seed < 0 or stream < 0:
            raise ValueError("seed and stream must be non-negative")
        self.seed = int(seed)
        self.stream = int(stream)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream, *self.keys))
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *keys: int) -> SeededRng:
        return SeededRng(self.seed, self.stream, self.keys + tuple(keys))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream={self.stream}, keys={self.keys})"


# Stream ids shared by every training method so that equal seeds give equal draws.
STREAM_INIT = 1
STREAM_SAMPLE = 2
STREAM_LOCAL = 3
STREAM_MISC = 4


class InitScheme(str, Enum):
    GLOROT_UNIFORM = "glorot_uniform"
    ZEROS = "zeros"


def random_init(layout: LayerLayout, rng: SeededRng, scheme: InitScheme | str = InitScheme.GLOROT_UNIFORM) -> ParamVector:
    """Draw a fresh parameter vector.

    Under ``glorot_uniform`` every 2-D layer of shape ``(fan_in, fan_out)`` is
    drawn from U(-r, r) with r = sqrt(6 / (fan_in + fan_out)); 1-D (bias)
    layers are zero.
    """
    scheme = InitScheme(scheme)
    values = np.zeros(layout.size)
    if scheme is InitScheme.ZEROS:
        return ParamVector(values, layout)
    gen = rng.generator
    for layer in layout.layers:
        if len(layer.shape) >= 2:
            fan_in, fan_out = layer.shape[0], math.prod(layer.shape[1:])
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            values[layer.offset : layer.offset + layer.length] = gen.uniform(-bound, bound, size=layer.length)
    return ParamVector(values, layout)


def to_bytes(vec: ParamVector) -> bytes:
    """Little-endian u64 length prefix followed by float64 values."""
    return struct.pack("<Q", len(vec)) + vec.values.astype("<f8").tobytes()


def from_bytes(data: bytes, layout: LayerLayout) -> ParamVector:
    if len(data) < 8:
        raise ValueError("truncated parameter blob")
    (n,) = struct.unpack_from("<Q", data, 0)
    if len(data) != 8 + 8 * n:
        raise ValueError(f"blob declares {n} values but holds {(len(data) - 8) / 8}")
    return ParamVector(np.frombuffer(data, dtype="<f8", offset=8, count=n), layout)


def save_vector(vec: ParamVector, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(vec))


def load_vector(path: str | Path, layout: LayerLayout) -> ParamVector:
    return from_bytes(Path(path).read_bytes(), layout)
