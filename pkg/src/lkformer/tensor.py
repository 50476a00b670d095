"""Dense float64 tensors with tape-recorded elementwise arithmetic.

Storage is a C-contiguous (row-major) numpy array.  Shapes never broadcast:
every binary op requires identical shapes.  Scalars are shape ``(1,)``.
"""
from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from . import flops
from .autograd import record

_U64 = 2 ** 64


class Rng:
    """Counter-based (Philox) generator; equal seeds give equal streams."""

    def __init__(self, seed: int, *keys: int) -> None:
        if not 0 <= int(seed) < _U64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        entropy = [self.seed, *self.keys]
        self.generator = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def derive(self, *keys: int) -> "Rng":
        """Independent child stream identified by ``keys``."""
        return Rng(self.seed, *self.keys, *keys)

    def normal(self, shape, std: float = 1.0) -> np.ndarray:
        return self.generator.standard_normal(shape) * std

    def uniform(self, low: float, high: float, shape=None):
        return self.generator.uniform(low, high, shape)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, keys={self.keys})"


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ValueError("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise ValueError(f"all dimensions must be >= 1, got {shape}")
    return shape


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False) -> None:
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        _check_shape(arr.shape)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no-copy constructor for op outputs
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(arr, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t._tape = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def strides(self) -> tuple[int, ...]:
        """Row-major element strides."""
        return tuple(s // self.data.itemsize for s in self.data.strides)

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.zeros(_check_shape(shape)))


def ones(shape: Sequence[int]) -> Tensor:
    return Tensor._wrap(np.ones(_check_shape(shape)))


def full(shape: Sequence[int], value: float) -> Tensor:
    return Tensor._wrap(np.full(_check_shape(shape), float(value)))


def zeros_like(t: Tensor) -> Tensor:
    return zeros(t.shape)


def ones_like(t: Tensor) -> Tensor:
    return ones(t.shape)


def randn(shape: Sequence[int], rng: Rng, std: float = 1.0) -> Tensor:
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    return Tensor._wrap(rng.normal(_check_shape(shape), std))


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    flops.tally(a.size)
    out = Tensor._wrap(a.data + b.data)
    return record(out, (a, b), lambda g, needs: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    flops.tally(a.size)
    out = Tensor._wrap(a.data - b.data)
    return record(out, (a, b), lambda g, needs: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    flops.tally(a.size)
    out = Tensor._wrap(a.data * b.data)

    def backward(g, needs):
        return (g * b.data if needs[0] else None, g * a.data if needs[1] else None)

    return record(out, (a, b), backward, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    flops.tally(a.size)
    out = Tensor._wrap(a.data * c)
    return record(out, (a,), lambda g, needs: (g * c,), "scale")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = Tensor._wrap(np.array([a.data.sum()]))
    return record(out, (a,), lambda g, needs: (np.full(a.shape, g[0]),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor._wrap(np.array([a.data.mean()]))
    return record(out, (a,), lambda g, needs: (np.full(a.shape, g[0] / n),), "mean")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = _check_shape(shape)
    if int(np.prod(shape)) != a.size:
        raise ValueError(f"cannot reshape {a.shape} into {shape}")
    out = Tensor._wrap(a.data.reshape(shape))
    return record(out, (a,), lambda g, needs: (g.reshape(a.shape),), "reshape")


def concat_channels(ts: Iterable[Tensor]) -> Tensor:
    """Concatenate (B, C_i, H, W) tensors along the channel axis, in order."""
    ts = list(ts)
    if not ts:
        raise ValueError("concat_channels needs at least one tensor")
    first = ts[0]
    for t in ts:
        if t.ndim != 4 or t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ValueError(f"concat_channels: incompatible shapes {first.shape} and {t.shape}")
    out = Tensor._wrap(np.concatenate([t.data for t in ts], axis=1))
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def backward(g, needs):
        return tuple(g[:, bounds[i]:bounds[i + 1]] if needs[i] else None for i in range(len(ts)))

    return record(out, ts, backward, "concat")


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if a.ndim != 4 or not 0 <= start < stop <= a.shape[1]:
        raise ValueError(f"bad channel slice [{start}:{stop}] of {a.shape}")
    out = Tensor._wrap(a.data[:, start:stop])

    def backward(g, needs):
        full_grad = np.zeros(a.shape)
        full_grad[:, start:stop] = g
        return (full_grad,)

    return record(out, (a,), backward, "slice")
