"""Tape-based reverse-mode differentiation and a finite-difference checker.

Operations executed inside ``with Tape() as tape:`` are appended to the tape
when at least one of their inputs requires a gradient.  ``tape.backward(loss)``
walks the entries in reverse once and leaves ``dloss/dleaf`` in ``leaf.grad``.
A tape can be consumed only once.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray, tuple], tuple]

_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


@dataclass
class Entry:
    out: object
    inputs: tuple
    backward: BackwardFn
    kind: str


class Tape:
    """Ordered record of differentiable operations (define-by-run)."""

    def __init__(self) -> None:
        self.entries: list[Entry] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise RuntimeError("tape already consumed; record a new one")
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, out, inputs: tuple, backward: BackwardFn, kind: str) -> None:
        if self.consumed:
            raise RuntimeError("cannot record onto a consumed tape")
        self.entries.append(Entry(out, inputs, backward, kind))

    def backward(self, loss) -> None:
        if self.consumed:
            raise RuntimeError("backward already ran on this tape")
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if getattr(loss, "_tape", None) is not self:
            raise ValueError("loss was not recorded on this tape")
        self.consumed = True

        produced = {id(e.out) for e in self.entries}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, object] = {}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            needs = tuple(t.requires_grad for t in entry.inputs)
            in_grads = entry.backward(g, needs)
            for t, need, gi in zip(entry.inputs, needs, in_grads):
                if not need or gi is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
        # drop references so intermediates can be freed
        self.entries = []


def record(out, inputs: Sequence, backward: BackwardFn, kind: str):
    """Attach ``out`` to the active tape if any input needs a gradient."""
    tape = active_tape()
    if tape is None:
        return out
    inputs = tuple(inputs)
    if not any(t.requires_grad for t in inputs):
        return out
    out.requires_grad = True
    out._tape = tape
    tape.append(out, inputs, backward, kind)
    return out


def backward(loss) -> None:
    """Run reverse-mode differentiation from a scalar ``loss``."""
    tape = getattr(loss, "_tape", None)
    if tape is None:
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        raise ValueError("loss is not connected to any tape")
    tape.backward(loss)


@dataclass
class GradReport:
    """Worst relative error per checked tensor."""

    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def table(self, title: str = "") -> str:
        width = max([len(n) for n in self.errors] + [9])
        lines = [title] if title else []
        lines.append(f"{'parameter':<{width}}  {'max rel err':>12}  status")
        for name, err in self.errors.items():
            status = "ok" if err < self.tolerance else "FAIL"
            lines.append(f"{name:<{width}}  {err:12.3e}  {status}")
        return "\n".join(lines)


REL_EPS = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_EPS)
    return np.abs(analytic - numeric) / denom


def gradcheck(
    f: Callable,
    x,
    h: float = 1e-5,
    params: Optional[Mapping[str, object]] = None,
    tolerance: float = 1e-4,
) -> GradReport:
    """Compare tape gradients of scalar ``f(x)`` with central differences.

    ``params`` are extra leaf tensors ``f`` closes over; they are perturbed in
    place one element at a time and restored exactly afterwards.
    """
    targets = {"input": x}
    if params:
        targets.update(params)
    saved_flags = {name: t.requires_grad for name, t in targets.items()}
    for t in targets.values():
        t.requires_grad = True
        t.grad = None

    def value() -> float:
        out = f(x)
        if out.data.size != 1:
            raise ValueError(f"f must be scalar-valued, got shape {out.shape}")
        v = float(out.data.reshape(-1)[0])
        if not math.isfinite(v):
            raise ValueError("f produced a non-finite value")
        return v

    try:
        with Tape() as tape:
            loss = f(x)
        backward(loss)
        report = GradReport(tolerance=tolerance)
        for name, t in targets.items():
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            flat = t.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = value()
                flat[i] = orig - h
                fm = value()
                flat[i] = orig
                numeric[i] = (fp - fm) / (2.0 * h)
            err = relative_error(analytic.reshape(-1), numeric)
            report.errors[name] = float(err.max()) if err.size else 0.0
    finally:
        for name, t in targets.items():
            t.requires_grad = saved_flags[name]
    return report
