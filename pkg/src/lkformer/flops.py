"""Runtime FLOP tally, used to cross-check the closed-form cost model.

Convention: one multiply-accumulate is 2 FLOPs, a bias add 1 FLOP per output
element, elementwise add/mul and activations 1 FLOP per element, layer norm
7 FLOPs per element.  Layout ops (concat, pixel shuffle, reshape) are free.
"""
from __future__ import annotations

import threading

_local = threading.local()

LAYER_NORM_FLOPS_PER_ELEMENT = 7


class FlopCounter:
    def __init__(self) -> None:
        self.total = 0

    def __enter__(self) -> "FlopCounter":
        stack = getattr(_local, "counters", None)
        if stack is None:
            stack = _local.counters = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.counters.pop()


def tally(n: int) -> None:
    stack = getattr(_local, "counters", None)
    if stack:
        for counter in stack:
            counter.total += int(n)


def conv_flops(c_in: int, c_out: int, kh: int, kw: int, groups: int,
               h_out: int, w_out: int, bias: bool, batch: int = 1) -> int:
    macs = batch * c_out * (c_in // groups) * kh * kw * h_out * w_out
    return 2 * macs + (batch * c_out * h_out * w_out if bias else 0)
