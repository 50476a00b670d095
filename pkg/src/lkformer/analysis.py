"""Complexity formulas, exact parameter counts and FLOP estimates.

FLOP convention matches :mod:`lkformer.flops`: 1 MAC = 2 FLOPs, bias adds,
activations and elementwise add/mul count 1 FLOP per element, layer norm 7.
All quantities are Python ints (arbitrary precision).
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from typing import Sequence

from .flops import LAYER_NORM_FLOPS_PER_ELEMENT
from .model import LOCAL_KERNEL, LkformerConfig


def _check_dims(**dims: int) -> None:
    for name, value in dims.items():
        if int(value) != value or value < 1:
            raise ValueError(f"{name} must be a positive integer, got {value}")


def omega_msa(h: int, w: int, c: int) -> int:
    """Global multi-head self-attention cost: 4hwC^2 + 2(hw)^2 C."""
    _check_dims(h=h, w=w, c=c)
    hw = int(h) * int(w)
    return 4 * hw * c * c + 2 * hw * hw * c


def omega_lkra(h: int, w: int, c: int, kernels: Sequence[int]) -> int:
    """Large-kernel attention cost: sum_i C (K_i^2 + C) hw."""
    _check_dims(h=h, w=w, c=c)
    if not kernels:
        raise ValueError("kernel list must not be empty")
    hw = int(h) * int(w)
    return sum(c * (int(k) ** 2 + c) for k in kernels) * hw


def omega_lkra_decomposed(h: int, w: int, c: int, kernels: Sequence[int]) -> int:
    """Same count with each K x K kernel replaced by its K x 1 + 1 x K pair."""
    _check_dims(h=h, w=w, c=c)
    if not kernels:
        raise ValueError("kernel list must not be empty")
    return sum(c * (2 * int(k) + c) for k in kernels) * int(h) * int(w)


def crossover_resolution(c: int, kernels: Sequence[int]) -> int:
    """Smallest hw for which the MSA cost exceeds the LKRA cost.

    Dividing both costs by C*hw, MSA > LKRA  <=>  2hw > sum_i (K_i^2 + C) - 4C.
    """
    _check_dims(c=c)
    if not kernels:
        raise ValueError("kernel list must not be empty")
    slack = sum(int(k) ** 2 + c for k in kernels) - 4 * c
    return max(1, slack // 2 + 1)


def conv_params(c_in: int, c_out: int, kh: int, kw: int, groups: int = 1, bias: bool = True) -> int:
    return c_out * (c_in // groups) * kh * kw + (c_out if bias else 0)


def _lkra_params(cfg: LkformerConfig) -> int:
    c = cfg.channels
    n = 3 * conv_params(c, c, 1, 1)
    if cfg.lkra.use_local_pair:
        n += 2 * conv_params(c, c, LOCAL_KERNEL, 1, groups=c)
    n += sum(2 * conv_params(c, c, k, 1, groups=c) for k in cfg.lkra.kernels)
    return n


def _gpfn_params(cfg: LkformerConfig) -> int:
    c, e = cfg.channels, cfg.hidden
    return (conv_params(c, e, 1, 1) + 2 * conv_params(e, e, 1, 1)
            + conv_params(e, e, 3, 3, groups=e) + conv_params(e, c, 1, 1))


def count_params(cfg: LkformerConfig) -> int:
    c = cfg.channels
    tl = 4 * c + _lkra_params(cfg) + _gpfn_params(cfg)
    rtb = cfg.tl_count * tl + conv_params(c, c, 3, 3)
    return (conv_params(cfg.in_channels, c, 3, 3)
            + cfg.rtb_count * rtb
            + conv_params(cfg.rtb_count * c, c, 1, 1)
            + cfg.upsample_stages * conv_params(c, 4 * c, 3, 3)
            + conv_params(c, cfg.in_channels, 3, 3))


def conv_flops(c_in: int, c_out: int, kh: int, kw: int, pixels: int,
               groups: int = 1, bias: bool = True) -> int:
    return 2 * c_out * (c_in // groups) * kh * kw * pixels + (c_out * pixels if bias else 0)


def separable_pair_flops(c: int, k: int, pixels: int, bias: bool = False) -> int:
    return conv_flops(c, c, k, 1, pixels, c, bias) + conv_flops(c, c, 1, k, pixels, c, bias)


def _lkra_flops(cfg: LkformerConfig, p: int) -> int:
    c = cfg.channels
    f = conv_flops(c, c, 1, 1, p) + c * p  # proj_in + silu
    if cfg.lkra.use_local_pair:
        f += separable_pair_flops(c, LOCAL_KERNEL, p, bias=True)
    for k in cfg.lkra.kernels:
        f += separable_pair_flops(c, k, p, bias=True) + c * p  # + silu
        if cfg.lkra.inner_residual:
            f += c * p
    f += conv_flops(c, c, 1, 1, p) + c * p  # value branch + gating
    f += conv_flops(c, c, 1, 1, p)
    return f


def _gpfn_flops(cfg: LkformerConfig, p: int) -> int:
    c, e = cfg.channels, cfg.hidden
    return (conv_flops(c, e, 1, 1, p) + e * p
            + 2 * conv_flops(e, e, 1, 1, p)
            + conv_flops(e, e, 3, 3, p, groups=e)
            + e * p
            + conv_flops(e, c, 1, 1, p))


def count_flops(cfg: LkformerConfig, h: int, w: int) -> int:
    """FLOPs of one forward pass on a single (in_channels, h, w) LR image."""
    _check_dims(h=h, w=w)
    c, p = cfg.channels, h * w
    tl = (2 * LAYER_NORM_FLOPS_PER_ELEMENT * c * p + 2 * c * p
          + _lkra_flops(cfg, p) + _gpfn_flops(cfg, p))
    rtb = cfg.tl_count * tl + conv_flops(c, c, 3, 3, p) + c * p
    total = conv_flops(cfg.in_channels, c, 3, 3, p)
    total += cfg.rtb_count * rtb
    total += conv_flops(cfg.rtb_count * c, c, 1, 1, p) + c * p
    for stage in range(cfg.upsample_stages):
        total += conv_flops(c, 4 * c, 3, 3, p * 4 ** stage)
    total += conv_flops(c, cfg.in_channels, 3, 3, p * cfg.scale ** 2)
    return total


@dataclass
class CostReport:
    h: int
    w: int
    channels: int
    kernels: tuple[int, ...]
    params: int
    flops: int
    omega_msa: int
    omega_lkra: int
    omega_lkra_decomposed: int
    crossover_hw: int


def analyze(cfg: LkformerConfig, h: int, w: int) -> CostReport:
    kernels = cfg.lkra.kernels
    c = cfg.channels
    # the complexity terms need at least one kernel; the local pair stands in otherwise
    eq_kernels = kernels or (LOCAL_KERNEL,)
    return CostReport(
        h=h, w=w, channels=c, kernels=kernels,
        params=count_params(cfg),
        flops=count_flops(cfg, h, w),
        omega_msa=omega_msa(h, w, c),
        omega_lkra=omega_lkra(h, w, c, eq_kernels),
        omega_lkra_decomposed=omega_lkra_decomposed(h, w, c, eq_kernels),
        crossover_hw=crossover_resolution(c, eq_kernels),
    )


_FIELDS = ("h", "w", "channels", "kernels", "params", "flops", "omega_msa",
           "omega_lkra", "omega_lkra_decomposed", "crossover_hw")


def report_rows(reports: Sequence[CostReport]) -> list[dict]:
    rows = []
    for r in reports:
        row = asdict(r)
        row["kernels"] = "/".join(str(k) for k in r.kernels) or "-"
        rows.append(row)
    return rows


def format_table(reports: Sequence[CostReport]) -> str:
    rows = report_rows(reports)
    header = ["h", "w", "C", "kernels", "params (M)", "FLOPs (G)", "omega_msa",
              "omega_lkra", "omega_lkra_dec", "crossover hw"]
    body = [[str(r["h"]), str(r["w"]), str(r["channels"]), r["kernels"],
             f"{r['params'] / 1e6:.3f}", f"{r['flops'] / 1e9:.3f}", str(r["omega_msa"]),
             str(r["omega_lkra"]), str(r["omega_lkra_decomposed"]), str(r["crossover_hw"])]
            for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    lines = ["  ".join(v.rjust(wd) for v, wd in zip(line, widths)) for line in [header, *body]]
    return "\n".join(lines)


def format_csv(reports: Sequence[CostReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(_FIELDS), lineterminator="\n")
    writer.writeheader()
    writer.writerows(report_rows(reports))
    return buf.getvalue()
