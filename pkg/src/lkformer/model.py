"""LKFormer network: RDB, LKRA, GPFN, transformer layer, RTB and the full model.

Parameters live in nested dicts/lists of :class:`Conv2dParams` and
:class:`LayerNormParams`; :func:`named_parameters` flattens them into the
canonical dotted-name order used by checkpoints.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from .nn import (
    INIT_STD,
    Conv2dParams,
    LayerNormParams,
    conv2d,
    init_conv,
    init_depthwise,
    init_layer_norm,
    layer_norm,
    pixel_shuffle,
    separable_dwc,
    silu,
)
from .tensor import Rng, Tensor, add, concat_channels, mul

LOCAL_KERNEL = 7


@dataclass(frozen=True)
class LkraConfig:
    kernels: tuple[int, ...] = (11, 21, 31)
    use_local_pair: bool = True
    inner_residual: bool = True

    def __post_init__(self) -> None:
        kernels = tuple(int(k) for k in self.kernels)
        object.__setattr__(self, "kernels", kernels)
        if any(k < 1 or k % 2 == 0 for k in kernels):
            raise ValueError(f"LKRA kernels must be odd and positive, got {kernels}")
        if any(b <= a for a, b in zip(kernels, kernels[1:])):
            raise ValueError(f"LKRA kernels must be strictly increasing, got {kernels}")
        if not kernels and not self.use_local_pair:
            raise ValueError("LKRA needs the local pair or at least one large kernel")


@dataclass(frozen=True)
class LkformerConfig:
    channels: int = 48
    rtb_count: int = 6
    tl_count: int = 6
    scale: int = 2
    in_channels: int = 1
    lkra: LkraConfig = field(default_factory=LkraConfig)
    gpfn_expansion: int = 2

    def __post_init__(self) -> None:
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        for name in ("channels", "rtb_count", "tl_count", "in_channels", "gpfn_expansion"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def hidden(self) -> int:
        return self.gpfn_expansion * self.channels

    @property
    def upsample_stages(self) -> int:
        return int(math.log2(self.scale))

    def with_(self, **changes) -> "LkformerConfig":
        lkra_changes = {k[5:]: changes.pop(k) for k in list(changes) if k.startswith("lkra_")}
        cfg = replace(self, **changes)
        if lkra_changes:
            cfg = replace(cfg, lkra=replace(cfg.lkra, **lkra_changes))
        return cfg


# -- parameter construction ---------------------------------------------------

def build_rdb(rng: Rng, channels: int, k: int, std: float = INIT_STD) -> dict:
    return {"col": init_depthwise(rng, channels, k, 1, std),
            "row": init_depthwise(rng, channels, 1, k, std)}


def build_lkra(rng: Rng, channels: int, cfg: LkraConfig, std: float = INIT_STD) -> dict:
    params: dict = {"proj_in": init_conv(rng, channels, channels, 1, std=std)}
    if cfg.use_local_pair:
        params["local"] = build_rdb(rng, channels, LOCAL_KERNEL, std)
    params["rdbs"] = [build_rdb(rng, channels, k, std) for k in cfg.kernels]
    params["value"] = init_conv(rng, channels, channels, 1, std=std)
    params["proj_out"] = init_conv(rng, channels, channels, 1, std=std)
    return params


def build_gpfn(rng: Rng, channels: int, expansion: int, std: float = INIT_STD) -> dict:
    hidden = expansion * channels
    return {
        "proj_in": init_conv(rng, channels, hidden, 1, std=std),
        "value": init_conv(rng, hidden, hidden, 1, std=std),
        "gate": init_conv(rng, hidden, hidden, 1, std=std),
        "gate_dw": init_depthwise(rng, hidden, 3, 3, std),
        "proj_out": init_conv(rng, hidden, channels, 1, std=std),
    }


def build_tl(rng: Rng, cfg: LkformerConfig, std: float = INIT_STD) -> dict:
    c = cfg.channels
    return {
        "norm1": init_layer_norm(c),
        "lkra": build_lkra(rng, c, cfg.lkra, std),
        "norm2": init_layer_norm(c),
        "gpfn": build_gpfn(rng, c, cfg.gpfn_expansion, std),
    }


def build_rtb(rng: Rng, cfg: LkformerConfig, std: float = INIT_STD) -> dict:
    return {"layers": [build_tl(rng, cfg, std) for _ in range(cfg.tl_count)],
            "conv": init_conv(rng, cfg.channels, cfg.channels, 3, std=std)}


def build_model(cfg: LkformerConfig, rng: Rng, std: float = INIT_STD) -> dict:
    """Gaussian(0, std) weights, zero biases, unit/zero layer-norm affine."""
    c = cfg.channels
    return {
        "shallow": init_conv(rng, cfg.in_channels, c, 3, std=std),
        "rtbs": [build_rtb(rng, cfg, std) for _ in range(cfg.rtb_count)],
        "fusion": init_conv(rng, cfg.rtb_count * c, c, 1, std=std),
        "upsample": [init_conv(rng, c, 4 * c, 3, std=std) for _ in range(cfg.upsample_stages)],
        "tail": init_conv(rng, c, cfg.in_channels, 3, std=std),
    }


def named_parameters(tree, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield (dotted name, tensor) in canonical module-path order."""
    if isinstance(tree, Conv2dParams):
        yield prefix + "weight", tree.weight
        if tree.bias is not None:
            yield prefix + "bias", tree.bias
    elif isinstance(tree, LayerNormParams):
        yield prefix + "gamma", tree.gamma
        yield prefix + "beta", tree.beta
    elif isinstance(tree, dict):
        for key, value in tree.items():
            yield from named_parameters(value, f"{prefix}{key}.")
    elif isinstance(tree, (list, tuple)):
        for i, value in enumerate(tree):
            yield from named_parameters(value, f"{prefix}{i}.")
    else:
        raise TypeError(f"unexpected parameter node {type(tree).__name__} at {prefix!r}")


def parameter_count(tree) -> int:
    return sum(t.size for _, t in named_parameters(tree))


def zero_(tree) -> None:
    """Zero every tensor in ``tree`` in place."""
    for _, t in named_parameters(tree):
        t.data[...] = 0.0


# -- forward passes -----------------------------------------------------------

def rdb_forward(x: Tensor, k: int, params: dict, inner_residual: bool = True) -> Tensor:
    """silu(x + dwc_1xk(dwc_kx1(x))); without the inner residual, silu(dwc(x))."""
    if k % 2 == 0:
        raise ValueError(f"RDB kernel must be odd, got {k}")
    if params["col"].kernel_size != (k, 1):
        raise ValueError(f"RDB params hold a {params['col'].kernel_size} kernel, expected {k}x1")
    branch = separable_dwc(x, params["col"], params["row"])
    return silu(add(x, branch) if inner_residual else branch)


def lkra_forward(h: Tensor, cfg: LkraConfig, params: dict) -> Tensor:
    """Large-kernel residual attention: a value projection of ``h`` gated by a
    large-receptive-field attention map, then projected back."""
    c = params["proj_in"].in_channels
    if h.ndim != 4 or h.shape[1] != c:
        raise ValueError(f"LKRA expects {c} channels, got shape {h.shape}")
    attn = silu(conv2d(h, params["proj_in"]))
    if cfg.use_local_pair:
        attn = separable_dwc(attn, params["local"]["col"], params["local"]["row"])
    for k, rdb in zip(cfg.kernels, params["rdbs"]):
        attn = rdb_forward(attn, k, rdb, cfg.inner_residual)
    gated = mul(conv2d(h, params["value"]), attn)
    return conv2d(gated, params["proj_out"])


def gpfn_forward(f: Tensor, params: dict) -> Tensor:
    c = params["proj_in"].in_channels
    if f.ndim != 4 or f.shape[1] != c:
        raise ValueError(f"GPFN expects {c} channels, got shape {f.shape}")
    hidden = silu(conv2d(f, params["proj_in"]))
    value = conv2d(hidden, params["value"])
    attn_map = conv2d(conv2d(hidden, params["gate"]), params["gate_dw"])
    return conv2d(mul(value, attn_map), params["proj_out"])


def tl_forward(x: Tensor, params: dict, lkra_cfg: LkraConfig) -> Tensor:
    """Pre-norm transformer layer: x + LKRA(LN(x)), then y + GPFN(LN(y))."""
    y = add(x, lkra_forward(layer_norm(x, params["norm1"]), lkra_cfg, params["lkra"]))
    return add(y, gpfn_forward(layer_norm(y, params["norm2"]), params["gpfn"]))


def rtb_forward(x: Tensor, params: dict, lkra_cfg: LkraConfig) -> Tensor:
    h = x
    for layer in params["layers"]:
        h = tl_forward(h, layer, lkra_cfg)
    return add(x, conv2d(h, params["conv"]))


def deep_features(f0: Tensor, cfg: LkformerConfig, params: dict) -> Tensor:
    """RTB stack, concatenation of every RTB output, 1x1 fusion, global skip."""
    h = f0
    outs = []
    for rtb in params["rtbs"]:
        h = rtb_forward(h, rtb, cfg.lkra)
        outs.append(h)
    fused = conv2d(concat_channels(outs), params["fusion"])
    return add(f0, fused)


def lkformer_forward(lr_image: Tensor, cfg: LkformerConfig, params: dict,
                     min_size: int = 8) -> Tensor:
    """(B, in_channels, H, W) -> (B, in_channels, H*s, W*s)."""
    if lr_image.ndim != 4 or lr_image.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (B, {cfg.in_channels}, H, W), got {lr_image.shape}")
    if min(lr_image.shape[2:]) < min_size:
        raise ValueError(f"input spatial dims {lr_image.shape[2:]} below floor {min_size}")
    f0 = conv2d(lr_image, params["shallow"])
    feats = deep_features(f0, cfg, params)
    for stage in params["upsample"]:
        feats = pixel_shuffle(conv2d(feats, stage), 2)
    return conv2d(feats, params["tail"])


def influence_extent(cfg: LkformerConfig, params: dict, image: np.ndarray,
                     site: tuple[int, int], delta: float = 1e-3) -> tuple[np.ndarray, int]:
    """Perturb one LR pixel and return (|output change| map, farthest changed
    output pixel's Chebyshev distance from the perturbation's HR location).

    Distances are measured from the top-left HR pixel of the perturbed block."""
    base = lkformer_forward(Tensor(image), cfg, params).data[0, 0]
    bumped = np.array(image, dtype=np.float64)
    bumped[0, 0, site[0], site[1]] += delta
    diff = np.abs(lkformer_forward(Tensor(bumped), cfg, params).data[0, 0] - base)
    s = cfg.scale
    ys, xs = np.nonzero(diff > 0)
    if ys.size == 0:
        return diff, -1
    dist = np.maximum(np.abs(ys - site[0] * s), np.abs(xs - site[1] * s))
    return diff, int(dist.max())
