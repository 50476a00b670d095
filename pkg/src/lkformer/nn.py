"""Convolution, layer norm, SiLU and pixel shuffle, each with a backward rule.

Convolutions are cross-correlations (no kernel flip) with zero padding and
stride 1.  Dense convs go through an im2col GEMM; depth-wise convs use the
compiled kernels in ``_kernels``, as do dense convs with very few outputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels, flops
from .autograd import record
from .tensor import Rng, Tensor, randn

INIT_STD = 0.02
LN_EPS = 1e-6


@dataclass
class Conv2dParams:
    weight: Tensor  # (C_out, C_in / groups, kh, kw)
    bias: Optional[Tensor] = None
    groups: int = 1
    padding: Optional[tuple[int, int]] = None  # None means "same": (kh // 2, kw // 2)

    def __post_init__(self) -> None:
        if self.weight.ndim != 4:
            raise ValueError(f"conv weight must be 4-D, got {self.weight.shape}")
        c_out = self.weight.shape[0]
        if self.groups < 1 or c_out % self.groups:
            raise ValueError(f"C_out={c_out} not divisible by groups={self.groups}")
        if self.bias is not None and self.bias.shape != (c_out,):
            raise ValueError(f"bias shape {self.bias.shape} does not match C_out={c_out}")

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1] * self.groups

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def pad(self) -> tuple[int, int]:
        if self.padding is None:
            kh, kw = self.kernel_size
            return kh // 2, kw // 2
        return self.padding

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = LN_EPS


def init_conv(rng: Rng, c_in: int, c_out: int, kh: int, kw: Optional[int] = None,
              groups: int = 1, bias: bool = True, std: float = INIT_STD) -> Conv2dParams:
    kw = kh if kw is None else kw
    if c_in % groups:
        raise ValueError(f"C_in={c_in} not divisible by groups={groups}")
    weight = randn((c_out, c_in // groups, kh, kw), rng, std)
    b = Tensor(np.zeros(c_out)) if bias else None
    return Conv2dParams(weight, b, groups)


def init_depthwise(rng: Rng, channels: int, kh: int, kw: int, std: float = INIT_STD) -> Conv2dParams:
    return init_conv(rng, channels, channels, kh, kw, groups=channels, std=std)


def init_layer_norm(channels: int) -> LayerNormParams:
    return LayerNormParams(Tensor(np.ones(channels)), Tensor(np.zeros(channels)))


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


# below this many output channels a direct compiled loop beats im2col + GEMM
DIRECT_MAX_OUT = 4


def _im2col(xp: np.ndarray, kh: int, kw: int, h_out: int, w_out: int) -> np.ndarray:
    """(B, C, Hp, Wp) -> (B, C*kh*kw, h_out*w_out), rows ordered (c, i, j)."""
    n_b, n_c = xp.shape[:2]
    if kh == 1 and kw == 1 and xp.shape[2:] == (h_out, w_out):
        return xp.reshape(n_b, n_c, -1)
    cols = np.empty((n_b, n_c, kh, kw, h_out, w_out))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + h_out, j:j + w_out]
    return cols.reshape(n_b, n_c * kh * kw, -1)


def _col2im(gcols: np.ndarray, shape: tuple, kh: int, kw: int, h_out: int, w_out: int) -> np.ndarray:
    n_b, n_c, hp, wp = shape
    if kh == 1 and kw == 1 and (hp, wp) == (h_out, w_out):
        return gcols.reshape(shape)
    gcols = gcols.reshape(n_b, n_c, kh, kw, h_out, w_out)
    gxp = np.zeros(shape)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + h_out, j:j + w_out] += gcols[:, :, i, j]
    return gxp


def _dense_forward(xp, w, h_out, w_out):
    c_out, _, kh, kw = w.shape
    if c_out <= DIRECT_MAX_OUT:
        return _kernels.dense_forward(xp, w, h_out, w_out), None
    cols = _im2col(xp, kh, kw, h_out, w_out)
    out = np.matmul(w.reshape(c_out, -1), cols)
    return out.reshape(xp.shape[0], c_out, h_out, w_out), cols


def _dense_backward(g, w, cols, xp, needs_x, needs_w):
    c_out, _, kh, kw = w.shape
    n_b, _, h_out, w_out = g.shape
    if cols is None:
        gxp = _kernels.dense_grad_input(g, w, xp.shape[2], xp.shape[3]) if needs_x else None
        gw = _kernels.dense_grad_weight(g, xp, kh, kw) if needs_w else None
        return gxp, gw
    g_mat = g.reshape(n_b, c_out, -1)
    gw = None
    if needs_w:
        gw = np.matmul(g_mat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    gxp = None
    if needs_x:
        gcols = np.matmul(w.reshape(c_out, -1).T, g_mat)
        gxp = _col2im(gcols, xp.shape, kh, kw, h_out, w_out)
    return gxp, gw


# a 1-D depth-wise kernel of length k on an axis of length n runs as a banded
# matrix product when n <= BAND_MAX_RATIO * k; BLAS beats the direct loop there
BAND_MAX_RATIO = 6


def _band_index(n_out: int, n_in: int, k: int, pad: int):
    y = np.arange(n_out)[:, None]
    i = np.arange(k)[None, :]
    src = y + i - pad
    valid = (src >= 0) & (src < n_in)
    return np.broadcast_to(y, valid.shape)[valid], src[valid], valid


def _band_taps(gm: np.ndarray, index, k: int) -> np.ndarray:
    """Adjoint of ``_band_matrix``: sum each band diagonal of (C, n_out, n_in)."""
    rows, cols, valid = index
    taps = np.zeros((gm.shape[0],) + valid.shape)
    taps[:, valid] = gm[:, rows, cols]
    return taps.sum(axis=1)


def _band_axis(p: "Conv2dParams", h: int, w: int) -> Optional[int]:
    kh, kw = p.kernel_size
    ph, pw = p.pad
    if not p.depthwise:
        return None
    if kw == 1 and pw == 0 and kh > 1 and h <= BAND_MAX_RATIO * kh:
        return 2
    if kh == 1 and ph == 0 and kw > 1 and w <= BAND_MAX_RATIO * kw:
        return 3
    return None


def _band_conv(x: Tensor, p: "Conv2dParams", axis: int, n_out: int) -> Tensor:
    c = x.shape[1]
    k = max(p.kernel_size)
    n_in = x.shape[axis]
    index = _band_index(n_out, n_in, k, p.pad[axis - 2])
    rows, cols, valid = index
    # m[c, y, y + i - pad] = w[c, i]
    m = np.zeros((c, n_out, n_in))
    m[:, rows, cols] = np.broadcast_to(p.weight.data.reshape(c, 1, k), (c,) + valid.shape)[:, valid]
    xd = x.data
    out = np.matmul(m, xd) if axis == 2 else np.matmul(xd, m.transpose(0, 2, 1))
    if p.bias is not None:
        out += p.bias.data[None, :, None, None]
    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)

    def backward(g, needs):
        if axis == 2:
            gx = np.matmul(m.transpose(0, 2, 1), g) if needs[0] else None
            gm = np.matmul(g, xd.transpose(0, 1, 3, 2)).sum(axis=0) if needs[1] else None
        else:
            gx = np.matmul(g, m) if needs[0] else None
            gm = np.matmul(g.transpose(0, 1, 3, 2), xd).sum(axis=0) if needs[1] else None
        gw = _band_taps(gm, index, k).reshape(p.weight.shape) if needs[1] else None
        grads = [gx, gw]
        if p.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if needs[2] else None)
        return tuple(grads)

    return record(Tensor._wrap(out), inputs, backward, "conv2d")


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """2-D cross-correlation, output size H + 2*p_h - k_h + 1."""
    if x.ndim != 4:
        raise ValueError(f"conv2d expects (B, C, H, W), got {x.shape}")
    n_b, c_in, h, w_ = x.shape
    if c_in != p.in_channels:
        raise ValueError(f"conv2d: input has {c_in} channels, params expect {p.in_channels}")
    kh, kw = p.kernel_size
    ph, pw = p.pad
    h_out, w_out = h + 2 * ph - kh + 1, w_ + 2 * pw - kw + 1
    if h_out < 1 or w_out < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} too large for input {h}x{w_}")
    groups = p.groups
    c_out = p.out_channels
    flops.tally(flops.conv_flops(c_in, c_out, kh, kw, groups, h_out, w_out,
                                 p.bias is not None, n_b))
    band = _band_axis(p, h, w_)
    if band is not None:
        return _band_conv(x, p, band, h_out if band == 2 else w_out)
    xp = _pad(x.data, ph, pw)
    weight = p.weight.data

    if p.depthwise:
        w3 = weight.reshape(c_in, kh, kw)
        out = _kernels.dw_forward(xp, w3, h_out, w_out)
        saved = None
    elif groups == 1:
        out, saved = _dense_forward(xp, weight, h_out, w_out)
    else:
        gi, go = c_in // groups, c_out // groups
        parts, saved = [], []
        for k in range(groups):
            o, cols = _dense_forward(np.ascontiguousarray(xp[:, k * gi:(k + 1) * gi]),
                                     np.ascontiguousarray(weight[k * go:(k + 1) * go]), h_out, w_out)
            parts.append(o)
            saved.append(cols)
        out = np.concatenate(parts, axis=1)
    if p.bias is not None:
        out += p.bias.data[None, :, None, None]
    result = Tensor._wrap(out)

    inputs = (x, p.weight) if p.bias is None else (x, p.weight, p.bias)

    def backward(g, needs):
        g = np.ascontiguousarray(g)
        needs_x, needs_w = needs[0], needs[1]
        if p.depthwise:
            w3 = weight.reshape(c_in, kh, kw)
            gxp = _kernels.dw_grad_input(g, w3, xp.shape[2], xp.shape[3]) if needs_x else None
            gw = _kernels.dw_grad_weight(g, xp, kh, kw).reshape(weight.shape) if needs_w else None
        elif groups == 1:
            gxp, gw = _dense_backward(g, weight, saved, xp, needs_x, needs_w)
        else:
            gi, go = c_in // groups, c_out // groups
            gxp = np.zeros(xp.shape) if needs_x else None
            gw = np.zeros(weight.shape) if needs_w else None
            for k in range(groups):
                gx_k, gw_k = _dense_backward(np.ascontiguousarray(g[:, k * go:(k + 1) * go]),
                                             weight[k * go:(k + 1) * go], saved[k],
                                             xp[:, k * gi:(k + 1) * gi], needs_x, needs_w)
                if needs_x:
                    gxp[:, k * gi:(k + 1) * gi] = gx_k
                if needs_w:
                    gw[k * go:(k + 1) * go] = gw_k
        gx = None
        if needs_x:
            gx = gxp[:, :, ph:ph + h, pw:pw + w_]
        grads = [gx, gw]
        if p.bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)) if needs[2] else None)
        return tuple(grads)

    return record(result, inputs, backward, "conv2d")


def separable_dwc(x: Tensor, col: Conv2dParams, row: Conv2dParams) -> Tensor:
    """Depth-wise k x 1 conv followed by a depth-wise 1 x k conv (same padding)."""
    k = col.kernel_size[0]
    if k % 2 == 0:
        raise ValueError(f"separable_dwc needs an odd kernel length, got {k}")
    if col.kernel_size != (k, 1) or row.kernel_size != (1, k):
        raise ValueError(f"expected {k}x1 and 1x{k} kernels, got {col.kernel_size} and {row.kernel_size}")
    if not (col.depthwise and row.depthwise):
        raise ValueError("separable_dwc requires depth-wise parameters")
    return conv2d(conv2d(x, col), row)


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    """Normalize over channels independently at each (b, y, x) location."""
    if x.ndim != 4 or x.shape[1] != p.gamma.shape[0]:
        raise ValueError(f"layer_norm: input {x.shape} vs {p.gamma.shape[0]} channels")
    n_c = x.shape[1]
    flops.tally(flops.LAYER_NORM_FLOPS_PER_ELEMENT * x.size)
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = centered * inv_std
    gamma = p.gamma.data[None, :, None, None]
    out = Tensor._wrap(xhat * gamma + p.beta.data[None, :, None, None])

    def backward(g, needs):
        gx = None
        if needs[0]:
            dxhat = g * gamma
            gx = inv_std / n_c * (n_c * dxhat - dxhat.sum(axis=1, keepdims=True)
                                  - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        ggamma = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
        gbeta = g.sum(axis=(0, 2, 3)) if needs[2] else None
        return gx, ggamma, gbeta

    return record(out, (x, p.gamma, p.beta), backward, "layer_norm")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu(x: Tensor) -> Tensor:
    flops.tally(x.size)
    s = _sigmoid(x.data)
    out = Tensor._wrap(x.data * s)

    def backward(g, needs):
        return (g * s * (1.0 + x.data * (1.0 - s)),)

    return record(out, (x,), backward, "silu")


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """(B, C*r^2, H, W) -> (B, C, H*r, W*r) with out[b,c,y*r+dy,x*r+dx] = in[b,c*r^2+dy*r+dx,y,x]."""
    n_b, c, h, w = x.shape
    if r < 1 or c % (r * r):
        raise ValueError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    c_out = c // (r * r)
    out = x.data.reshape(n_b, c_out, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    result = Tensor._wrap(out.reshape(n_b, c_out, h * r, w * r))

    def backward(g, needs):
        return (_unshuffle(g, r),)

    return record(result, (x,), backward, "pixel_shuffle")


def _unshuffle(a: np.ndarray, r: int) -> np.ndarray:
    n_b, c, hr, wr = a.shape
    h, w = hr // r, wr // r
    out = a.reshape(n_b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out.reshape(n_b, c * r * r, h, w))


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    n_b, c, hr, wr = x.shape
    if r < 1 or hr % r or wr % r:
        raise ValueError(f"pixel_unshuffle: spatial dims {hr}x{wr} not divisible by {r}")
    result = Tensor._wrap(_unshuffle(x.data, r))

    def backward(g, needs):
        n, cc, h, w = g.shape
        out = g.reshape(n, cc // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
        return (out.reshape(n, cc // (r * r), h * r, w * r),)

    return record(result, (x,), backward, "pixel_unshuffle")
