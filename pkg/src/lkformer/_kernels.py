"""Compiled depth-wise correlation kernels (forward, input grad, weight grad).

All loops run in a fixed order on one thread, so results are bit-reproducible.
The innermost loop walks the contiguous width axis.
"""
import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def dw_forward(xp, w, h_out, w_out):
    # xp: (B, C, Hp, Wp) padded input; w: (C, kh, kw)
    n_b, n_c = xp.shape[0], xp.shape[1]
    kh, kw = w.shape[1], w.shape[2]
    out = np.zeros((n_b, n_c, h_out, w_out))
    for b in range(n_b):
        for c in range(n_c):
            for y in range(h_out):
                for i in range(kh):
                    for j in range(kw):
                        wij = w[c, i, j]
                        src = xp[b, c, y + i]
                        dst = out[b, c, y]
                        for x in range(w_out):
                            dst[x] += wij * src[x + j]
    return out


@numba.njit(cache=True, nogil=True)
def dw_grad_input(g, w, hp, wp):
    n_b, n_c, h_out, w_out = g.shape
    kh, kw = w.shape[1], w.shape[2]
    gxp = np.zeros((n_b, n_c, hp, wp))
    for b in range(n_b):
        for c in range(n_c):
            for y in range(h_out):
                src = g[b, c, y]
                for i in range(kh):
                    dst = gxp[b, c, y + i]
                    for j in range(kw):
                        wij = w[c, i, j]
                        for x in range(w_out):
                            dst[x + j] += wij * src[x]
    return gxp


@numba.njit(cache=True, nogil=True)
def dw_grad_weight(g, xp, kh, kw):
    n_b, n_c, h_out, w_out = g.shape
    gw = np.zeros((n_c, kh, kw))
    # per-column partial sums keep the inner loop vectorizable and the order fixed
    acc = np.empty(w_out)
    for c in range(n_c):
        for i in range(kh):
            for j in range(kw):
                acc[:] = 0.0
                for b in range(n_b):
                    for y in range(h_out):
                        gy = g[b, c, y]
                        xy = xp[b, c, y + i]
                        for x in range(w_out):
                            acc[x] += gy[x] * xy[x + j]
                total = 0.0
                for x in range(w_out):
                    total += acc[x]
                gw[c, i, j] = total
    return gw


@numba.njit(cache=True, nogil=True)
def dense_forward(xp, w, h_out, w_out):
    # xp: (B, C_in, Hp, Wp); w: (C_out, C_in, kh, kw).  Used when C_out is small.
    n_b, n_in = xp.shape[0], xp.shape[1]
    n_out, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    out = np.zeros((n_b, n_out, h_out, w_out))
    for b in range(n_b):
        for o in range(n_out):
            for c in range(n_in):
                for y in range(h_out):
                    dst = out[b, o, y]
                    for i in range(kh):
                        src = xp[b, c, y + i]
                        for j in range(kw):
                            wij = w[o, c, i, j]
                            for x in range(w_out):
                                dst[x] += wij * src[x + j]
    return out


@numba.njit(cache=True, nogil=True)
def dense_grad_input(g, w, hp, wp):
    n_b, n_out, h_out, w_out = g.shape
    n_in, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    gxp = np.zeros((n_b, n_in, hp, wp))
    for b in range(n_b):
        for c in range(n_in):
            for o in range(n_out):
                for y in range(h_out):
                    src = g[b, o, y]
                    for i in range(kh):
                        dst = gxp[b, c, y + i]
                        for j in range(kw):
                            wij = w[o, c, i, j]
                            for x in range(w_out):
                                dst[x + j] += wij * src[x]
    return gxp


@numba.njit(cache=True, nogil=True)
def dense_grad_weight(g, xp, kh, kw):
    n_b, n_out, h_out, w_out = g.shape
    n_in = xp.shape[1]
    gw = np.zeros((n_out, n_in, kh, kw))
    acc = np.empty(w_out)
    for o in range(n_out):
        for c in range(n_in):
            for i in range(kh):
                for j in range(kw):
                    acc[:] = 0.0
                    for b in range(n_b):
                        for y in range(h_out):
                            gy = g[b, o, y]
                            xy = xp[b, c, y + i]
                            for x in range(w_out):
                                acc[x] += gy[x] * xy[x + j]
                    total = 0.0
                    for x in range(w_out):
                        total += acc[x]
                    gw[o, c, i, j] = total
    return gw
