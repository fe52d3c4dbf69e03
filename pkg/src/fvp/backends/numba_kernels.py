"""Numba-compiled twins of the hot kernels in ``numpy_kernels``.

Compiled lazily on first call (cache=True persists across processes).
All kernels are single threaded so results are reproducible run to run.
"""

import numpy as np
from numba import njit

NAME = "numba"


@njit(cache=True)
def fft1d_rows(data, br, tw):
    m, n = data.shape
    for row in range(m):
        for i in range(n):
            j = br[i]
            if j > i:
                tmp = data[row, i]
                data[row, i] = data[row, j]
                data[row, j] = tmp
        size = 2
        while size <= n:
            half = size // 2
            step = n // size
            for start in range(0, n, size):
                k = 0
                for i in range(start, start + half):
                    t = data[row, i + half] * tw[k]
                    u = data[row, i]
                    data[row, i] = u + t
                    data[row, i + half] = u - t
                    k += step
            size *= 2
    return data


@njit(cache=True, fastmath=True)
def _conv2d_fwd(xp, w, stride, ho, wo):
    # w layout (Co, K, K, Ci): per output scalar this is a short dot
    # product over contiguous ci runs, accumulated in a register.
    n_im, hp, wp, ci = xp.shape
    co, k = w.shape[0], w.shape[1]
    out = np.empty((n_im, ho, wo, co))
    for n in range(n_im):
        for oh in range(ho):
            ih0 = oh * stride
            for ow in range(wo):
                iw0 = ow * stride
                for c_out in range(co):
                    acc = 0.0
                    for ky in range(k):
                        for kx in range(k):
                            for c_in in range(ci):
                                acc += xp[n, ih0 + ky, iw0 + kx, c_in] * w[c_out, ky, kx, c_in]
                    out[n, oh, ow, c_out] = acc
    return out


def conv2d_fwd(xp, w, stride):
    n, hp, wp, ci = xp.shape
    co, k, _, _ = w.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    return _conv2d_fwd(xp, np.ascontiguousarray(w), stride, ho, wo)


@njit(cache=True, fastmath=True)
def _conv2d_bwd_input(g, wt, stride, hp, wp):
    # wt layout (K, K, Ci, Co): the inner dot runs over contiguous co in
    # both g and wt. Gather form; only taps consistent with the stride
    # phase contribute.
    n_im, ho, wo, co = g.shape
    k = wt.shape[0]
    ci = wt.shape[2]
    dxp = np.zeros((n_im, hp, wp, ci))
    for n in range(n_im):
        for a in range(hp):
            for b in range(wp):
                for ky in range(k):
                    t = a - ky
                    if t < 0:
                        break
                    if t % stride != 0:
                        continue
                    oh = t // stride
                    if oh >= ho:
                        continue
                    for kx in range(k):
                        u = b - kx
                        if u < 0:
                            break
                        if u % stride != 0:
                            continue
                        ow = u // stride
                        if ow >= wo:
                            continue
                        for c_in in range(ci):
                            acc = 0.0
                            for c_out in range(co):
                                acc += g[n, oh, ow, c_out] * wt[ky, kx, c_in, c_out]
                            dxp[n, a, b, c_in] += acc
    return dxp


def conv2d_bwd_input(g, w, stride, hp, wp):
    wt = np.ascontiguousarray(w.transpose(1, 2, 3, 0))
    return _conv2d_bwd_input(np.ascontiguousarray(g), wt, stride, hp, wp)


@njit(cache=True)
def _conv2d_bwd_weights(xp, g, stride, k):
    n_im, ho, wo, co = g.shape
    ci = xp.shape[3]
    dwt = np.zeros((k, k, co, ci))
    for n in range(n_im):
        for oh in range(ho):
            ih0 = oh * stride
            for ow in range(wo):
                iw0 = ow * stride
                for ky in range(k):
                    for kx in range(k):
                        for c_out in range(co):
                            gv = g[n, oh, ow, c_out]
                            for c_in in range(ci):
                                dwt[ky, kx, c_out, c_in] += gv * xp[n, ih0 + ky, iw0 + kx, c_in]
    return dwt


def conv2d_bwd_weights(xp, g, stride, k):
    dwt = _conv2d_bwd_weights(xp, g, stride, k)
    return np.ascontiguousarray(dwt.transpose(2, 0, 1, 3))
