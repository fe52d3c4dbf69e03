"""Pure-numpy implementations of the hot kernels.

Identical contracts to the numba twins in ``numba_kernels``; selected via
the FVP_BACKEND environment flag (see ``fvp.backends``).
"""

import numpy as np

NAME = "numpy"


def fft1d_rows(data, br, tw):
    """Radix-2 DIT transform of each row of ``data`` (in place).

    data: (M, N) complex128 with N a power of two.
    br:   length-N bit-reversal permutation (an involution).
    tw:   length-N/2 twiddle table W^k; conjugated table gives the inverse
          (unscaled) transform.
    """
    m, n = data.shape
    data[:] = data[:, br]
    size = 2
    while size <= n:
        half = size // 2
        step = n // size
        w = tw[: half * step : step]
        d = data.reshape(m, n // size, size)
        t = d[:, :, half:] * w
        u = d[:, :, :half]
        d[:, :, half:] = u - t
        d[:, :, :half] = u + t
        size *= 2
    return data


def conv2d_fwd(xp, w, stride):
    """Correlate a padded batch with a filter bank.

    xp: (N, Hp, Wp, Ci) float64, already zero padded.
    w:  (Co, K, K, Ci) float64.
    Returns (N, Ho, Wo, Co).
    """
    n, hp, wp, ci = xp.shape
    co, k, _, _ = w.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (N, Ho, Wo, Ci, K, K)
    col = win.reshape(n * ho * wo, ci * k * k)
    wmat = np.ascontiguousarray(w.transpose(3, 1, 2, 0)).reshape(ci * k * k, co)
    return (col @ wmat).reshape(n, ho, wo, co)


def conv2d_bwd_input(g, w, stride, hp, wp):
    """Gradient w.r.t. the padded input of conv2d_fwd; returns (N, Hp, Wp, Ci).

    One (Co, Ci) matmul per kernel offset, scattered into strided slices.
    """
    n, ho, wo, co = g.shape
    _, k, _, ci = w.shape
    dxp = np.zeros((n, hp, wp, ci))
    gflat = np.ascontiguousarray(g).reshape(n * ho * wo, co)
    for ky in range(k):
        for kx in range(k):
            contrib = (gflat @ w[:, ky, kx, :]).reshape(n, ho, wo, ci)
            dxp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :] += contrib
    return dxp


def conv2d_bwd_weights(xp, g, stride, k):
    """Gradient w.r.t. the filter bank of conv2d_fwd. Returns (Co, K, K, Ci)."""
    n, ho, wo, co = g.shape
    ci = xp.shape[3]
    dw = np.zeros((co, k, k, ci))
    for ky in range(k):
        for kx in range(k):
            xs = xp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :]
            dw[:, ky, kx, :] = np.tensordot(g, xs, axes=([0, 1, 2], [0, 1, 2]))
    return dw
