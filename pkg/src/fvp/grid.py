"""Dense 2D grid arithmetic and the Fourier core.

Grids are plain numpy arrays in row-major (h, w, c) order: real grids are
float64 of shape (H, W, C), complex grids are complex128 of the same
shape.  The forward transform is unnormalized and the inverse carries the
1/(H*W) factor, so adding a spectrum-domain perturbation commutes exactly
with adding its inverse transform in the spatial domain.

Power-of-two axes use an iterative radix-2 path (hot kernel, see
``fvp.backends``); any other axis length falls back to a direct
DFT-matrix product.
"""

from dataclasses import dataclass

import numpy as np

from . import backends
from .errors import DomainError

# Counts of whole-grid transforms since the last reset. Tests use these to
# verify the batch-efficiency contract of the prompt paths.
op_counter = {"fft2": 0, "ifft2": 0}


def reset_op_counter():
    op_counter["fft2"] = 0
    op_counter["ifft2"] = 0


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


_BITREV_CACHE = {}
_TWIDDLE_CACHE = {}
_DFT_CACHE = {}


def _bitrev(n):
    table = _BITREV_CACHE.get(n)
    if table is None:
        bits = n.bit_length() - 1
        table = np.zeros(n, dtype=np.int64)
        for i in range(n):
            rev = 0
            x = i
            for _ in range(bits):
                rev = (rev << 1) | (x & 1)
                x >>= 1
            table[i] = rev
        _BITREV_CACHE[n] = table
    return table


def _twiddles(n, inverse):
    key = (n, inverse)
    table = _TWIDDLE_CACHE.get(key)
    if table is None:
        sign = 1.0 if inverse else -1.0
        table = np.exp(sign * 2j * np.pi * np.arange(n // 2) / n)
        _TWIDDLE_CACHE[key] = table
    return table


def _dft_matrix(n, inverse):
    key = (n, inverse)
    mat = _DFT_CACHE.get(key)
    if mat is None:
        sign = 1.0 if inverse else -1.0
        k = np.arange(n)
        mat = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
        _DFT_CACHE[key] = mat
    return mat


def _transform_rows(data, inverse, force_direct):
    """Unscaled 1D transform of each row of a (M, N) complex array."""
    n = data.shape[1]
    if n == 1:
        return data.copy()
    if _is_pow2(n) and not force_direct:
        return backends.fft1d_rows(data.copy(), _bitrev(n), _twiddles(n, inverse))
    return data @ _dft_matrix(n, inverse).T


def _transform2d(z, inverse, force_direct):
    h, w, c = z.shape
    out = np.empty_like(z)
    for ch in range(c):
        plane = np.ascontiguousarray(z[:, :, ch])
        plane = _transform_rows(plane, inverse, force_direct)  # along w
        plane = _transform_rows(np.ascontiguousarray(plane.T), inverse, force_direct).T  # along h
        out[:, :, ch] = plane
    return out


def _as_complex_grid(x, op):
    x = np.asarray(x)
    if x.ndim != 3:
        raise DomainError(f"{op}: expected a (H, W, C) grid, got shape {x.shape}")
    if x.shape[0] < 1 or x.shape[1] < 1:
        raise DomainError(f"{op}: H and W must be >= 1, got {x.shape[:2]}")
    if not np.isfinite(x).all():
        raise DomainError(f"{op}: input contains non-finite values")
    return x.astype(np.complex128, copy=False)


def fft2(x, force_direct=False):
    """Unnormalized forward 2D DFT, applied per channel.

    F(u, q) = sum_{h,w} x(h, w) * exp(-2j*pi*(u*h/H + q*w/W))
    """
    z = _as_complex_grid(x, "fft2")
    op_counter["fft2"] += 1
    return _transform2d(z, inverse=False, force_direct=force_direct)


def ifft2(z, force_direct=False):
    """Inverse 2D DFT with 1/(H*W) normalization; ifft2(fft2(x)) == x."""
    z = _as_complex_grid(z, "ifft2")
    op_counter["ifft2"] += 1
    out = _transform2d(z, inverse=True, force_direct=force_direct)
    out /= z.shape[0] * z.shape[1]
    return out


def fftshift(z, inverse=False):
    """Move the DC bin to (H//2, W//2); ``inverse=True`` undoes the shift."""
    z = np.asarray(z)
    h, w = z.shape[0], z.shape[1]
    sh, sw = h // 2, w // 2
    if inverse:
        sh, sw = -sh, -sw
    return np.roll(z, (sh, sw), axis=(0, 1))


@dataclass
class AmpPhase:
    """Polar decomposition of a complex grid.

    amplitude is the elementwise modulus (>= 0); phase is the two-argument
    arctangent in (-pi, pi], with the phase of 0 defined as 0.
    """

    amplitude: np.ndarray
    phase: np.ndarray


def amp_phase_split(z):
    z = np.asarray(z, dtype=np.complex128)
    amp = np.abs(z)
    phase = np.arctan2(z.imag, z.real)
    # arctan2 returns -pi for (-x, -0.0); fold onto the (-pi, pi] convention
    phase[phase == -np.pi] = np.pi
    return AmpPhase(amplitude=amp, phase=phase)


def amp_phase_merge(ap):
    return ap.amplitude * np.exp(1j * ap.phase)
