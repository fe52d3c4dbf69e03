"""Backend selection for the hot numeric kernels.

Two interchangeable implementations exist: numba-compiled loops
(``numba_kernels``) and vectorized pure numpy (``numpy_kernels``).  The
active one is chosen at import time from the FVP_BACKEND environment
variable ("numba" or "numpy"); default is numba when importable, numpy
otherwise.  ``use_backend`` swaps the active implementation at runtime
(used by tests and the benchmark script).

All kernel calls go through the module-level wrappers below so a swap
takes effect everywhere at once.
"""

import contextlib
import os

from .. import errors
from . import numpy_kernels

_IMPLS = {"numpy": numpy_kernels}

try:
    from . import numba_kernels

    _IMPLS["numba"] = numba_kernels
    _DEFAULT = "numba"
except ImportError:  # pragma: no cover - numba is a declared dependency
    _DEFAULT = "numpy"

_env = os.environ.get("FVP_BACKEND", "").strip().lower()
if _env and _env not in _IMPLS:
    raise errors.DomainError(
        f"FVP_BACKEND={_env!r} is not available; choose one of {sorted(_IMPLS)}"
    )

_active = _IMPLS[_env or _DEFAULT]


def active_backend():
    """Name of the currently active kernel implementation."""
    return _active.NAME


def available_backends():
    return sorted(_IMPLS)


@contextlib.contextmanager
def use_backend(name):
    """Temporarily switch the active kernel implementation."""
    global _active
    if name not in _IMPLS:
        raise errors.DomainError(f"unknown backend {name!r}; choose one of {sorted(_IMPLS)}")
    prev = _active
    _active = _IMPLS[name]
    try:
        yield
    finally:
        _active = prev


def fft1d_rows(data, br, tw):
    return _active.fft1d_rows(data, br, tw)


def conv2d_fwd(xp, w, stride):
    return _active.conv2d_fwd(xp, w, stride)


def conv2d_bwd_input(g, w, stride, hp, wp):
    return _active.conv2d_bwd_input(g, w, stride, hp, wp)


def conv2d_bwd_weights(xp, g, stride, k):
    return _active.conv2d_bwd_weights(xp, g, stride, k)
