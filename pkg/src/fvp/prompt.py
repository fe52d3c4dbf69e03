"""Learnable visual prompts: low-frequency spectrum prompts and the
spatial-padding baseline.

A spectrum prompt lives in an r x r box centered on the DC bin of the
frequency-centered layout; everything outside the box is structurally
zero.  Applying it adds the real part of its inverse transform to the
image, so the complex variant needs a single inverse FFT per parameter
value regardless of batch size.  The amplitude/phase variants perturb one
polar component of each image's own spectrum and therefore transform
every image individually (2 transforms per image).
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import grid
from .errors import DomainError, FormatError

PROMPT_VERSION = 1
VARIANTS = ("complex", "amplitude", "phase")
_VARIANT_CODE = {"complex": 0, "amplitude": 1, "phase": 2}
_CODE_VARIANT = {v: k for k, v in _VARIANT_CODE.items()}
_SVP_CODE = 3


@dataclass
class SpectrumPrompt:
    """Low-frequency Fourier prompt with r*r*C complex (or real) bins."""

    r: int
    channels: int
    variant: str
    real_part: np.ndarray = None
    imag_part: np.ndarray = None

    def __post_init__(self):
        if self.r < 1:
            raise DomainError(f"prompt box size must be >= 1, got {self.r}")
        if self.channels < 1:
            raise DomainError(f"channels must be >= 1, got {self.channels}")
        if self.variant not in VARIANTS:
            raise DomainError(f"unknown variant {self.variant!r}")
        shape = (self.r, self.r, self.channels)
        if self.real_part is None:
            self.real_part = np.zeros(shape)
        if self.imag_part is None:
            self.imag_part = np.zeros(shape)
        if self.real_part.shape != shape or self.imag_part.shape != shape:
            raise DomainError("prompt parameter arrays do not match (r, r, C)")

    @property
    def param_count(self):
        """Number of learnable scalars (imaginary block counts only when complex)."""
        n = self.r * self.r * self.channels
        return 2 * n if self.variant == "complex" else n

    def copy(self):
        return SpectrumPrompt(self.r, self.channels, self.variant,
                              self.real_part.copy(), self.imag_part.copy())


@dataclass
class SpatialPrompt:
    """Padding-style spatial prompt: learnable border, structurally zero interior."""

    pad_width: int
    height: int
    width: int
    channels: int
    values: np.ndarray = None

    def __post_init__(self):
        if self.pad_width < 0:
            raise DomainError(f"pad width must be >= 0, got {self.pad_width}")
        shape = (self.height, self.width, self.channels)
        if self.values is None:
            self.values = np.zeros(shape)
        if self.values.shape != shape:
            raise DomainError("spatial prompt values do not match (H, W, C)")
        if not np.all(self.values[self.interior_slices] == 0.0):
            raise DomainError("spatial prompt interior must be zero")

    @property
    def interior_slices(self):
        w = self.pad_width
        return (slice(w, max(self.height - w, w)), slice(w, max(self.width - w, w)))

    @property
    def border_mask(self):
        mask = np.ones((self.height, self.width), dtype=bool)
        mask[self.interior_slices] = False
        return mask

    @property
    def param_count(self):
        ih = max(self.height - 2 * self.pad_width, 0)
        iw = max(self.width - 2 * self.pad_width, 0)
        return self.channels * (self.height * self.width - ih * iw)

    def copy(self):
        return SpatialPrompt(self.pad_width, self.height, self.width,
                             self.channels, self.values.copy())


@dataclass
class PromptGradient:
    """Gradient carrier shaped like the owning prompt's learnable arrays."""

    real: np.ndarray
    imag: np.ndarray = None


def new_prompt(r, channels, variant):
    return SpectrumPrompt(r=r, channels=channels, variant=variant)


def new_spatial_prompt(pad_width, height, width, channels):
    return SpatialPrompt(pad_width=pad_width, height=height, width=width,
                         channels=channels)


def box_slices(r, h, w):
    """Row/col extent of the centered r x r box in the shifted layout."""
    if r > min(h, w):
        raise DomainError(f"prompt box {r} exceeds grid size {h}x{w}")
    r0 = h // 2 - r // 2
    c0 = w // 2 - r // 2
    return slice(r0, r0 + r), slice(c0, c0 + r)


def embed_prompt(v, h, w):
    """Place the prompt box in a full spectrum, DC-at-origin layout."""
    rows, cols = box_slices(v.r, h, w)
    centered = np.zeros((h, w, v.channels), dtype=np.complex128)
    centered[rows, cols, :] = v.real_part + 1j * v.imag_part
    return grid.fftshift(centered, inverse=True)


def crop_box(spectrum, r):
    """Adjoint of embed_prompt: shift to centered layout, cut the box."""
    h, w = spectrum.shape[0], spectrum.shape[1]
    rows, cols = box_slices(r, h, w)
    return grid.fftshift(spectrum)[rows, cols, :]


def spatial_addend(v, h, w):
    """Shared spatial contribution of a complex prompt (one inverse FFT)."""
    return np.real(grid.ifft2(embed_prompt(v, h, w)))


def _check_image(x, v):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DomainError(f"expected (H, W, C) image, got shape {x.shape}")
    if x.shape[2] != v.channels:
        raise DomainError(f"image channels {x.shape[2]} != prompt channels {v.channels}")
    if v.r > min(x.shape[0], x.shape[1]):
        raise DomainError(f"prompt box {v.r} exceeds image {x.shape[0]}x{x.shape[1]}")
    return x


def apply_complex(x, v):
    """x + Re(ifft2(embedded prompt)); the prompt term is image independent."""
    if v.variant != "complex":
        raise DomainError(f"apply_complex needs a complex prompt, got {v.variant}")
    x = _check_image(x, v)
    return x + spatial_addend(v, x.shape[0], x.shape[1])


def apply_complex_batch(xs, v):
    """Prompt a batch; the inverse transform runs once and is reused."""
    if not xs:
        return []
    x0 = _check_image(xs[0], v)
    addend = spatial_addend(v, x0.shape[0], x0.shape[1])
    out = []
    for x in xs:
        if x.shape != x0.shape:
            raise DomainError("batch images must share one shape")
        out.append(np.asarray(x, dtype=np.float64) + addend)
    return out


def apply_real(x, v, component=None):
    """Perturb the amplitude or phase spectrum of x by the embedded prompt."""
    component = component or v.variant
    if v.variant not in ("amplitude", "phase") or component != v.variant:
        raise DomainError(
            f"apply_real needs matching amplitude/phase variant, got "
            f"prompt={v.variant!r} component={component!r}"
        )
    x = _check_image(x, v)
    e = embed_prompt(v, x.shape[0], x.shape[1]).real
    ap = grid.amp_phase_split(grid.fft2(x))
    if component == "amplitude":
        ap.amplitude = ap.amplitude + e
    else:
        ap.phase = ap.phase + e
    return np.real(grid.ifft2(grid.amp_phase_merge(ap)))


def apply_real_batch(xs, v):
    return [apply_real(x, v) for x in xs]


def apply_svp(x, s):
    """Add the spatial-padding prompt elementwise."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != s.values.shape:
        raise DomainError(f"image shape {x.shape} != prompt shape {s.values.shape}")
    return x + s.values


def apply_prompt(x, p):
    """Dispatch on the prompt type/variant."""
    if p is None:
        return np.asarray(x, dtype=np.float64)
    if isinstance(p, SpatialPrompt):
        return apply_svp(x, p)
    if p.variant == "complex":
        return apply_complex(x, p)
    return apply_real(x, p)


def prompt_backward(v, grad_xhat, x=None):
    """Gradient of a scalar loss w.r.t. the prompt parameters.

    grad_xhat is dL/d(prompted image).  The amplitude/phase variants need
    the unprompted image x (their map depends on its spectrum).
    """
    grad_xhat = np.asarray(grad_xhat, dtype=np.float64)
    if not np.isfinite(grad_xhat).all():
        raise DomainError("upstream gradient contains non-finite values")
    if isinstance(v, SpatialPrompt):
        if grad_xhat.shape != v.values.shape:
            raise DomainError("gradient shape does not match spatial prompt")
        g = grad_xhat.copy()
        g[v.interior_slices] = 0.0
        return PromptGradient(real=g)
    if grad_xhat.ndim != 3 or grad_xhat.shape[2] != v.channels:
        raise DomainError("gradient shape does not match prompt channels")
    h, w = grad_xhat.shape[0], grad_xhat.shape[1]
    fg = grid.fft2(grad_xhat)
    if v.variant == "complex":
        box = crop_box(fg, v.r) / (h * w)
        return PromptGradient(real=box.real.copy(), imag=box.imag.copy())
    if x is None:
        raise DomainError(f"{v.variant} variant backward needs the unprompted image")
    ap = grid.amp_phase_split(grid.fft2(np.asarray(x, dtype=np.float64)))
    if v.variant == "amplitude":
        full = np.real(np.exp(1j * ap.phase) * np.conj(fg)) / (h * w)
    else:
        e = embed_prompt(v, h, w).real
        psi = ap.phase + e
        full = -np.imag(ap.amplitude * np.exp(1j * psi) * np.conj(fg)) / (h * w)
    rows, cols = box_slices(v.r, h, w)
    box = grid.fftshift(full)[rows, cols, :]
    return PromptGradient(real=box.copy(), imag=np.zeros_like(box))


def save_prompt(path, p):
    """FVPP format: header then f64 parameters, real block then imaginary."""
    with open(path, "wb") as fh:
        fh.write(b"FVPP")
        if isinstance(p, SpatialPrompt):
            fh.write(struct.pack("<HBHH", PROMPT_VERSION, _SVP_CODE,
                                 p.pad_width, p.channels))
            fh.write(struct.pack("<II", p.height, p.width))
            fh.write(p.values.astype("<f8").tobytes())
        else:
            fh.write(struct.pack("<HBHH", PROMPT_VERSION,
                                 _VARIANT_CODE[p.variant], p.r, p.channels))
            fh.write(p.real_part.astype("<f8").tobytes())
            fh.write(p.imag_part.astype("<f8").tobytes())


def load_prompt(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != b"FVPP":
            raise FormatError(f"bad magic {magic!r}, expected FVPP")
        header = fh.read(7)
        if len(header) != 7:
            raise FormatError("truncated prompt header")
        version, code, r, channels = struct.unpack("<HBHH", header)
        if version != PROMPT_VERSION:
            raise FormatError(f"unsupported prompt version {version}")
        if code == _SVP_CODE:
            dims = fh.read(8)
            if len(dims) != 8:
                raise FormatError("truncated spatial prompt header")
            h, w = struct.unpack("<II", dims)
            raw = fh.read(8 * h * w * channels)
            if len(raw) != 8 * h * w * channels:
                raise FormatError("truncated spatial prompt values")
            if fh.read(1):
                raise FormatError("trailing bytes in prompt file")
            values = np.frombuffer(raw, dtype="<f8").reshape(h, w, channels).copy()
            return SpatialPrompt(pad_width=r, height=h, width=w,
                                 channels=channels, values=values)
        if code not in _CODE_VARIANT:
            raise FormatError(f"unknown prompt variant code {code}")
        n = r * r * channels
        raw = fh.read(16 * n)
        if len(raw) != 16 * n:
            raise FormatError("truncated prompt parameters")
        if fh.read(1):
            raise FormatError("trailing bytes in prompt file")
        flat = np.frombuffer(raw, dtype="<f8")
        shape = (r, r, channels)
        return SpectrumPrompt(
            r=r, channels=channels, variant=_CODE_VARIANT[code],
            real_part=flat[:n].reshape(shape).copy(),
            imag_part=flat[n:].reshape(shape).copy(),
        )
