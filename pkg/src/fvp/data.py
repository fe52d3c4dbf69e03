"""Synthetic domain-shift dataset generation, standardization, and file I/O.

Each sample is a background plus smooth elliptical structures (one per
foreground class).  The source and target domains share identical geometry
(and therefore identical label files) but render it with different
intensity profiles: the target applies a per-class intensity remap, a
gamma shift, a fixed multiplicative low-frequency bias field, and noise.

File formats (all little endian):
  image "FVPI": magic, version u16, H u32, W u32, C u16, f32 pixels
  label "FVPL": magic, version u16, H u32, W u32, u8 class ids
  manifest: JSON
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import DomainError, FormatError

FORMAT_VERSION = 1

# stream tags so that geometry, style and noise draws are independent
_GEOM, _STYLE, _BIAS = 11, 23, 47
_SPLIT_ID = {"train": 0, "test": 1}


@dataclass
class ShiftProfile:
    """Rendering parameters for one domain."""

    class_intensities: tuple  # base intensity per class id
    gamma: float = 1.0
    bias_strength: float = 0.0  # amplitude of the multiplicative field
    bias_modes: int = 2  # highest Fourier mode in the bias field
    bias_mode: str = "contrast"  # "contrast": multiplies signal above the
    # background level (air stays dark, like coil inhomogeneity);
    # "brightness": multiplies raw intensity
    noise_sigma: float = 0.02
    smooth_sigma: float = 1.0


# Defaults tuned so that (a) the shift badly degrades a source-trained
# model and (b) a large part of the damage is a fixed low-frequency field
# that an input-agnostic additive prompt can counter.
SOURCE_PROFILE = ShiftProfile(
    class_intensities=(0.25, 0.45, 0.65, 0.85),
    gamma=1.0,
    bias_strength=0.0,
    noise_sigma=0.02,
)
TARGET_PROFILE = ShiftProfile(
    class_intensities=(0.32, 1.08, 0.72, 0.95),
    gamma=0.85,
    bias_strength=0.45,
    noise_sigma=0.03,
)


@dataclass
class DatasetManifest:
    root: Path
    domain: str
    size: int
    n_classes: int
    seed: int
    train: list = field(default_factory=list)  # [(image, label), ...] relative names
    test: list = field(default_factory=list)

    def samples(self, split):
        pairs = {"train": self.train, "test": self.test}[split]
        return [(self.root / img, self.root / lbl) for img, lbl in pairs]


@dataclass
class GenConfig:
    size: int = 64
    n_classes: int = 4
    n_train: int = 40
    n_test: int = 10
    channels: int = 1
    source_profile: ShiftProfile = None
    target_profile: ShiftProfile = None

    def __post_init__(self):
        if self.source_profile is None:
            self.source_profile = _profile_for(SOURCE_PROFILE, self.n_classes)
        if self.target_profile is None:
            self.target_profile = _profile_for(TARGET_PROFILE, self.n_classes)


def _profile_for(profile, n_classes):
    base = list(profile.class_intensities)
    if len(base) < n_classes:
        extra = np.linspace(base[-1], base[0], n_classes - len(base) + 1)[1:]
        base = base + [float(v) for v in extra]
    return ShiftProfile(
        class_intensities=tuple(base[:n_classes]),
        gamma=profile.gamma,
        bias_strength=profile.bias_strength,
        bias_modes=profile.bias_modes,
        bias_mode=profile.bias_mode,
        noise_sigma=profile.noise_sigma,
        smooth_sigma=profile.smooth_sigma,
    )


def _geometry(size, n_classes, rng):
    """Rasterize one label grid: background 0 plus one ellipse per class."""
    label = np.zeros((size, size), dtype=np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    for cls in range(1, n_classes):
        cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
        a = rng.uniform(0.09 * size, 0.20 * size)
        b = rng.uniform(0.09 * size, 0.20 * size)
        theta = rng.uniform(0.0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / a
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / b
        label[u * u + v * v <= 1.0] = cls
    return label


def _bias_field(size, profile, rng):
    """Smooth multiplicative field, fixed per domain.

    "contrast" mode dims the signal above the background level by up to
    ``bias_strength`` (field in [1-s, 1]); "brightness" mode scales raw
    intensity symmetrically (field in [1-s, 1+s]).
    """
    if profile.bias_strength == 0.0:
        return np.ones((size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    fld = np.zeros((size, size))
    for m in range(-profile.bias_modes, profile.bias_modes + 1):
        for n in range(-profile.bias_modes, profile.bias_modes + 1):
            if m == 0 and n == 0:
                continue
            amp = rng.normal()
            phase = rng.uniform(0.0, 2.0 * np.pi)
            fld += amp * np.cos(2.0 * np.pi * (m * yy / size + n * xx / size) + phase)
    fld /= np.max(np.abs(fld))
    if profile.bias_mode == "contrast":
        return 1.0 - profile.bias_strength * (0.5 + 0.5 * fld)
    return 1.0 + profile.bias_strength * fld


def _render(label, profile, bias, rng, channels):
    base = np.asarray(profile.class_intensities, dtype=np.float64)[label]
    img = gaussian_filter(base, profile.smooth_sigma)
    if profile.bias_mode == "contrast":
        bg = profile.class_intensities[0]
        img = bg + (img - bg) * bias
    else:
        img = img * bias
    img = np.clip(img, 0.02, None) ** profile.gamma
    img = img + rng.normal(0.0, profile.noise_sigma, size=img.shape)
    return np.repeat(img[:, :, None], channels, axis=2)


def generate(out_dir, cfg, seed):
    """Write paired source/target datasets; returns their manifests."""
    if cfg.size % 4 != 0 or cfg.size < 8:
        raise DomainError(f"size must be a multiple of 4 and >= 8, got {cfg.size}")
    if cfg.n_classes < 2:
        raise DomainError(f"need at least 2 classes, got {cfg.n_classes}")
    out_dir = Path(out_dir)
    profiles = {"source": cfg.source_profile, "target": cfg.target_profile}
    bias = {
        dom: _bias_field(cfg.size, prof, np.random.default_rng([seed, _BIAS, i]))
        for i, (dom, prof) in enumerate(profiles.items())
    }
    manifests = {}
    for dom_id, dom in enumerate(("source", "target")):
        root = out_dir / dom
        root.mkdir(parents=True, exist_ok=True)
        man = DatasetManifest(root=root, domain=dom, size=cfg.size,
                              n_classes=cfg.n_classes, seed=seed)
        for split in ("train", "test"):
            count = cfg.n_train if split == "train" else cfg.n_test
            for idx in range(count):
                geom_rng = np.random.default_rng([seed, _GEOM, _SPLIT_ID[split], idx])
                label = _geometry(cfg.size, cfg.n_classes, geom_rng)
                style_rng = np.random.default_rng(
                    [seed, _STYLE, dom_id, _SPLIT_ID[split], idx]
                )
                img = _render(label, profiles[dom], bias[dom], style_rng, cfg.channels)
                img_name = f"{split}_{idx:03d}.fvpi"
                lbl_name = f"{split}_{idx:03d}.fvpl"
                save_grid(root / img_name, img)
                save_label(root / lbl_name, label)
                getattr(man, split).append((img_name, lbl_name))
        save_manifest(root / "manifest.json", man)
        manifests[dom] = man
    return manifests["source"], manifests["target"]


def standardize(x):
    """Scale a grid to zero mean / unit variance over all H*W*C values.

    Returns (standardized grid, context for the exact backward map).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.max() == x.min():
        # exactly constant: centered values are exactly zero
        out = np.zeros_like(x)
        return out, (out, np.sqrt(1e-8), x.size)
    mean = x.mean()
    var = x.var()
    denom = np.sqrt(var + 1e-8)
    out = (x - mean) / denom
    return out, (out, denom, x.size)


def standardize_backward(ctx, grad_out):
    """Map dL/d(standardized) to dL/d(input) through mean and variance."""
    out, denom, n = ctx
    grad_out = np.asarray(grad_out, dtype=np.float64)
    gbar = grad_out.mean()
    proj = (grad_out * out).mean()
    return (grad_out - gbar - out * proj) / denom


# ---------------------------------------------------------------------------
# binary file formats


def _read_exact(fh, count, what):
    buf = fh.read(count)
    if len(buf) != count:
        raise FormatError(f"truncated file while reading {what}")
    return buf


def save_grid(path, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise DomainError(f"expected (H, W, C) grid, got shape {x.shape}")
    h, w, c = x.shape
    with open(path, "wb") as fh:
        fh.write(b"FVPI")
        fh.write(struct.pack("<HIIH", FORMAT_VERSION, h, w, c))
        fh.write(x.astype("<f4").tobytes())


def load_grid(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != b"FVPI":
            raise FormatError(f"bad magic {magic!r}, expected FVPI")
        version, h, w, c = struct.unpack("<HIIH", _read_exact(fh, 12, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported image version {version}")
        data = np.frombuffer(_read_exact(fh, 4 * h * w * c, "pixels"), dtype="<f4")
        if fh.read(1):
            raise FormatError("trailing bytes after pixel data")
    return data.reshape(h, w, c).astype(np.float64)


def save_label(path, label):
    label = np.asarray(label, dtype=np.uint8)
    if label.ndim != 2:
        raise DomainError(f"expected (H, W) label grid, got shape {label.shape}")
    h, w = label.shape
    with open(path, "wb") as fh:
        fh.write(b"FVPL")
        fh.write(struct.pack("<HII", FORMAT_VERSION, h, w))
        fh.write(label.tobytes())


def load_label(path, n_classes=None):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != b"FVPL":
            raise FormatError(f"bad magic {magic!r}, expected FVPL")
        version, h, w = struct.unpack("<HII", _read_exact(fh, 10, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported label version {version}")
        data = np.frombuffer(_read_exact(fh, h * w, "class ids"), dtype=np.uint8)
        if fh.read(1):
            raise FormatError("trailing bytes after label data")
    label = data.reshape(h, w)
    if n_classes is not None and label.max() >= n_classes:
        raise FormatError(
            f"label value {int(label.max())} out of range for {n_classes} classes"
        )
    return label.copy()


def save_manifest(path, man):
    payload = {
        "domain": man.domain,
        "size": man.size,
        "n_classes": man.n_classes,
        "seed": man.seed,
        "train": [list(p) for p in man.train],
        "test": [list(p) for p in man.test],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_manifest(path):
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    man = DatasetManifest(
        root=path.parent,
        domain=payload["domain"],
        size=payload["size"],
        n_classes=payload["n_classes"],
        seed=payload["seed"],
        train=[tuple(p) for p in payload["train"]],
        test=[tuple(p) for p in payload["test"]],
    )
    for split in ("train", "test"):
        for img, lbl in man.samples(split):
            if not img.exists() or not lbl.exists():
                raise FormatError(f"manifest lists missing sample {img.name}/{lbl.name}")
    return man


def load_split(man, split, with_labels=True):
    """Load a split into memory: list of images, list of labels (or None)."""
    images, labels = [], []
    for img_path, lbl_path in man.samples(split):
        images.append(load_grid(img_path))
        labels.append(load_label(lbl_path, man.n_classes) if with_labels else None)
    return images, labels
