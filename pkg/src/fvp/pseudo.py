"""Reliable label detection: turn frozen-model predictions on unprompted
target images into pseudo labels worth training on.

Three filters compose, each optional:
  global threshold     keep probabilities >= lambda
  intra-class          keep, per class, the top fraction k of that class
                       channel (threshold = value at descending rank
                       ceil(k*H*W))
  prototype veto       drop pixels whose nearest class prototype in
                       feature space disagrees with the pseudo label

All selection comparisons are exact (>=); the pipeline is deterministic,
with argmax/argmin ties broken toward the lowest class index.
"""

from dataclasses import dataclass

import numpy as np

from . import segnet
from .errors import DomainError


@dataclass
class SelectionConfig:
    lam: float = 0.01  # global probability threshold
    top_fraction: float = 0.8  # intra-class kept fraction (k)
    use_global: bool = True
    use_intra: bool = True
    use_prototype: bool = True

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise DomainError(f"global threshold must be in [0, 1], got {self.lam}")
        if not 0.0 < self.top_fraction <= 1.0:
            raise DomainError(f"top fraction must be in (0, 1], got {self.top_fraction}")


@dataclass
class ReliableLabel:
    """Per-pixel pseudo class ids plus the binary selection mask."""

    y: np.ndarray  # (H, W) int64 class ids
    mask: np.ndarray  # (H, W) uint8, 1 = selected

    @property
    def selected_fraction(self):
        return float(self.mask.mean())


@dataclass
class Prototypes:
    vectors: np.ndarray  # (Nc, L)
    active: np.ndarray  # (Nc,) bool


def intra_class_thresholds(probs, top_fraction):
    """Per-class threshold: the value at descending rank ceil(k*H*W)."""
    probs = np.asarray(probs)
    if probs.ndim != 3 or probs.shape[0] * probs.shape[1] == 0:
        raise DomainError(f"expected a non-empty (H, W, Nc) grid, got {probs.shape}")
    h, w, nc = probs.shape
    m = int(np.ceil(top_fraction * h * w))
    m = min(max(m, 1), h * w)
    flat = probs.reshape(h * w, nc)
    part = np.sort(flat, axis=0)  # ascending
    return part[h * w - m, :].astype(np.float64)


def select_probs(probs, delta=None, lam=None):
    """Zero out entries below either threshold; survivors keep their value."""
    probs = np.asarray(probs, dtype=np.float64)
    keep = np.ones(probs.shape, dtype=bool)
    if delta is not None:
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (probs.shape[2],):
            raise DomainError(f"threshold vector length {delta.shape} != classes")
        keep &= probs >= delta
    if lam is not None:
        keep &= probs >= lam
    return np.where(keep, probs, 0.0)


def make_pseudo_label(phat):
    """Argmax one-hot label plus the some-class-survived mask."""
    phat = np.asarray(phat)
    y = phat.argmax(axis=-1)
    mask = (phat.sum(axis=-1) > 0.0).astype(np.uint8)
    y = np.where(mask == 1, y, 0)
    return ReliableLabel(y=y.astype(np.int64), mask=mask)


def prototypes(features, phat):
    """Per-class weighted mean feature vector, weights = selected probs."""
    features = np.asarray(features, dtype=np.float64)
    phat = np.asarray(phat, dtype=np.float64)
    if features.shape[:2] != phat.shape[:2]:
        raise DomainError("features and probabilities disagree on H, W")
    nc = phat.shape[2]
    l = features.shape[2]
    vectors = np.zeros((nc, l))
    active = np.zeros(nc, dtype=bool)
    for c in range(nc):
        wsum = phat[:, :, c].sum()
        if wsum > 0.0:
            vectors[c] = np.tensordot(phat[:, :, c], features, axes=([0, 1], [0, 1])) / wsum
            active[c] = True
    return Prototypes(vectors=vectors, active=active)


def prototype_refine(label, features, protos):
    """Keep only pixels whose nearest active prototype matches the label."""
    if not protos.active.any():
        raise DomainError("prototype refinement needs at least one active class")
    features = np.asarray(features, dtype=np.float64)
    nc = protos.vectors.shape[0]
    h, w = features.shape[:2]
    dists = np.full((h, w, nc), np.inf)
    for c in range(nc):
        if protos.active[c]:
            diff = features - protos.vectors[c]
            dists[:, :, c] = np.sqrt((diff * diff).sum(axis=-1))
    nearest = dists.argmin(axis=-1)
    keep = (nearest == label.y).astype(np.uint8)
    return ReliableLabel(y=label.y, mask=label.mask * keep)


def select_pipeline(probs, features, cfg):
    """The full detection chain from raw probabilities and features."""
    delta = intra_class_thresholds(probs, cfg.top_fraction) if cfg.use_intra else None
    lam = cfg.lam if cfg.use_global else None
    phat = select_probs(probs, delta, lam)
    label = make_pseudo_label(phat)
    if cfg.use_prototype:
        protos = prototypes(features, phat)
        if protos.active.any():
            label = prototype_refine(label, features, protos)
        # with no active class the mask is already all-zero; nothing to veto
    return label


def reliable_labels(model, x, cfg, input_fn=None):
    """Detect reliable labels from the frozen model's own prediction on x."""
    if model.mode != "eval":
        raise DomainError("reliable label detection requires an eval-mode model")
    inp = input_fn(x) if input_fn else np.asarray(x, dtype=np.float64)
    out, _ = segnet.forward(model, inp)
    return select_pipeline(out.probs, out.features, cfg)


def encode_reliable(label, n_classes):
    """(Nc+1)-dim one-hot: selected pixels carry their class, the rest the
    extra "unselected" channel."""
    h, w = label.y.shape
    r = np.zeros((h, w, n_classes + 1))
    sel = label.mask == 1
    ys = label.y[sel]
    r[..., n_classes][~sel] = 1.0
    idx = np.nonzero(sel)
    r[idx[0], idx[1], ys] = 1.0
    return r
