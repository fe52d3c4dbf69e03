"""Dice coefficient and Average Surface Distance, aggregated over a dataset.

Per-class Dice pools intersection and size counts across all images
before taking the ratio (the 2D stand-in for volume-level Dice), which is
not the same thing as averaging per-image Dice values.  ASD is the
symmetric mean distance between mask boundaries, averaged over the images
where both masks are non-empty.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import adapt, data, segnet
from .errors import DomainError


@dataclass
class EvalReport:
    per_class_dice: list
    per_class_asd: list  # None where undefined on every image
    foreground_dice: float
    foreground_asd: float  # None when undefined everywhere
    sample_count: int

    def to_dict(self):
        return {
            "per_class_dice": self.per_class_dice,
            "per_class_asd": self.per_class_asd,
            "foreground_dice": self.foreground_dice,
            "foreground_asd": self.foreground_asd,
            "sample_count": self.sample_count,
        }


def dice(pred, gt, cls):
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DomainError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p = pred == cls
    g = gt == cls
    denom = p.sum() + g.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, g).sum() / denom)


def _boundary(mask):
    """Mask pixels with a 4-neighbor outside the mask or on the image border."""
    if not mask.any():
        return np.zeros((0, 2), dtype=np.int64)
    inside = np.zeros_like(mask)
    inside[1:-1, 1:-1] = (
        mask[1:-1, 1:-1]
        & mask[:-2, 1:-1]
        & mask[2:, 1:-1]
        & mask[1:-1, :-2]
        & mask[1:-1, 2:]
    )
    boundary = mask & ~inside
    return np.argwhere(boundary)


def asd(pred, gt, cls):
    """Symmetric mean nearest-boundary distance; None if either mask is empty."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DomainError(f"shape mismatch {pred.shape} vs {gt.shape}")
    pm = pred == cls
    gm = gt == cls
    if not pm.any() or not gm.any():
        return None
    bp = _boundary(pm).astype(np.float64)
    bg = _boundary(gm).astype(np.float64)
    d_pg, _ = cKDTree(bg).query(bp)
    d_gp, _ = cKDTree(bp).query(bg)
    return float((d_pg.sum() + d_gp.sum()) / (len(bp) + len(bg)))


def predict(model, image, p=None):
    """Class map from the standard pipeline (standardize, prompt, standardize)."""
    out, _ = segnet.forward(model, adapt.model_input(image, p), with_features=False)
    return out.probs.argmax(axis=-1)


def evaluate(model, p, images, labels):
    """Aggregate Dice (pooled counts) and ASD (mean over defined images)."""
    if not images:
        raise DomainError("evaluation dataset is empty")
    if model.mode != "eval":
        raise DomainError("evaluation requires an eval-mode model")
    nc = model.n_classes
    inter = np.zeros(nc)
    sizes = np.zeros(nc)
    asd_sums = np.zeros(nc)
    asd_counts = np.zeros(nc, dtype=np.int64)
    for image, label in zip(images, labels):
        pred = predict(model, image, p)
        for c in range(nc):
            pm = pred == c
            gm = label == c
            inter[c] += np.logical_and(pm, gm).sum()
            sizes[c] += pm.sum() + gm.sum()
            val = asd(pred, label, c)
            if val is not None:
                asd_sums[c] += val
                asd_counts[c] += 1
    per_dice = [1.0 if sizes[c] == 0 else float(2.0 * inter[c] / sizes[c])
                for c in range(nc)]
    per_asd = [float(asd_sums[c] / asd_counts[c]) if asd_counts[c] else None
               for c in range(nc)]
    fg_dice = float(np.mean(per_dice[1:]))
    fg_defined = [v for v in per_asd[1:] if v is not None]
    fg_asd = float(np.mean(fg_defined)) if fg_defined else None
    return EvalReport(
        per_class_dice=per_dice,
        per_class_asd=per_asd,
        foreground_dice=fg_dice,
        foreground_asd=fg_asd,
        sample_count=len(images),
    )


def evaluate_manifest(model, p, manifest, split="test"):
    images, labels = data.load_split(manifest, split)
    return evaluate(model, p, images, labels)
