"""Prompt optimization against a frozen segmentation model.

The pipeline per batch: standardize each raw target image (cached), add
the prompt's spatial contribution, standardize again, run the frozen
model, compute the selection-masked cross entropy against cached reliable
pseudo labels, and chain the input gradient back to the prompt
parameters for an Adam step.

Because the model input is re-standardized after the prompt is added, a
constant spatial offset cannot change the loss; the DC bin of a spectrum
prompt therefore has an exactly zero gradient and never moves.  The
gradient assembly enforces that null direction exactly.
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import data, grid, prompt, pseudo, segnet
from .errors import DomainError
from .optim import AdamState, adam_step  # noqa: F401  (adam_step is part of this module's surface)

LR_GRID = (0.01, 0.1, 1.0)


@dataclass
class AdaptConfig:
    variant: str = "complex"  # complex | amplitude | phase | svp
    box_size: int = 16  # spectrum prompt side r
    pad_width: int = 8  # svp border width
    lam: float = 0.01
    top_fraction: float = 0.8
    use_global: bool = True
    use_intra: bool = True
    use_prototype: bool = True
    lr: float = 0.1
    epochs: int = 50
    batch_size: int = 8
    weight_decay: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.variant not in ("complex", "amplitude", "phase", "svp"):
            raise DomainError(f"unknown variant {self.variant!r}")
        if self.variant != "svp" and self.box_size < 1:
            raise DomainError(f"prompt box size must be >= 1, got {self.box_size}")
        if self.lr <= 0:
            raise DomainError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 0:
            raise DomainError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise DomainError(f"batch size must be >= 1, got {self.batch_size}")

    def selection(self):
        return pseudo.SelectionConfig(
            lam=self.lam, top_fraction=self.top_fraction,
            use_global=self.use_global, use_intra=self.use_intra,
            use_prototype=self.use_prototype,
        )


@dataclass
class AdaptReport:
    epoch_loss: list = field(default_factory=list)
    selected_fraction: float = 0.0
    lr: float = 0.0
    config: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    checksum_before: str = ""
    checksum_after: str = ""
    wall_clock_sec: float = 0.0

    def to_dict(self, include_timings=False):
        out = {
            "epoch_loss": self.epoch_loss,
            "selected_fraction": self.selected_fraction,
            "lr": self.lr,
            "config": self.config,
            "warnings": self.warnings,
            "checksum_before": self.checksum_before,
            "checksum_after": self.checksum_after,
        }
        if include_timings:
            out["wall_clock_sec"] = self.wall_clock_sec
        return out


def model_input(x_raw, p=None):
    """standardize -> prompt -> standardize; the pipeline in front of the model."""
    x_std, _ = data.standardize(x_raw)
    y = prompt.apply_prompt(x_std, p)
    z, _ = data.standardize(y)
    return z


def seg_loss(probs, label):
    """Selection-masked cross entropy, summed over pixels.

    probs: (H, W, Nc) or batched (N, H, W, Nc) with a list of labels;
    batched input averages over items.  Returns (loss, grad wrt logits).
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 3:
        batch, labels, single = probs[None], [label], True
    else:
        batch, labels, single = probs, list(label), False
    n = batch.shape[0]
    if len(labels) != n:
        raise DomainError("labels do not match the probability batch")
    grad = np.zeros_like(batch)
    total = 0.0
    for i, lbl in enumerate(labels):
        if lbl.y.shape != batch.shape[1:3]:
            raise DomainError("label shape does not match probabilities")
        sel = lbl.mask == 1
        p = batch[i]
        picked = p[sel][np.arange(sel.sum()), lbl.y[sel]]
        total += float(-np.log(np.clip(picked, 1e-12, None)).sum())
        onehot = np.zeros_like(p)
        idx = np.nonzero(sel)
        onehot[idx[0], idx[1], lbl.y[sel]] = 1.0
        grad[i] = (p - onehot) * sel[:, :, None]
    loss = total / n
    grad /= n
    return loss, (grad[0] if single else grad)


def _prompt_params(p):
    if isinstance(p, prompt.SpatialPrompt):
        return [p.values]
    if p.variant == "complex":
        return [p.real_part, p.imag_part]
    return [p.real_part]


def _dc_index(p, h, w):
    rows, cols = prompt.box_slices(p.r, h, w)
    return h // 2 - rows.start, w // 2 - cols.start


def _pipeline_grad(p, grads_y, x_stds, h, w):
    """Accumulate dL/d(prompt) from per-image dL/d(pre-standardize input)."""
    if isinstance(p, prompt.SpatialPrompt):
        g = np.zeros_like(p.values)
        for gy in grads_y:
            g += gy
        g[p.interior_slices] = 0.0
        return [g]
    if p.variant == "complex":
        g_sum = np.zeros_like(grads_y[0])
        for gy in grads_y:
            g_sum += gy
        pg = prompt.prompt_backward(p, g_sum)
        di, dj = _dc_index(p, h, w)
        # standardization annihilates the constant mode exactly
        pg.real[di, dj, :] = 0.0
        pg.imag[di, dj, :] = 0.0
        return [pg.real, pg.imag]
    g = np.zeros((p.r, p.r, p.channels))
    for gy, xs in zip(grads_y, x_stds):
        pg = prompt.prompt_backward(p, gy, x=xs)
        g += pg.real
    di, dj = _dc_index(p, h, w)
    g[di, dj, :] = 0.0
    return [g]


class _PromptedBatch:
    """Builds prompted, re-standardized inputs and maps gradients back."""

    def __init__(self, p, x_stds):
        self.p = p
        self.x_stds = x_stds
        self.ctxs = []
        h, w, _ = x_stds[0].shape
        if isinstance(p, prompt.SpatialPrompt):
            ys = [prompt.apply_svp(xs, p) for xs in x_stds]
        elif p.variant == "complex":
            ys = prompt.apply_complex_batch(x_stds, p)
        else:
            ys = prompt.apply_real_batch(x_stds, p)
        zs = []
        for y in ys:
            z, ctx = data.standardize(y)
            zs.append(z)
            self.ctxs.append(ctx)
        self.inputs = np.stack(zs)
        self.h, self.w = h, w

    def grad_params(self, grads_z):
        grads_y = [data.standardize_backward(ctx, gz)
                   for ctx, gz in zip(self.ctxs, grads_z)]
        return _pipeline_grad(self.p, grads_y, self.x_stds, self.h, self.w)


def prompt_loss_and_grads(model, p, x_stds, labels):
    """Loss of the prompted batch plus dL/d(prompt parameter arrays)."""
    batch = _PromptedBatch(p, x_stds)
    out, cache = segnet.forward(model, batch.inputs, with_features=False)
    loss, g_logits = seg_loss(out.probs, labels)
    g_inputs = segnet.backward_input(model, cache, g_logits)
    return loss, batch.grad_params(list(g_inputs))


def new_prompt_for(cfg, h, w, channels):
    if cfg.variant == "svp":
        return prompt.new_spatial_prompt(cfg.pad_width, h, w, channels)
    if cfg.box_size > min(h, w):
        raise DomainError(f"prompt box {cfg.box_size} exceeds image {h}x{w}")
    return prompt.new_prompt(cfg.box_size, channels, cfg.variant)


def cache_reliable_labels(model, targets, cfg):
    """Pseudo labels are computed once per image from the unprompted input."""
    sel = cfg.selection()
    return [pseudo.reliable_labels(model, x, sel, input_fn=model_input)
            for x in targets]


def adapt(model, targets, cfg, labels_cache=None):
    """Learn a prompt on unlabeled target images; the model never changes.

    Returns (prompt, AdaptReport).
    """
    if model.mode != "eval":
        raise DomainError("adaptation requires an eval-mode (frozen) model")
    if not targets:
        raise DomainError("target dataset is empty")
    t0 = time.perf_counter()
    checksum_before = model.checksum()
    h, w, channels = targets[0].shape
    p = new_prompt_for(cfg, h, w, channels)
    params = _prompt_params(p)
    state = AdamState.for_params(params)

    labels = labels_cache if labels_cache is not None else cache_reliable_labels(
        model, targets, cfg
    )
    x_stds = [data.standardize(x)[0] for x in targets]
    selected_fraction = float(np.mean([l.selected_fraction for l in labels]))

    report = AdaptReport(
        selected_fraction=selected_fraction, lr=cfg.lr, config=vars(cfg).copy(),
        checksum_before=checksum_before,
    )
    if selected_fraction == 0.0:
        msg = "no reliable voxels selected; the prompt will not train"
        report.warnings.append(msg)
        warnings.warn(msg)

    rng = np.random.default_rng(cfg.seed)
    n = len(targets)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            loss, grads = prompt_loss_and_grads(
                model, p, [x_stds[i] for i in sel], [labels[i] for i in sel]
            )
            adam_step(state, params, grads, cfg.lr, cfg.weight_decay)
            total += loss * len(sel)
        report.epoch_loss.append(total / n)

    report.checksum_after = model.checksum()
    if report.checksum_after != checksum_before:
        raise DomainError("frozen-model contract violated: weights changed")
    report.wall_clock_sec = time.perf_counter() - t0
    return p, report


def adapt_sweep(model, targets, cfg, lrs=LR_GRID, labels_cache=None):
    """Run the learning-rate grid; pick the run with the lowest final
    pseudo-label loss (no target labels consulted)."""
    if labels_cache is None:
        labels_cache = cache_reliable_labels(model, targets, cfg)
    runs = []
    for lr in lrs:
        run_cfg = AdaptConfig(**{**vars(cfg), "lr": lr})
        p, rep = adapt(model, targets, run_cfg, labels_cache=labels_cache)
        final = rep.epoch_loss[-1] if rep.epoch_loss else float("inf")
        if not np.isfinite(final):
            rep.warnings.append(f"lr={lr}: non-finite final loss, excluded")
            final = float("inf")
        runs.append((final, lr, p, rep))
    finite = [r for r in runs if r[0] != float("inf")]
    pool = finite if finite else runs
    best = min(pool, key=lambda r: r[0])
    _, lr, p, rep = best
    rep.config["lr_grid"] = list(lrs)
    rep.config["chosen_lr"] = lr
    rep.config["grid_final_losses"] = {str(r[1]): r[0] for r in runs}
    return p, rep
