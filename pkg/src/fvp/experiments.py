"""Workspace-based experiment drivers: the desk-scale benchmark and the
ablation sweeps.

A workspace directory accumulates per-seed artifacts (datasets, trained
models) so repeated runs and different sweeps reuse them instead of
retraining.  Everything is deterministic in (workspace content, seed).
"""

import json
from pathlib import Path

import numpy as np

from . import adapt, data, metrics, segnet
from .errors import DomainError

DEFAULT_SEEDS = (0, 1, 2, 3, 4)
PRETRAIN_EPOCHS = 40
SVP_PAD_SWEEP = (32, 20, 7)  # full border, medium, thin
SIZE_SWEEP = (2, 4, 8, 16, 32, 64)


def ensure_dataset(workspace, seed, gen_cfg=None):
    root = Path(workspace) / f"seed{seed:03d}" / "data"
    if (root / "source" / "manifest.json").exists():
        return (data.load_manifest(root / "source"),
                data.load_manifest(root / "target"))
    root.mkdir(parents=True, exist_ok=True)
    return data.generate(root, gen_cfg or data.GenConfig(), seed)


def ensure_model(workspace, seed, domain, manifest, epochs=PRETRAIN_EPOCHS):
    """Train (or load) the supervised model for one domain at one seed."""
    path = Path(workspace) / f"seed{seed:03d}" / f"model_{domain}.fvpw"
    if path.exists():
        return segnet.load_model(path)
    images, labels = data.load_split(manifest, "train")
    cfg = segnet.TrainConfig(epochs=epochs, seed=seed)
    model, history = segnet.train_source(
        images, labels, cfg, n_classes=manifest.n_classes,
        in_channels=images[0].shape[2], input_fn=adapt.model_input,
    )
    segnet.save_model(path, model)
    path.with_suffix(".history.json").write_text(
        json.dumps(history, sort_keys=True) + "\n"
    )
    return model


def _eval_dict(report):
    return report.to_dict()


def run_seed(workspace, seed, adapt_cfg=None, lr_grid=adapt.LR_GRID,
             gen_cfg=None, pretrain_epochs=PRETRAIN_EPOCHS):
    """Full protocol for one seed: source-only, target-supervised, prompt."""
    src_man, tgt_man = ensure_dataset(workspace, seed, gen_cfg)
    source_model = ensure_model(workspace, seed, "source", src_man, pretrain_epochs)
    target_model = ensure_model(workspace, seed, "target", tgt_man, pretrain_epochs)

    test_imgs, test_lbls = data.load_split(tgt_man, "test")
    train_imgs, _ = data.load_split(tgt_man, "train", with_labels=False)

    source_only = metrics.evaluate(source_model, None, test_imgs, test_lbls)
    target_sup = metrics.evaluate(target_model, None, test_imgs, test_lbls)

    cfg = adapt_cfg or adapt.AdaptConfig(seed=seed)
    cfg = adapt.AdaptConfig(**{**vars(cfg), "seed": seed})
    prompt_v, report = adapt.adapt_sweep(source_model, train_imgs, cfg, lrs=lr_grid)
    prompted = metrics.evaluate(source_model, prompt_v, test_imgs, test_lbls)

    return {
        "seed": seed,
        "source_only": _eval_dict(source_only),
        "target_supervised": _eval_dict(target_sup),
        "prompted": _eval_dict(prompted),
        "adapt_report": report.to_dict(),
    }, prompt_v


def run_benchmark(workspace, seeds=DEFAULT_SEEDS, adapt_cfg=None,
                  lr_grid=adapt.LR_GRID, gen_cfg=None,
                  pretrain_epochs=PRETRAIN_EPOCHS):
    """The multi-seed benchmark behind the desk-scale adaptation claims."""
    results = []
    for seed in seeds:
        res, _ = run_seed(workspace, seed, adapt_cfg, lr_grid, gen_cfg,
                          pretrain_epochs)
        results.append(res)
    return {"seeds": list(seeds), "results": results}


def _adapt_and_eval(model, train_imgs, test_imgs, test_lbls, cfg, lr_grid=None,
                    labels_cache=None):
    if lr_grid:
        p, rep = adapt.adapt_sweep(model, train_imgs, cfg, lrs=lr_grid,
                                   labels_cache=labels_cache)
    else:
        p, rep = adapt.adapt(model, train_imgs, cfg, labels_cache=labels_cache)
    ev = metrics.evaluate(model, p, test_imgs, test_lbls)
    return {
        "foreground_dice": ev.foreground_dice,
        "foreground_asd": ev.foreground_asd,
        "per_class_dice": ev.per_class_dice,
        "final_loss": rep.epoch_loss[-1] if rep.epoch_loss else None,
        "selected_fraction": rep.selected_fraction,
    }


def ablate(workspace, seeds=(0,), which=("size", "variant", "svp", "selection"),
           base_cfg=None, lr_grid=None, gen_cfg=None,
           pretrain_epochs=PRETRAIN_EPOCHS):
    """Sweep tables: prompt size, variant, spatial baseline, selection toggles.

    Rows report measured scores; orderings are not asserted anywhere.
    """
    known = {"size", "variant", "svp", "selection"}
    bad = set(which) - known
    if bad:
        raise DomainError(f"unknown ablation tables: {sorted(bad)}")
    base = base_cfg or adapt.AdaptConfig()
    tables = {name: [] for name in which}
    baselines = []
    for seed in seeds:
        src_man, tgt_man = ensure_dataset(workspace, seed, gen_cfg)
        model = ensure_model(workspace, seed, "source", src_man, pretrain_epochs)
        test_imgs, test_lbls = data.load_split(tgt_man, "test")
        train_imgs, _ = data.load_split(tgt_man, "train", with_labels=False)
        source_only = metrics.evaluate(model, None, test_imgs, test_lbls)
        baselines.append({"seed": seed,
                          "foreground_dice": source_only.foreground_dice,
                          "foreground_asd": source_only.foreground_asd})

        def run(cfg, labels_cache=None):
            cfg = adapt.AdaptConfig(**{**vars(cfg), "seed": seed})
            return _adapt_and_eval(model, train_imgs, test_imgs, test_lbls,
                                   cfg, lr_grid, labels_cache)

        # reliable labels depend only on the selection settings, not on the
        # prompt shape; share them across size/variant/svp rows
        shared_labels = adapt.cache_reliable_labels(model, train_imgs, base)

        if "size" in which:
            for r in SIZE_SWEEP:
                cfg = adapt.AdaptConfig(**{**vars(base), "variant": "complex",
                                           "box_size": r})
                tables["size"].append({"seed": seed, "box_size": r,
                                       **run(cfg, shared_labels)})
        if "variant" in which:
            for variant in ("complex", "amplitude", "phase"):
                cfg = adapt.AdaptConfig(**{**vars(base), "variant": variant})
                tables["variant"].append({"seed": seed, "variant": variant,
                                          **run(cfg, shared_labels)})
        if "svp" in which:
            for pad in SVP_PAD_SWEEP:
                cfg = adapt.AdaptConfig(**{**vars(base), "variant": "svp",
                                           "pad_width": pad})
                tables["svp"].append({"seed": seed, "pad_width": pad,
                                      **run(cfg, shared_labels)})
        if "selection" in which:
            rows = (
                ("none", False, False, False),
                ("prototype", False, False, True),
                ("global", True, False, False),
                ("global+intra", True, True, False),
                ("global+intra+prototype", True, True, True),
            )
            for name, g, i, p_ in rows:
                cfg = adapt.AdaptConfig(**{**vars(base), "variant": "complex",
                                           "use_global": g, "use_intra": i,
                                           "use_prototype": p_})
                tables["selection"].append({"seed": seed, "selection": name,
                                            **run(cfg)})
    return {"seeds": list(seeds), "source_only": baselines, "tables": tables,
            "config": vars(base)}
