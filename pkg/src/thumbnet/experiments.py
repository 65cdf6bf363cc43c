"""Desk-scale experiment runners: method ablation, moment-matching effect,
and downscaler reuse on unseen classes."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .losses import Hyperparams
from .model import BicubicDownscaler, build_backbone, build_bundle
from .tensor import no_grad
from .trainer import METHODS, Budget, evaluate, train_classifier, train_teacher, train_thumbnet

log = logging.getLogger(__name__)


def channel_mean_deviation(downscaler, dataset, batch_size=500):
    """Mean |per-channel mean of thumbnail - per-channel mean of original|, in 0-255 pixel units."""
    total = 0.0
    count = 0
    with no_grad():
        for batch in dataset.batches(batch_size, shuffle=False, augment=False):
            y = downscaler.forward(batch.images, mode="eval")
            thumbs = np.clip(dataset.denormalize(y.data), 0, 255)
            orig = batch.raw.astype(np.float64)
            dev = np.abs(thumbs.mean(axis=(2, 3)) - orig.mean(axis=(2, 3)))
            total += dev.sum()
            count += dev.size
    return total / max(count, 1)


@dataclass
class AblationResult:
    errors: dict = field(default_factory=dict)

    @property
    def medians(self):
        return {m: float(np.median(v)) for m, v in self.errors.items() if v}

    def checks(self, margin=0.02):
        """Directional orderings as (label, passed) pairs over median top-1 errors."""
        md = self.medians
        out = []
        if "f" in md and "b" in md:
            out.append((f"(f) < (b) by >= {margin * 100:.0f} points", md["b"] - md["f"] >= margin))
        if "e" in md and "c" in md:
            out.append(("(e) <= (c)", md["e"] <= md["c"]))
        if "d" in md and "b" in md:
            out.append(("(d) <= (b)", md["d"] <= md["b"]))
        return out


def _bundle_for(teacher, f, ablation, seed, hidden):
    kind = "learned" if ablation.use_supervised_downscaler else "bicubic"
    return build_bundle(teacher, f, kind, hidden, seed=seed, with_decoder=ablation.use_feature_mapping)


def run_ablation(teacher, train_ds, val_ds, methods="bcdef", seeds=(0, 1, 2), f=2, hp=None, budget=None,
                 hidden=16, out_dir=None):
    """Top-1 validation error of each method for each seed."""
    hp = hp or Hyperparams()
    result = AblationResult({m: [] for m in methods})
    for seed in seeds:
        for m in methods:
            ablation = METHODS[m]
            bundle = _bundle_for(teacher, f, ablation, seed, hidden)
            run_dir = Path(out_dir) / f"method-{m}-seed-{seed}" if out_dir else None
            train_thumbnet(bundle, train_ds, val_ds, ablation, hp, budget, seed, run_dir)
            err = evaluate(bundle, val_ds)["top1"]
            log.info("method %s seed %d: top-1 error %.4f", m, seed, err)
            result.errors[m].append(err)
    return result


def run_mm_effect(teacher, train_ds, val_ds, f=2, seed=0, hp=None, budget=None, hidden=16):
    """Channel-mean deviation of thumbnails with and without the moment-matching loss."""
    hp = hp or Hyperparams()
    with_mm = METHODS["f"]
    without = replace(with_mm, use_moment_matching=False)
    out = {}
    for label, ablation, params in (("mm", with_mm, hp), ("no_mm", without, replace(hp, lambda_mm=0.0))):
        bundle = _bundle_for(teacher, f, ablation, seed, hidden)
        train_thumbnet(bundle, train_ds, val_ds, ablation, params, budget, seed)
        out[label] = channel_mean_deviation(bundle.downscaler, val_ds)
    return out


def run_generalization(train_ds, val_ds, classes_a, classes_b, seeds=(0, 1, 2), f=2, hp=None, budget=None,
                       teacher_budget=None, hidden=16):
    """Reuse a downscaler learned on one class subset to train vgg-mini on another.

    Returns per-seed top-1 errors for the frozen learned downscaler and for bicubic.
    """
    hp = hp or Hyperparams()
    budget = budget or Budget()
    teacher_budget = teacher_budget or budget
    tr_a, va_a = train_ds.class_subset(classes_a), val_ds.class_subset(classes_a)
    tr_b, va_b = train_ds.class_subset(classes_b), val_ds.class_subset(classes_b)
    size = train_ds.image_shape[1]
    errors = {"learned": [], "bicubic": []}
    for seed in seeds:
        teacher = build_backbone("resnet-mini", len(classes_a), size, seed=seed)
        train_teacher(teacher, tr_a, va_a, hp, teacher_budget, seed)
        bundle = build_bundle(teacher, f, "learned", hidden, seed=seed)
        train_thumbnet(bundle, tr_a, va_a, METHODS["f"], hp, budget, seed)
        learned = bundle.downscaler.freeze()
        for label, down in (("learned", learned), ("bicubic", BicubicDownscaler(f))):
            net = build_backbone("vgg-mini", len(classes_b), size // f, seed=seed + 100)
            train_classifier(net, tr_b, va_b, hp, budget, seed, downscaler=down, stage="G", name="vgg-mini")
            errors[label].append(evaluate(net, va_b, downscaler=down)["top1"])
    return errors


def budget_from_env(env, default_epochs=30):
    """Budget for long-running checks, overridable with THUMBNET_EPOCHS / THUMBNET_STEPS."""
    epochs = int(env.get("THUMBNET_EPOCHS", default_epochs))
    steps = env.get("THUMBNET_STEPS")
    return Budget(epochs=epochs, steps_per_epoch=int(steps) if steps else None)
