"""Desk-scale training loops: contrastive pretraining, linear heads and the
cross-entropy baseline."""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .model import ModelBundle
from .objectives import LossConfig, compute_loss
from .transforms import AugmentationPolicy, ShiftFamily, apply_augmentation, sample_augmentations

logger = logging.getLogger(__name__)


def init_bundle(seed, **arch):
    torch.manual_seed(seed)
    return ModelBundle(**arch)


def warmup_cosine(step, total_steps, warmup_steps, base_lr):
    """Linear warmup to ``base_lr`` then cosine decay to zero, no restart."""
    if total_steps <= 0:
        return base_lr
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / max(1, total_steps - warmup_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(1.0, progress)))


def step_decay(epoch, epochs, base_lr, milestones=(0.6, 0.75, 0.9), factor=0.1):
    """Drop by ``factor`` at each fractional milestone of training progress."""
    drops = sum(epoch >= m * epochs for m in milestones)
    return base_lr * factor ** drops


def _batches(n, batch_size, rng, drop_last=True):
    order = rng.permutation(n)
    stops = range(0, n, batch_size)
    out = [order[i:i + batch_size] for i in stops]
    # a trailing singleton batch has no negatives; fold it away
    if drop_last and len(out) > 1 and len(out[-1]) < 2:
        out.pop()
    return out


def _write_log(path, records):
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train_contrastive(bundle, images, family: ShiftFamily, policy: AugmentationPolicy,
                      loss_config: LossConfig, epochs, batch_size=32, lr=0.1,
                      weight_decay=1e-6, momentum=0.9, warmup_epochs=10, seed=0,
                      labels=None, log_path=None, max_views=8192):
    """Train ``bundle`` in place with the objective chosen by ``loss_config.mode``.

    Returns the per-epoch log records (mean of each loss component).
    """
    images = torch.as_tensor(images)
    if labels is not None:
        labels = torch.as_tensor(labels)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    opt = torch.optim.SGD(bundle.parameters(), lr=lr, momentum=momentum,
                          weight_decay=weight_decay)
    n = images.shape[0]
    steps_per_epoch = len(_batches(n, batch_size, np.random.default_rng(0)))
    total = epochs * steps_per_epoch
    warmup = min(warmup_epochs * steps_per_epoch, total)
    step = 0
    records = []
    bundle.train()
    for epoch in range(epochs):
        sums: dict[str, float] = {}
        batches = _batches(n, batch_size, rng)
        for idx in batches:
            for group in opt.param_groups:
                group["lr"] = warmup_cosine(step, total, warmup, lr)
            idx_t = torch.as_tensor(idx)
            y = labels[idx_t] if labels is not None else None
            loss, parts = compute_loss(loss_config, images[idx_t], bundle, policy, family, rng,
                                       labels=y, max_views=max_views)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            sums["total"] = sums.get("total", 0.0) + loss.item()
            for key, val in parts.items():
                sums[key] = sums.get(key, 0.0) + val.item()
        rec = {"epoch": epoch + 1, "lr": opt.param_groups[0]["lr"]}
        rec.update({k: v / len(batches) for k, v in sums.items()})
        records.append(rec)
        logger.debug("epoch %d %s", epoch + 1, rec)
    bundle.eval()
    _write_log(log_path, records)
    return records


def train_cross_entropy(bundle, images, labels, policy, epochs, batch_size=32, lr=0.1,
                        weight_decay=5e-4, momentum=0.9, warmup_epochs=0, seed=0,
                        log_path=None):
    """Plain supervised baseline: encoder and class head trained jointly."""
    images = torch.as_tensor(images)
    labels = torch.as_tensor(labels, dtype=torch.long)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    num_classes = int(labels.max()) + 1
    if bundle.class_head is None or bundle.num_classes != num_classes:
        bundle.add_class_heads(num_classes, joint=False)
    opt = torch.optim.SGD(bundle.parameters(), lr=lr, momentum=momentum,
                          weight_decay=weight_decay)
    n = images.shape[0]
    steps_per_epoch = len(_batches(n, batch_size, np.random.default_rng(0)))
    total_steps = epochs * steps_per_epoch
    step = 0
    records = []
    bundle.train()
    for epoch in range(epochs):
        running = 0.0
        batches = _batches(n, batch_size, rng)
        for idx in batches:
            for group in opt.param_groups:
                group["lr"] = warmup_cosine(step, total_steps, warmup_epochs * steps_per_epoch, lr)
            idx = torch.as_tensor(idx)
            x = apply_augmentation(images[idx], sample_augmentations(policy, len(idx), rng))
            loss = F.cross_entropy(bundle.class_head(bundle.features(x)), labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            running += loss.item()
        records.append({"epoch": epoch + 1, "ce": running / len(batches)})
    bundle.eval()
    _write_log(log_path, records)
    return bundle, records
