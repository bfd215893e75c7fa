"""Classifier confidence, shift-ensembled joint probabilities, ECE, and
linear-head training on a frozen encoder."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .model import embed_batches
from .objectives import joint_labels
from .train import _batches, _write_log, step_decay
from .transforms import apply_augmentation, sample_augmentations

DEFAULT_BINS = 15


def _check_simplex(p, atol=1e-6):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim not in (1, 2) or p.shape[-1] == 0:
        raise ValueError("expected a probability vector or a (N, C) matrix")
    if np.any(p < -atol) or not np.allclose(p.sum(-1), 1.0, rtol=0, atol=atol):
        raise ValueError("not a probability vector: entries must be >= 0 and sum to 1")
    return p


def confidence(prob):
    """max_y p(y|x) for a vector, or per row of an (N, C) matrix."""
    return _check_simplex(prob).max(-1)


def _softmax(logits):
    return torch.softmax(torch.as_tensor(logits, dtype=torch.float64), dim=-1).numpy()


def csi_ens_prob(bundle, x, family):
    """softmax( (1/K) * sum_k l(S_k(x))_k ), with l(.)_k the shift-k block of
    the joint head's logits."""
    if bundle.joint_head is None:
        raise ValueError("model has no joint head")
    x = torch.as_tensor(x)
    total = 0.0
    was_training = bundle.training
    bundle.eval()
    with torch.no_grad():
        for k in range(family.K):
            logits = bundle.joint_logits(family.apply(x, k))
            total = total + logits[:, k, :].double()
    bundle.train(was_training)
    return _softmax(total / family.K)


def class_probabilities(bundle, x, family=None):
    """p(y|x) from the class head, or the shift ensemble when ``family`` is given."""
    if family is not None:
        return csi_ens_prob(bundle, x, family)
    if bundle.class_head is None:
        raise ValueError("model has no class head")
    was_training = bundle.training
    bundle.eval()
    with torch.no_grad():
        logits = bundle.class_logits(torch.as_tensor(x))
    bundle.train(was_training)
    return _softmax(logits)


def _bin_index(conf, n_bins):
    # bin m (1-based) covers ((m-1)/M, m/M]; confidence 0 goes to the first bin.
    # compare against the edges themselves: ceil(0.3 * 10) is 4, not 3
    edges = np.arange(1, n_bins + 1) / n_bins
    return np.minimum(np.searchsorted(edges, conf, side="left"), n_bins - 1)


def calibration_bins(confidences, correct, n_bins=DEFAULT_BINS):
    """Per-bin (count, mean confidence, accuracy) over equal-width bins."""
    conf = np.asarray(confidences, dtype=np.float64)
    corr = np.asarray(correct, dtype=np.float64)
    if conf.shape != corr.shape:
        raise ValueError("confidences and correctness flags differ in length")
    if conf.size and (conf.min() < 0 or conf.max() > 1):
        raise ValueError("confidences must lie in [0, 1]")
    idx = _bin_index(conf, n_bins)
    bins = []
    for m in range(n_bins):
        members = idx == m
        count = int(members.sum())
        bins.append({"lower": m / n_bins, "upper": (m + 1) / n_bins, "count": count,
                     "confidence": float(conf[members].mean()) if count else 0.0,
                     "accuracy": float(corr[members].mean()) if count else 0.0})
    return bins


def ece(confidences, correct, n_bins=DEFAULT_BINS):
    """sum_m |B_m|/N * |acc(B_m) - conf(B_m)|; empty bins add nothing."""
    conf = np.asarray(confidences, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("ECE of an empty set is undefined")
    n = conf.size
    return float(sum(b["count"] / n * abs(b["accuracy"] - b["confidence"])
                     for b in calibration_bins(conf, correct, n_bins) if b["count"]))


def _head_features(bundle, images, labels, family, kind, policy, copies, rng):
    """Frozen features and targets for linear-head training."""
    feats, targets = [], []
    views = [images]
    for _ in range(copies):
        views.append(apply_augmentation(images, sample_augmentations(policy, len(images), rng)))
    for v in views:
        if kind == "class":
            f, _ = embed_batches(bundle, v)
            feats.append(f)
            targets.append(labels)
        else:
            for k in range(family.K):
                f, _ = embed_batches(bundle, family.apply(v, k, rng))
                feats.append(f)
                targets.append(joint_labels(labels, torch.full_like(labels, k),
                                            bundle.num_classes))
    return torch.cat(feats), torch.cat(targets)


def train_linear_heads(bundle, images, labels, family=None, head_kind="class", epochs=100,
                       batch_size=128, lr=0.1, momentum=0.9, weight_decay=0.0,
                       policy=None, augment_copies=0, seed=0, log_path=None):
    """Fit the class or joint head on frozen encoder features.

    Only the selected head's parameters are touched; the encoder runs in eval
    mode under ``no_grad`` so its weights and BN statistics stay fixed.
    """
    if labels is None:
        raise ValueError("linear heads need class labels")
    images = torch.as_tensor(images)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if head_kind not in ("class", "joint"):
        raise ValueError(f"head_kind must be 'class' or 'joint', got {head_kind!r}")
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    num_classes = int(labels.max()) + 1
    if bundle.num_classes != num_classes or bundle.class_head is None:
        bundle.add_class_heads(num_classes, joint=True)
    if head_kind == "joint" and family is None:
        raise ValueError("joint head training needs the shift family")
    if head_kind == "joint" and bundle.joint_head is None:
        bundle.add_class_heads(num_classes, joint=True)
    head = bundle.class_head if head_kind == "class" else bundle.joint_head
    feats, targets = _head_features(bundle, images, labels, family, head_kind,
                                    policy, augment_copies if policy else 0, rng)
    opt = torch.optim.SGD(head.parameters(), lr=lr, momentum=momentum,
                          weight_decay=weight_decay)
    records = []
    for epoch in range(epochs):
        for group in opt.param_groups:
            group["lr"] = step_decay(epoch, epochs, lr)
        total, correct, seen = 0.0, 0, 0
        for idx in _batches(len(feats), batch_size, rng, drop_last=False):
            idx = torch.as_tensor(idx)
            logits = head(feats[idx])
            loss = F.cross_entropy(logits, targets[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == targets[idx]).sum())
            seen += len(idx)
        records.append({"epoch": epoch + 1, "head": head_kind, "loss": total / seen,
                        "train_acc": correct / seen})
    bundle.eval()
    _write_log(log_path, records)
    return bundle, records


