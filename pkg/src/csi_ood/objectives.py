"""Training objectives: SimCLR, con-SI, cls-SI, CSI, SupCLR and sup-CSI.

Every contrastive loss here is built on one anchor term:

    -1/|P| * log( sum_{p in P} exp(sim(z, z_p)/tau) / sum_{j in P u N} exp(sim(z, z_j)/tau) )

with cosine similarity.  Note the 1/|P| sits outside the log of the summed
positive mass; with a single positive this is the usual InfoNCE term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .transforms import AugmentationPolicy, ShiftFamily, apply_augmentation, sample_augmentations

LOSS_MODES = ("simclr", "con_si", "cls_si", "csi", "supclr", "sup_csi")
MAX_VIEWS = 8192


@dataclass(frozen=True)
class LossConfig:
    temperature: float = 0.5
    lambda_cls: float = 1.0
    mode: str = "csi"
    align_shift_as_positive: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.lambda_cls < 0:
            raise ValueError("lambda_cls must be non-negative")
        if self.mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {self.mode!r}; valid modes: {LOSS_MODES}")


def _normalize(z):
    norms = z.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ValueError("cosine similarity is undefined for a zero-norm embedding")
    return z / norms


def contrastive_loss(query, positives, negatives, temperature=0.5):
    """Loss of one query against explicit positive and negative sets."""
    query = torch.as_tensor(query)
    positives = torch.as_tensor(positives).reshape(-1, query.shape[-1])
    negatives = torch.as_tensor(negatives, dtype=query.dtype).reshape(-1, query.shape[-1])
    if positives.shape[0] == 0:
        raise ValueError("contrastive loss needs at least one positive")
    q = _normalize(query.reshape(1, -1))
    keys = _normalize(torch.cat([positives, negatives]))
    logits = (keys @ q.t()).squeeze(1) / temperature
    n_pos = positives.shape[0]
    return -(torch.logsumexp(logits[:n_pos], 0) - torch.logsumexp(logits, 0)) / n_pos


def multi_positive_objective(z, positive_mask, temperature=0.5):
    """Mean anchor loss over rows of ``z``; every other row is a candidate.

    ``positive_mask[i, j]`` marks j as a positive of anchor i (diagonal
    ignored).  Anchors with no positive are skipped and the mean is taken
    over the rest.
    """
    n = z.shape[0]
    zn = _normalize(z)
    logits = zn @ zn.t() / temperature
    eye = torch.eye(n, dtype=torch.bool, device=z.device)
    logits = logits.masked_fill(eye, float("-inf"))
    pos = positive_mask & ~eye
    n_pos = pos.sum(1)
    keep = n_pos > 0
    if not bool(keep.any()):
        return z.sum() * 0.0
    lse_all = torch.logsumexp(logits, 1)
    lse_pos = torch.logsumexp(logits.masked_fill(~pos, float("-inf")), 1)
    terms = -(lse_pos[keep] - lse_all[keep]) / n_pos[keep]
    return terms.mean()


def simclr_objective(z1, z2, temperature=0.5):
    """SimCLR on paired views: row i of ``z1`` and row i of ``z2`` are positives."""
    b = z1.shape[0]
    ids = torch.arange(b, device=z1.device).repeat(2)
    mask = ids[:, None] == ids[None, :]
    return multi_positive_objective(torch.cat([z1, z2]), mask, temperature)


def supclr_objective(z1, z2, labels, temperature=0.5):
    """SupCLR: every other view with the same label is a positive."""
    labels = torch.as_tensor(labels).repeat(2)
    mask = labels[:, None] == labels[None, :]
    return multi_positive_objective(torch.cat([z1, z2]), mask, temperature)


def cls_si_objective(shift_logits, shift_labels):
    shift_labels = torch.as_tensor(shift_labels, dtype=torch.long)
    k = shift_logits.shape[1]
    if bool((shift_labels >= k).any()) or bool((shift_labels < 0).any()):
        raise ValueError(f"shift label out of range for K={k}")
    return F.cross_entropy(shift_logits, shift_labels)


def joint_labels(labels, shift_labels, num_classes):
    """Joint label (y, k) -> k * num_classes + y."""
    return torch.as_tensor(shift_labels) * num_classes + torch.as_tensor(labels)


# -- views ---------------------------------------------------------------------


def shifted_union(x, family, rng=None):
    """Stack S_0(x), ..., S_{K-1}(x) shift-major; returns (batch, shift labels)."""
    if rng is None:
        rng = np.random.default_rng(0)
    parts = [family.apply(x, k, rng) for k in range(family.K)]
    labels = torch.arange(family.K).repeat_interleave(x.shape[0])
    return torch.cat(parts), labels


def random_shift_each(x, family, rng):
    """Apply an independently drawn S_k to every image (shift used as T)."""
    ks = rng.integers(0, family.K, size=x.shape[0])
    out = x.clone()
    for k in range(1, family.K):
        idx = np.flatnonzero(ks == k)
        if len(idx):
            out[torch.as_tensor(idx)] = family.apply(x[torch.as_tensor(idx)], k, rng)
    return out, torch.as_tensor(ks)


def two_views(x, policy, rng):
    a1 = sample_augmentations(policy, x.shape[0], rng)
    a2 = sample_augmentations(policy, x.shape[0], rng)
    return apply_augmentation(x, a1), apply_augmentation(x, a2)


def _check_views(n, max_views):
    if n > max_views:
        raise ValueError(f"{n} augmented views exceed the memory cap of {max_views}")


def _embed_pair(bundle, v1, v2):
    f, z = bundle(torch.cat([v1, v2]))
    return f, z[:v1.shape[0]], z[v1.shape[0]:]


# -- losses on image batches --------------------------------------------------


def simclr_loss(x, policy: AugmentationPolicy, bundle, temperature=0.5, rng=None,
                family: ShiftFamily | None = None, align_shift_as_positive=False):
    """SimCLR on a batch.  With ``align_shift_as_positive`` each view also gets
    a random member of ``family`` applied, i.e. the shift acts as part of T."""
    rng = np.random.default_rng(0) if rng is None else rng
    v1, v2 = two_views(x, policy, rng)
    if align_shift_as_positive:
        if family is None:
            raise ValueError("align_shift_as_positive needs a shift family")
        v1, _ = random_shift_each(v1, family, rng)
        v2, _ = random_shift_each(v2, family, rng)
    _, z1, z2 = _embed_pair(bundle, v1, v2)
    return simclr_objective(z1, z2, temperature)


def _shifted_views(x, family, policy, rng, max_views):
    _check_views(2 * family.K * x.shape[0], max_views)
    union, shift_labels = shifted_union(x, family, rng)
    v1, v2 = two_views(union, policy, rng)
    return v1, v2, shift_labels


def con_si_loss(x, family, policy, bundle, temperature=0.5, rng=None, max_views=MAX_VIEWS):
    """SimCLR on the union of shifted batches; shifted copies are negatives."""
    rng = np.random.default_rng(0) if rng is None else rng
    v1, v2, _ = _shifted_views(x, family, policy, rng, max_views)
    _, z1, z2 = _embed_pair(bundle, v1, v2)
    return simclr_objective(z1, z2, temperature)


def cls_si_loss(views, shift_labels, bundle):
    """Mean cross-entropy of the shift classifier over already-built views."""
    return cls_si_objective(bundle.shift_logits(views), shift_labels)


def csi_loss(x, family, policy, bundle, config: LossConfig = LossConfig(), rng=None,
             max_views=MAX_VIEWS):
    """con-SI + lambda * cls-SI on one shared set of views.

    Returns ``(total, {"con_si": ..., "cls_si": ...})``.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    if config.align_shift_as_positive:
        v1, v2 = two_views(x, policy, rng)
        v1, k1 = random_shift_each(v1, family, rng)
        v2, k2 = random_shift_each(v2, family, rng)
        f, z1, z2 = _embed_pair(bundle, v1, v2)
        shift_labels = torch.cat([k1, k2])
    else:
        v1, v2, labels = _shifted_views(x, family, policy, rng, max_views)
        f, z1, z2 = _embed_pair(bundle, v1, v2)
        shift_labels = labels.repeat(2)
    con = simclr_objective(z1, z2, config.temperature)
    cls = cls_si_objective(bundle.shift_logits_from_features(f), shift_labels)
    return con + config.lambda_cls * cls, {"con_si": con, "cls_si": cls}


def supclr_loss(x, labels, policy, bundle, temperature=0.5, rng=None):
    rng = np.random.default_rng(0) if rng is None else rng
    labels = torch.as_tensor(labels)
    if labels.numel() != x.shape[0]:
        raise ValueError("need one label per image")
    v1, v2 = two_views(x, policy, rng)
    _, z1, z2 = _embed_pair(bundle, v1, v2)
    return supclr_objective(z1, z2, labels, temperature)


def sup_csi_loss(x, labels, family, policy, bundle, temperature=0.5, rng=None,
                 max_views=MAX_VIEWS):
    """SupCLR over joint (class, shift) labels on the shifted union."""
    rng = np.random.default_rng(0) if rng is None else rng
    labels = torch.as_tensor(labels)
    if labels.numel() != x.shape[0]:
        raise ValueError("need one label per image")
    v1, v2, shift_labels = _shifted_views(x, family, policy, rng, max_views)
    num_classes = int(labels.max()) + 1
    joint = joint_labels(labels.repeat(family.K), shift_labels, num_classes)
    _, z1, z2 = _embed_pair(bundle, v1, v2)
    return supclr_objective(z1, z2, joint, temperature)


def compute_loss(config: LossConfig, x, bundle, policy, family, rng, labels=None,
                 max_views=MAX_VIEWS):
    """Dispatch on ``config.mode``; returns (total, components dict of floats-as-tensors)."""
    mode, tau = config.mode, config.temperature
    if mode in ("supclr", "sup_csi") and labels is None:
        raise ValueError(f"mode {mode!r} needs class labels")
    if mode == "simclr":
        loss = simclr_loss(x, policy, bundle, tau, rng, family, config.align_shift_as_positive)
        return loss, {"simclr": loss}
    if mode == "con_si":
        if config.align_shift_as_positive:
            loss = simclr_loss(x, policy, bundle, tau, rng, family, True)
        else:
            loss = con_si_loss(x, family, policy, bundle, tau, rng, max_views)
        return loss, {"con_si": loss}
    if mode == "cls_si":
        v1, v2, shift_labels = _shifted_views(x, family, policy, rng, max_views)
        loss = cls_si_loss(torch.cat([v1, v2]), shift_labels.repeat(2), bundle)
        return loss, {"cls_si": loss}
    if mode == "csi":
        return csi_loss(x, family, policy, bundle, config, rng, max_views)
    if mode == "supclr":
        loss = supclr_loss(x, labels, policy, bundle, tau, rng)
        return loss, {"supclr": loss}
    loss = sup_csi_loss(x, labels, family, policy, bundle, tau, rng, max_views)
    return loss, {"sup_csi": loss}
