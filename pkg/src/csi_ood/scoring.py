"""Detection scores on a fitted reference set.

Higher score = more in-distribution.  Scores are evaluated on whole query
batches; reference embeddings are kept as unit directions plus norms so a
coreset (cluster centers with member counts) and the full set share one
representation.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .model import embed_batches
from .transforms import (AugmentationPolicy, ShiftFamily, apply_augmentation,
                         family_from_descriptor, sample_augmentations)

logger = logging.getLogger(__name__)

SCORE_MODES = ("sim", "norm", "sim_norm")
SCORE_KINDS = ("s_con", "s_con_si", "s_cls_si", "s_csi")
STATE_SCHEMA = 1


@dataclass
class ReferenceSet:
    """Per-shift reference embeddings.

    directions: (K, M, d) unit vectors; norms and weights: (K, M).  For the
    full training set every weight is 1; a coreset stores member counts.
    shift_logits: (K, M_train) values W_k . f(S_k(x_m)) or None.
    """
    directions: np.ndarray
    norms: np.ndarray
    weights: np.ndarray
    shift_logits: np.ndarray | None = None
    ids: list | None = None

    def __post_init__(self):
        if self.directions.ndim != 3 or self.directions.shape[1] < 1:
            raise ValueError("reference needs shape (K, M, d) with M >= 1")
        if self.norms.shape != self.directions.shape[:2] or self.weights.shape != self.norms.shape:
            raise ValueError("norms/weights must be (K, M)")
        if not np.all(np.isfinite(self.directions)) or not np.all(np.isfinite(self.norms)):
            raise ValueError("reference embeddings must be finite")

    @classmethod
    def from_embeddings(cls, z, shift_logits=None, ids=None):
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 2:
            z = z[None]
        norms = np.linalg.norm(z, axis=-1)
        if np.any(norms == 0):
            raise ValueError("zero-norm reference embedding")
        return cls(z / norms[..., None], norms, np.ones_like(norms),
                   None if shift_logits is None else np.asarray(shift_logits, np.float64), ids)

    @property
    def K(self):
        return self.directions.shape[0]

    @property
    def size(self):
        return self.directions.shape[1]

    def embeddings(self, k):
        return self.directions[k] * self.norms[k][:, None]


def balancing_con(reference: ReferenceSet):
    """lambda_con[k] = M / sum_m ||z(S_k(x_m))||; member weights make this
    exact for a coreset as well."""
    return reference.weights.sum(1) / (reference.weights * reference.norms).sum(1)


def balancing_cls(shift_logits):
    """lambda_cls[k] = M / sum_m W_k . f(S_k(x_m)).

    A non-positive sum would flip the sign of shift k's contribution, so the
    absolute value of the sum is used and a warning raised.
    """
    shift_logits = np.asarray(shift_logits, dtype=np.float64)
    sums = shift_logits.sum(1)
    if np.any(sums <= 0):
        warnings.warn("non-positive shift-logit sum in cls balancing; using |sum|",
                      RuntimeWarning, stacklevel=2)
    sums = np.abs(sums)
    sums[sums == 0] = 1.0
    return shift_logits.shape[1] / sums


@dataclass
class ScorerState:
    reference: ReferenceSet
    lambda_con: np.ndarray
    lambda_cls: np.ndarray | None
    score_mode: str = "sim_norm"
    ensemble_n: int = 1
    controlled_policy: bool = False
    policy: AugmentationPolicy | None = None
    balance: bool = True
    family: dict | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}")
        if self.ensemble_n < 1:
            raise ValueError("ensemble_n must be >= 1")

    def check_consistency(self, atol=1e-9):
        if not self.balance:
            return np.allclose(self.lambda_con, 1.0)
        return np.allclose(self.lambda_con, balancing_con(self.reference), rtol=0, atol=atol)

    @property
    def test_policy(self):
        if self.policy is None:
            return None
        return self.policy.controlled() if self.controlled_policy else self.policy


# -- raw embedding-level scores ---------------------------------------------


def con_score(query_z, directions, mode="sim_norm"):
    """max_m sim(z_m, z) * ||z|| (or either factor alone) for each query row."""
    query_z = np.asarray(query_z, dtype=np.float64)
    if query_z.ndim == 1:
        query_z = query_z[None]
    qn = np.linalg.norm(query_z, axis=1)
    if np.any(qn == 0):
        raise ValueError("zero-norm query embedding")
    if mode == "norm":
        return qn
    sim = ((query_z / qn[:, None]) @ np.asarray(directions, np.float64).T).max(1)
    if mode == "sim":
        return sim
    if mode != "sim_norm":
        raise ValueError(f"unknown score mode {mode!r}")
    return sim * qn


def con_si_score(query_z, state: ScorerState):
    """query_z: (K, N, d) embeddings of S_k(x)."""
    total = 0.0
    for k in range(state.reference.K):
        total = total + state.lambda_con[k] * con_score(query_z[k], state.reference.directions[k],
                                                        state.score_mode)
    return total


def cls_si_score(query_logits, state: ScorerState):
    """query_logits: (K, N) values W_k . f(S_k(x))."""
    if state.lambda_cls is None:
        raise ValueError("scorer was fitted without a shift head")
    return sum(state.lambda_cls[k] * np.asarray(query_logits[k], np.float64)
               for k in range(len(state.lambda_cls)))


# -- model-level feature extraction ------------------------------------------


def shift_outputs(bundle, x, family: ShiftFamily, rng=None, policy=None, need_logits=True):
    """z(S_k(T_k(x))) of shape (K, N, d) and W_k . f(S_k(T_k(x))) of shape (K, N).

    Each shift gets its own augmentation draw when ``policy`` is given.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x = torch.as_tensor(x)
    zs, logits = [], []
    for k in range(family.K):
        v = x
        if policy is not None:
            v = apply_augmentation(x, sample_augmentations(policy, x.shape[0], rng))
        v = family.apply(v, k, rng)
        f, z = embed_batches(bundle, v)
        zs.append(z.double().numpy())
        if need_logits and bundle.shift_head is not None:
            with torch.no_grad():
                w = bundle.shift_head.weight[k]
                logits.append((f @ w).double().numpy())
    return np.stack(zs), (np.stack(logits) if logits else None)


def fit_scorer(bundle, family: ShiftFamily, train_images, score_mode="sim_norm", balance=True,
               ensemble_n=1, policy=None, controlled_policy=False, coreset_ratio=1.0, seed=0,
               ids=None):
    """Embed every S_k(x_m) in eval mode and compute the balancing terms."""
    train_images = torch.as_tensor(train_images)
    if train_images.shape[0] == 0:
        raise ValueError("cannot fit a scorer on an empty training set")
    if bundle.shift_head is not None and bundle.num_shifts != family.K:
        raise ValueError(f"model was trained for K={bundle.num_shifts} shifts, family has "
                         f"K={family.K}")
    z, logits = shift_outputs(bundle, train_images, family, np.random.default_rng(seed))
    reference = ReferenceSet.from_embeddings(z, logits, ids)
    if balance:
        lam_con = balancing_con(reference)
        lam_cls = balancing_cls(logits) if logits is not None else None
    else:
        lam_con = np.ones(family.K)
        lam_cls = np.ones(family.K) if logits is not None else None
    if coreset_ratio < 1.0:
        reference = build_coreset(reference, coreset_ratio, seed)
    return ScorerState(reference=reference, lambda_con=lam_con, lambda_cls=lam_cls,
                       score_mode=score_mode, ensemble_n=ensemble_n,
                       controlled_policy=controlled_policy, policy=policy, balance=balance,
                       family=family.descriptor, meta={"seed": seed, "train_size": len(train_images),
                                                       "coreset_ratio": coreset_ratio})


def _ensembled(bundle, x, family, state, rng, kinds):
    policy = state.test_policy
    n = state.ensemble_n if policy is not None else 1
    totals = {k: 0.0 for k in kinds}
    need_logits = any(k in ("s_cls_si", "s_csi") for k in kinds)
    for _ in range(n):
        z, logits = shift_outputs(bundle, x, family, rng, policy, need_logits)
        for kind in kinds:
            totals[kind] = totals[kind] + _score_from_outputs(kind, z, logits, state)
    return {k: v / n for k, v in totals.items()}


def _score_from_outputs(kind, z, logits, state):
    if kind == "s_con":
        return con_score(z[0], state.reference.directions[0], state.score_mode)
    if kind == "s_con_si":
        return con_si_score(z, state)
    if kind == "s_cls_si":
        if logits is None:
            raise ValueError("score s_cls_si needs a shift head")
        return cls_si_score(logits, state)
    if kind == "s_csi":
        if logits is None:
            raise ValueError("score s_csi needs a shift head")
        return con_si_score(z, state) + cls_si_score(logits, state)
    raise ValueError(f"unknown score kind {kind!r}; options: {SCORE_KINDS}")


def _family_for(state, family):
    if family is not None:
        return family
    if state.family is None:
        raise ValueError("no shift family bound to scorer state")
    return family_from_descriptor(state.family)


def score(kind, x, state: ScorerState, bundle, family=None, rng=None):
    """Score a batch of images; ``kind`` is one of SCORE_KINDS."""
    if kind not in SCORE_KINDS:
        raise ValueError(f"unknown score kind {kind!r}; options: {SCORE_KINDS}")
    family = _family_for(state, family)
    if kind == "s_con":
        family = _IdentityView(family)
    rng = np.random.default_rng(state.meta.get("seed", 0)) if rng is None else rng
    return _ensembled(bundle, x, family, state, rng, [kind])[kind]


def score_all(x, state, bundle, family=None, rng=None, kinds=SCORE_KINDS):
    """Several score kinds from one shared set of forward passes."""
    family = _family_for(state, family)
    rng = np.random.default_rng(state.meta.get("seed", 0)) if rng is None else rng
    return _ensembled(bundle, x, family, state, rng, list(kinds))


class _IdentityView:
    """Restricts a family to its identity member (s_con uses S_0 only)."""

    def __init__(self, family):
        self._family = family
        self.K = 1

    def apply(self, x, k, rng=None):
        return self._family.apply(x, 0, rng)


def s_con(x, state, bundle, rng=None):
    return score("s_con", x, state, bundle, rng=rng)


def s_con_si(x, state, bundle, family=None, rng=None):
    return score("s_con_si", x, state, bundle, family, rng)


def s_cls_si(x, state, bundle, family=None, rng=None):
    return score("s_cls_si", x, state, bundle, family, rng)


def s_csi(x, state, bundle, family=None, rng=None):
    return score("s_csi", x, state, bundle, family, rng)


def ensemble_score(score_fn, x, policy: AugmentationPolicy, n, rng, controlled=False,
                   return_draws=False):
    """Mean of ``score_fn(T(x))`` over ``n`` draws T from ``policy``."""
    if n < 1:
        raise ValueError("ensemble size n must be >= 1")
    if controlled:
        policy = policy.controlled()
    x = torch.as_tensor(x)
    draws = []
    for _ in range(n):
        aug = sample_augmentations(policy, x.shape[0], rng)
        draws.append(np.asarray(score_fn(apply_augmentation(x, aug)), dtype=np.float64))
    mean = np.mean(draws, axis=0)
    return (mean, draws) if return_draws else mean


# -- coreset -----------------------------------------------------------------


def coreset_size(ratio, total):
    if not 0.0 < ratio <= 1.0:
        raise ValueError("coreset ratio must lie in (0, 1]")
    size = math.ceil(ratio * total - 1e-9)
    if size < 1:
        raise ValueError(f"ratio {ratio} leaves no center out of {total}")
    return size


def spherical_kmeans(directions, n_clusters, seed=0, max_iter=100, tol=1e-6):
    """K-means on unit vectors with cosine similarity.

    Farthest-point initialisation from a seeded first center; an emptied
    cluster is re-seeded with the point least similar to its nearest center.
    Returns (unit centers, assignment).
    """
    x = np.asarray(directions, dtype=np.float64)
    m = x.shape[0]
    rng = np.random.default_rng(seed)
    idx = [int(rng.integers(m))]
    best = x @ x[idx[0]]
    while len(idx) < n_clusters:
        nxt = int(np.argmin(best))
        idx.append(nxt)
        best = np.maximum(best, x @ x[nxt])
    centers = x[idx].copy()
    assign = np.zeros(m, dtype=int)
    for _ in range(max_iter):
        sims = x @ centers.T
        assign = sims.argmax(1)
        new = np.zeros_like(centers)
        for c in range(n_clusters):
            members = x[assign == c]
            if len(members) == 0:
                far = int(np.argmin(sims.max(1)))
                new[c] = x[far]
                assign[far] = c
                sims[far] = np.inf
                continue
            mean = members.sum(0)
            norm = np.linalg.norm(mean)
            new[c] = mean / norm if norm > 0 else members[0]
        shift = np.max(np.linalg.norm(new - centers, axis=1))
        centers = new
        if shift < tol:
            break
    assign = (x @ centers.T).argmax(1)
    return centers, assign


def build_coreset(reference: ReferenceSet, ratio, seed=0) -> ReferenceSet:
    """Replace each shift's references by K-means centers; ratio 1 is a no-op.

    Center norm = mean norm of its members; weight = member count.
    """
    size = coreset_size(ratio, reference.size)
    if ratio >= 1.0:
        return reference
    dirs, norms, weights = [], [], []
    for k in range(reference.K):
        centers, assign = spherical_kmeans(reference.directions[k], size, seed + k)
        cn = np.zeros(size)
        cw = np.zeros(size)
        for c in range(size):
            members = assign == c
            cw[c] = members.sum()
            cn[c] = reference.norms[k][members].mean() if cw[c] else 0.0
        keep = cw > 0
        # an empty final cluster is dropped; pad by repeating a live center so
        # every shift keeps the same number of rows
        if not keep.all():
            fill = np.flatnonzero(keep)[0]
            centers[~keep], cn[~keep] = centers[fill], cn[fill]
        dirs.append(centers)
        norms.append(cn)
        weights.append(cw)
    return ReferenceSet(np.stack(dirs), np.stack(norms), np.stack(weights),
                        reference.shift_logits, None)


# -- persistence -------------------------------------------------------------


def save_state(state: ScorerState, state_path, cache_path):
    """State (lambdas, options) as JSON; reference embeddings as JSON lines."""
    state_path, cache_path = Path(state_path), Path(cache_path)
    state_path.parent.mkdir(parents=True, exist_ok=True)
    cache_path.parent.mkdir(parents=True, exist_ok=True)
    ref = state.reference
    with open(cache_path, "w") as fh:
        for k in range(ref.K):
            for m in range(ref.size):
                rec = {"id": ref.ids[m] if ref.ids is not None else m, "shift": k,
                       "z": (ref.directions[k, m] * ref.norms[k, m]).tolist(),
                       "norm": float(ref.norms[k, m]), "weight": float(ref.weights[k, m])}
                if ref.shift_logits is not None and ref.shift_logits.shape[1] == ref.size:
                    rec["shift_logit"] = float(ref.shift_logits[k, m])
                fh.write(json.dumps(rec) + "\n")
    doc = {
        "schema": STATE_SCHEMA,
        "lambda_con": state.lambda_con.tolist(),
        "lambda_cls": None if state.lambda_cls is None else state.lambda_cls.tolist(),
        "score_mode": state.score_mode,
        "ensemble_n": state.ensemble_n,
        "controlled_policy": state.controlled_policy,
        "policy": None if state.policy is None else state.policy.to_dict(),
        "balance": state.balance,
        "family": state.family,
        "meta": state.meta,
        "shift_logits": None if ref.shift_logits is None else ref.shift_logits.tolist(),
        "cache": str(cache_path),
    }
    with open(state_path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
    return state_path


def load_state(state_path, cache_path=None) -> ScorerState:
    state_path = Path(state_path)
    if not state_path.exists():
        raise FileNotFoundError(f"scorer state not found: {state_path}")
    with open(state_path) as fh:
        doc = json.load(fh)
    if doc.get("schema", 0) > STATE_SCHEMA:
        raise ValueError(f"unsupported scorer state schema {doc.get('schema')}")
    cache_path = Path(cache_path or doc["cache"])
    if not cache_path.exists():
        raise FileNotFoundError(f"embedding cache not found: {cache_path}")
    rows: dict[int, list] = {}
    with open(cache_path) as fh:
        for line in fh:
            rec = json.loads(line)
            rows.setdefault(rec["shift"], []).append(rec)
    K = len(rows)
    z = np.array([[r["z"] for r in rows[k]] for k in range(K)], dtype=np.float64)
    norms = np.array([[r["norm"] for r in rows[k]] for k in range(K)], dtype=np.float64)
    weights = np.array([[r["weight"] for r in rows[k]] for k in range(K)], dtype=np.float64)
    dirs = z / np.linalg.norm(z, axis=-1, keepdims=True)
    logits = doc.get("shift_logits")
    ids = [r["id"] for r in rows[0]]
    reference = ReferenceSet(dirs, norms, weights,
                             None if logits is None else np.asarray(logits, np.float64), ids)
    return ScorerState(
        reference=reference,
        lambda_con=np.asarray(doc["lambda_con"], np.float64),
        lambda_cls=None if doc["lambda_cls"] is None else np.asarray(doc["lambda_cls"], np.float64),
        score_mode=doc["score_mode"], ensemble_n=doc["ensemble_n"],
        controlled_policy=doc["controlled_policy"],
        policy=None if doc["policy"] is None else AugmentationPolicy.from_dict(doc["policy"]),
        balance=doc["balance"], family=doc["family"], meta=doc["meta"])


def with_coreset(state: ScorerState, ratio, seed=0) -> ScorerState:
    return replace(state, reference=build_coreset(state.reference, ratio, seed),
                   meta={**state.meta, "coreset_ratio": ratio})
