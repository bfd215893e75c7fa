"""Input-smoothness statistics for auditing OOD benchmarks.

A data set that a score this simple can separate from the training data is
detectable from low-level statistics alone, whatever the semantics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Sample
from .metrics import auroc

DEFAULT_THRESHOLD = 0.8


def _pixels(x):
    return x.pixels if isinstance(x, Sample) else np.asarray(x, dtype=np.float64)


def total_variation(x):
    """Sum of squared differences over 4-connected pixel pairs, each unordered
    pair counted once, summed over channels."""
    px = np.asarray(_pixels(x), dtype=np.float64)
    if px.ndim == 2:
        px = px[:, :, None]
    dv = np.diff(px, axis=0)
    dh = np.diff(px, axis=1)
    return float((dv ** 2).sum() + (dh ** 2).sum())


@dataclass
class SmoothnessStats:
    train_mean_tv: float
    tv: list
    smoothness: list


def train_mean_tv(train_set):
    if len(train_set) == 0:
        raise ValueError("smoothness score needs a non-empty training set")
    return float(np.mean([total_variation(x) for x in train_set]))


def smoothness_score(x, train_set=None, mean_tv=None):
    """|TV(x) - mean TV of the training samples|.  Pass ``mean_tv`` to reuse
    a precomputed training mean."""
    if mean_tv is None:
        mean_tv = train_mean_tv(train_set if train_set is not None else [])
    return abs(total_variation(x) - mean_tv)


def smoothness_stats(samples, mean_tv):
    tv = [total_variation(x) for x in samples]
    return SmoothnessStats(mean_tv, tv, [abs(t - mean_tv) for t in tv])


def audit_report(in_train, candidate_sets, in_test=None, threshold=DEFAULT_THRESHOLD):
    """AUROC of the smoothness score, in-distribution vs each candidate set.

    The smoothness score is low for in-distribution data, so its negation is
    used as the detection score.  ``in_test`` defaults to ``in_train``.
    Rows above ``threshold`` are flagged as statistically detectable.
    """
    if not candidate_sets:
        raise ValueError("no candidate sets to audit")
    mean_tv = train_mean_tv(in_train)
    reference = in_test if in_test is not None else in_train
    if len(reference) == 0:
        raise ValueError("in-distribution test set is empty")
    s_in = -np.asarray(smoothness_stats(reference, mean_tv).smoothness)
    rows = []
    for name, samples in candidate_sets.items():
        if len(samples) == 0:
            raise ValueError(f"candidate set {name!r} is empty")
        s_out = -np.asarray(smoothness_stats(samples, mean_tv).smoothness)
        value = auroc(s_in, s_out)
        rows.append({"source": name, "n": len(samples), "auroc": value,
                     "detectable": value > threshold})
    return {"train_mean_tv": mean_tv, "threshold": threshold, "rows": rows}


def format_audit(report):
    lines = [f"train mean TV: {report['train_mean_tv']:.4f}",
             f"{'source':<28}{'n':>6}{'AUROC':>10}  flag"]
    for row in report["rows"]:
        flag = "detectable" if row["detectable"] else ""
        lines.append(f"{row['source']:<28}{row['n']:>6}{100 * row['auroc']:>9.2f}%  {flag}")
    return "\n".join(lines)
