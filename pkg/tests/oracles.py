"""Independent slow reference implementations used by the tests.

Everything here is deliberately naive: explicit Python loops over plain
floats, no shared code with the package under test.
"""

import math

import numpy as np


def cosine(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b) / (math.sqrt(float(a @ a)) * math.sqrt(float(b @ b)))


def anchor_loss(query, positives, negatives, tau):
    """-1/|P| log( sum_P e^{sim/tau} / sum_{P u N} e^{sim/tau} )."""
    num = sum(math.exp(cosine(query, p) / tau) for p in positives)
    den = num + sum(math.exp(cosine(query, n) / tau) for n in negatives)
    return -math.log(num / den) / len(positives)


def naive_multi_positive(views, groups, tau):
    """Average anchor loss over all views; view j is a positive of anchor i
    when groups[i] == groups[j] (j != i).  Anchors without positives skipped."""
    views = [np.asarray(v, dtype=np.float64) for v in views]
    terms = []
    for i, q in enumerate(views):
        pos = [views[j] for j in range(len(views)) if j != i and groups[j] == groups[i]]
        neg = [views[j] for j in range(len(views)) if j != i and groups[j] != groups[i]]
        if pos:
            terms.append(anchor_loss(q, pos, neg, tau))
    return sum(terms) / len(terms) if terms else 0.0


def naive_simclr(z1, z2, tau):
    """Paired views: row i of z1 and row i of z2 come from the same image."""
    b = len(z1)
    views = list(z1) + list(z2)
    groups = list(range(b)) + list(range(b))
    return naive_multi_positive(views, groups, tau)


def naive_supclr(z1, z2, labels, tau):
    views = list(z1) + list(z2)
    groups = list(labels) + list(labels)
    return naive_multi_positive(views, groups, tau)


def brute_auroc(a, b):
    wins = 0.0
    for x in a:
        for y in b:
            if x > y:
                wins += 1.0
            elif x == y:
                wins += 0.5
    return wins / (len(a) * len(b))


def binwalk_ece(conf, correct, n_bins):
    """Walk the bins (lo, hi] one by one and accumulate |acc - conf|."""
    n = len(conf)
    total = 0.0
    for m in range(1, n_bins + 1):
        lo, hi = (m - 1) / n_bins, m / n_bins
        members = [i for i in range(n)
                   if (lo < conf[i] <= hi) or (m == 1 and conf[i] == 0.0)]
        if not members:
            continue
        acc = sum(1.0 for i in members if correct[i]) / len(members)
        avg = sum(conf[i] for i in members) / len(members)
        total += len(members) / n * abs(acc - avg)
    return total


def brute_s_con(query, refs, mode="sim_norm"):
    best = max(cosine(query, r) for r in refs)
    norm = math.sqrt(float(np.dot(query, query)))
    return {"sim": best, "norm": norm, "sim_norm": best * norm}[mode]


def total_variation_loop(px):
    """px: (H, W, C). Each 4-connected unordered pair counted once."""
    h, w, c = px.shape
    tv = 0.0
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                if i + 1 < h:
                    tv += (float(px[i + 1, j, ch]) - float(px[i, j, ch])) ** 2
                if j + 1 < w:
                    tv += (float(px[i, j + 1, ch]) - float(px[i, j, ch])) ** 2
    return tv
