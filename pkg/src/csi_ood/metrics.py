"""AUROC, OOD-ness of a transformation, and evaluation reports."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .data import DatasetSplit, stack_pixels


def auroc(in_scores, out_scores):
    """P(s_in > s_out) + 0.5 P(s_in = s_out), via the Mann-Whitney U statistic
    with midranks for ties.  In-distribution is the positive class."""
    a = np.asarray(in_scores, dtype=np.float64).ravel()
    b = np.asarray(out_scores, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("AUROC needs non-empty in- and out-distribution score lists")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("scores must be finite")
    ranks = rankdata(np.concatenate([a, b]), method="average")
    u = ranks[:a.size].sum() - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def oodness(bundle, transform, in_test, state, rng=None):
    """AUROC of s_con between in-distribution images and ``transform(images)``.

    ``transform`` maps a (B, C, H, W) tensor to a tensor of the same layout.
    """
    from .scoring import score

    x = torch.as_tensor(in_test)
    shifted = transform(x)
    s_in = score("s_con", x, state, bundle, rng=rng)
    s_out = score("s_con", shifted, state, bundle, rng=rng)
    return auroc(s_in, s_out)


def _summary(scores):
    s = np.asarray(scores, dtype=np.float64)
    return {"n": int(s.size), "mean": float(s.mean()), "std": float(s.std()),
            "min": float(s.min()), "max": float(s.max())}


@dataclass
class EvalReport:
    score_kind: str
    auroc: dict[str, float]
    mean_auroc: float
    score_summary: dict[str, dict] = field(default_factory=dict)
    accuracy: float | None = None
    ece: float | None = None
    calibration_bins: list | None = None
    config: dict = field(default_factory=dict)
    seed: int | None = None
    scores: dict[str, list] = field(default_factory=dict)

    def __post_init__(self):
        for name, value in self.auroc.items():
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"AUROC for {name!r} outside [0, 1]: {value}")

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))

    def table(self):
        lines = [f"score: {self.score_kind}", f"{'source':<24}{'AUROC':>10}"]
        for name, value in self.auroc.items():
            lines.append(f"{name:<24}{100 * value:>9.2f}%")
        lines.append(f"{'mean':<24}{100 * self.mean_auroc:>9.2f}%")
        if self.accuracy is not None:
            lines.append(f"{'accuracy':<24}{100 * self.accuracy:>9.2f}%")
        if self.ece is not None:
            lines.append(f"{'ECE':<24}{100 * self.ece:>9.2f}%")
        return "\n".join(lines)

    def save(self, out_dir, stem="report"):
        """Writes ``<stem>.json``, ``<stem>.txt`` and, when per-sample scores
        are present, ``<stem>_scores.jsonl`` with (id, score, source) rows."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.json").write_text(self.to_json())
        (out_dir / f"{stem}.txt").write_text(self.table() + "\n")
        if self.scores:
            with open(out_dir / f"{stem}_scores.jsonl", "w") as fh:
                for source, rows in self.scores.items():
                    for uid, value in rows:
                        fh.write(json.dumps({"id": uid, "score": value, "source": source}) + "\n")
        return out_dir / f"{stem}.json"


def report_from_scores(in_scores, ood_scores: dict, score_kind="custom", config=None, seed=None,
                       accuracy=None, ece=None, calibration_bins=None, ids=None):
    """Per-source AUROC plus their unweighted mean.

    ``ids`` optionally maps "in" and each source name to sample identifiers;
    the per-sample scores are then kept on the report.
    """
    if not ood_scores:
        raise ValueError("evaluation needs at least one OOD source")
    per = {name: auroc(in_scores, s) for name, s in ood_scores.items()}
    summary = {"in": _summary(in_scores)}
    summary.update({name: _summary(s) for name, s in ood_scores.items()})
    return EvalReport(score_kind=score_kind, auroc=per, mean_auroc=float(np.mean(list(per.values()))),
                      score_summary=summary, accuracy=accuracy, ece=ece,
                      calibration_bins=calibration_bins, config=config or {}, seed=seed,
                      scores=_per_sample(in_scores, ood_scores, ids))


def _per_sample(in_scores, ood_scores, ids):
    if ids is None:
        return {}
    out = {"in": [[u, float(v)] for u, v in zip(ids["in"], np.ravel(in_scores))]}
    for name, s in ood_scores.items():
        out[name] = [[u, float(v)] for u, v in zip(ids[name], np.ravel(s))]
    return out


def evaluate(bundle, state, split: DatasetSplit, score_kind="s_csi", config=None, seed=0,
             family=None, scores=None):
    """Score in_test and every OOD source, returning an EvalReport.

    ``scores`` may carry precomputed ``{"in": [...], "<source>": [...]}``.
    Detection kinds come from the scorer; ``s_sup`` / ``s_sup_ens`` use the
    classifier confidence and also report accuracy and ECE when labels exist.
    """
    if not split.ood_test:
        raise ValueError("split has no OOD test sources")
    config = dict(config or {})
    if scores is not None:
        ood = {k: v for k, v in scores.items() if k != "in"}
        return report_from_scores(scores["in"], ood, score_kind, config, seed)
    if score_kind in ("s_sup", "s_sup_ens"):
        return _evaluate_confidence(bundle, split, score_kind, config, seed, family, state)
    from .scoring import score

    def run(samples):
        return score(score_kind, torch.from_numpy(stack_pixels(samples)), state, bundle,
                     family, np.random.default_rng(seed))

    in_scores = run(split.in_test)
    ood = {name: run(samples) for name, samples in split.ood_test.items()}
    return report_from_scores(in_scores, ood, score_kind, config, seed, ids=_split_ids(split))


def _split_ids(split):
    ids = {"in": [s.uid for s in split.in_test]}
    ids.update({name: [s.uid for s in samples] for name, samples in split.ood_test.items()})
    return ids


def _evaluate_confidence(bundle, split, kind, config, seed, family, state):
    from .calibration import calibration_bins, class_probabilities, confidence, ece

    if kind == "s_sup_ens" and family is None:
        from .transforms import family_from_descriptor
        family = family_from_descriptor(state.family)

    def probs(samples):
        x = torch.from_numpy(stack_pixels(samples))
        return class_probabilities(bundle, x, family if kind == "s_sup_ens" else None)

    p_in = probs(split.in_test)
    in_scores = confidence(p_in)
    ood = {name: confidence(probs(s)) for name, s in split.ood_test.items()}
    acc = err = bins = None
    if all(s.label is not None for s in split.in_test):
        y = np.array([s.label for s in split.in_test])
        correct = p_in.argmax(1) == y
        acc = float(correct.mean())
        m_bins = int(config.get("ece_bins", 15))
        err = ece(in_scores, correct, m_bins)
        bins = calibration_bins(in_scores, correct, m_bins)
    return report_from_scores(in_scores, ood, kind, config, seed, acc, err, bins,
                              ids=_split_ids(split))
