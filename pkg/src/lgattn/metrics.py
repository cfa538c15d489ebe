"""Ranking metrics for multi-label video predictions: GAP, MAP, PERR, Hit@1.

Input everywhere is a list of (scores, labels) pairs: a per-class score
vector in [0, 1] and the set of true class indices. All tie-breaks are
fixed (lower class index first, then lower video index) so results are
bitwise reproducible.
"""

import json
from dataclasses import dataclass

import numpy as np


def _check(preds):
    if not preds:
        raise ValueError("empty prediction set")
    for scores, labels in preds:
        s = np.asarray(scores)
        if not np.all(np.isfinite(s)):
            raise ValueError("non-finite scores")
        if labels and max(labels) >= s.shape[0]:
            raise ValueError("label index out of range")


def _top_indices(scores, k):
    """Class indices of the k best scores, ties broken by lower index."""
    order = sorted(range(len(scores)), key=lambda c: (-scores[c], c))
    return order[:k]


def hit_at_1(preds):
    """Fraction of videos whose top-scoring class is a true label."""
    _check(preds)
    hits = sum(1 for scores, labels in preds
               if _top_indices(scores, 1)[0] in labels)
    return hits / len(preds)


def perr(preds):
    """Precision among each video's top-|labels| classes, averaged."""
    _check(preds)
    total = 0.0
    for scores, labels in preds:
        if not labels:
            raise ValueError("perr needs at least one true label per video")
        top = _top_indices(scores, len(labels))
        total += sum(1 for c in top if c in labels) / len(labels)
    return total / len(preds)


def per_class_average_precision(preds):
    """AP of each class's video ranking; only classes with >= 1 positive."""
    _check(preds)
    num_classes = len(preds[0][0])
    aps = []
    for c in range(num_classes):
        ranked = sorted(range(len(preds)), key=lambda v: (-preds[v][0][c], v))
        n_pos = sum(1 for _, labels in preds if c in labels)
        if n_pos == 0:
            continue
        hits = 0
        ap = 0.0
        for rank, v in enumerate(ranked, start=1):
            if c in preds[v][1]:
                hits += 1
                ap += hits / rank
        aps.append(ap / n_pos)
    if not aps:
        raise ValueError("no class has a positive example")
    return aps


def mean_average_precision(preds):
    """Per-class AP averaged over classes with at least one positive video."""
    return float(np.mean(per_class_average_precision(preds)))


def gap(preds, top_k=20):
    """Global AP over the pooled per-video top-k predictions.

    Every video contributes its top_k scored classes to one global list,
    sorted by score (ties: video index, then class index); the AP of that
    list is computed with the positive count capped at min(|labels|, top_k)
    per video.
    """
    _check(preds)
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    pooled = []
    n_pos = 0
    for v, (scores, labels) in enumerate(preds):
        n_pos += min(len(labels), top_k)
        for c in _top_indices(scores, top_k):
            pooled.append((-float(scores[c]), v, c, c in labels))
    if n_pos == 0:
        raise ValueError("no true labels in prediction set")
    pooled.sort()
    hits = 0
    ap = 0.0
    for rank, (_, _, _, is_pos) in enumerate(pooled, start=1):
        if is_pos:
            hits += 1
            ap += hits / rank
    return ap / n_pos


@dataclass
class EvalReport:
    gap: float
    map: float
    perr: float
    hit1: float
    per_class_ap: list

    def to_json(self):
        return json.dumps({"gap": self.gap, "map": self.map, "perr": self.perr,
                           "hit1": self.hit1, "per_class_ap": self.per_class_ap},
                          indent=2)


def evaluate(preds, top_k=20):
    aps = per_class_average_precision(preds)
    return EvalReport(gap=gap(preds, top_k), map=float(np.mean(aps)),
                      perr=perr(preds), hit1=hit_at_1(preds), per_class_ap=aps)
