"""Triplet matching, R@K and class-balanced mean recall mR@K."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class SceneHits:
    """Per-GT-triplet rank at which it was first matched (``inf`` if never)."""

    ranks: np.ndarray
    predicates: np.ndarray

    def __len__(self):
        return len(self.ranks)


def match_triplets(pred_triplets, gt_relations, gt_labels=None, task: str = "predcls") -> SceneHits:
    """Greedy rank-order matching of predictions to ground-truth triplets.

    ``pred_triplets`` rows are ``(subject, predicate, object, subject_label,
    object_label)`` in rank order (the label columns may be omitted for
    PredCls).  ``gt_relations`` rows are ``(subject, object, predicate)``.
    A prediction matches a GT triplet with the same (subject, predicate,
    object); for SGCls both predicted labels must also equal ``gt_labels``.
    Each prediction is consumed by at most one GT triplet.
    """
    gt = np.asarray(gt_relations, dtype=np.int64).reshape(-1, 3)
    ranks = np.full(len(gt), np.inf)
    if len(gt) == 0:
        return SceneHits(ranks, gt[:, 2])
    open_by_key: dict[tuple, list[int]] = {}
    for idx, (s, o, p) in enumerate(gt):
        open_by_key.setdefault((int(s), int(p), int(o)), []).append(idx)
    check_labels = task.lower() == "sgcls"
    if check_labels:
        gt_labels = np.asarray(gt_labels, dtype=np.int64)
    for rank, t in enumerate(pred_triplets, start=1):
        key = (int(t[0]), int(t[1]), int(t[2]))
        waiting = open_by_key.get(key)
        if not waiting:
            continue
        if check_labels and (int(t[3]) != gt_labels[key[0]] or int(t[4]) != gt_labels[key[2]]):
            continue
        ranks[waiting.pop(0)] = rank
    return SceneHits(ranks, gt[:, 2].copy())


def recall_at_k(hits: Sequence[SceneHits], k: int) -> float:
    """Per-scene fraction of GT triplets hit within the top ``k``, averaged over scenes with GT."""
    if k < 1:
        raise ValueError("K must be >= 1")
    # exact rational averages, rounded once, so the value does not depend on summation order
    per_scene = [Fraction(int(np.sum(h.ranks <= k)), len(h)) for h in hits if len(h)]
    if not per_scene:
        raise ValueError("no ground-truth triplets in the split")
    return float(sum(per_scene) / len(per_scene))


def _class_counts(hits: Sequence[SceneHits], k: int) -> tuple[dict, dict]:
    hit_count: dict[int, int] = {}
    total: dict[int, int] = {}
    for h in hits:
        for p, r in zip(h.predicates, h.ranks):
            p = int(p)
            total[p] = total.get(p, 0) + 1
            hit_count[p] = hit_count.get(p, 0) + int(r <= k)
    return hit_count, total


def per_class_recall(hits: Sequence[SceneHits], k: int) -> dict[int, float]:
    """Recall per predicate class, pooling that class's GT triplets over the split."""
    hit_count, total = _class_counts(hits, k)
    return {p: hit_count[p] / total[p] for p in sorted(total)}


def mean_recall_at_k(hits: Sequence[SceneHits], k: int) -> float:
    """Mean over predicate classes present in the split of the pooled per-class recall."""
    if k < 1:
        raise ValueError("K must be >= 1")
    hit_count, total = _class_counts(hits, k)
    if not total:
        raise ValueError("no ground-truth triplets in the split")
    return float(sum(Fraction(hit_count[p], total[p]) for p in total) / len(total))
