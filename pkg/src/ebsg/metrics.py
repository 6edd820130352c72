"""Relationship-recall metrics and the constraint-violation diagnostic.

Triplets are matched by node identity: a prediction (i, j, p) counts
iff the ground truth has predicate p on exactly that ordered node pair.
Recall@K truncates the ranked candidate list; mean recall averages
per-predicate recalls (pooled across images) so rare predicates weigh
as much as common ones.  Zero- and few-shot variants restrict the
ground truth by how often its class-level triplet occurred in training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import LabelSpace, SceneGraphState, rule_violations

SETTINGS = ("predcls", "sgcls")


@dataclass
class RankedTriplets:
    """(subject node, object node, predicate, score), scores non-increasing;
    the no-relation predicate never appears."""

    entries: list

    def top(self, k: int) -> set:
        return {(i, j, p) for i, j, p, _ in self.entries[:k]}


def rank_triplets(sg_pred: SceneGraphState, setting: str) -> RankedTriplets:
    """Score all off-diagonal (i, j, p != 0) candidates and sort.

    predcls scores by the predicate probability alone (object labels are
    given); sgcls multiplies in both nodes' max class probabilities.
    Ties break lexicographically on (i, j, p).
    """
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}")
    r = sg_pred.R.value
    n, _, d_prime = r.shape
    if setting == "sgcls":
        node_scores = sg_pred.O.value.max(axis=1)
    else:
        node_scores = np.ones(n)

    ii, jj, pp = np.meshgrid(np.arange(n), np.arange(n),
                             np.arange(1, d_prime), indexing="ij")
    keep = (ii != jj).reshape(-1)
    ii, jj, pp = ii.reshape(-1)[keep], jj.reshape(-1)[keep], pp.reshape(-1)[keep]
    scores = node_scores[ii] * r[ii, jj, pp] * node_scores[jj]
    # lexsort uses the last key as primary: descending score, then i, j, p.
    order = np.lexsort((pp, jj, ii, -scores))
    entries = [(int(ii[k]), int(jj[k]), int(pp[k]), float(scores[k]))
               for k in order]
    return RankedTriplets(entries)


def recall_at_k(ranked: RankedTriplets, gt_triplets, k: int):
    """|top-K intersect gt| / |gt|; None when the image has no gt triplets."""
    if k <= 0:
        raise ValueError("K must be positive")
    gt = set(gt_triplets)
    if not gt:
        return None
    return len(ranked.top(k) & gt) / len(gt)


@dataclass
class ImageResult:
    """One evaluated image: its ranked predictions and ground truth."""

    ranked: RankedTriplets
    gt_triplets: list  # [(i, j, p)]
    node_classes: np.ndarray  # (n,) gt classes, for class-level triplet keys

    def class_key(self, triplet) -> tuple:
        i, j, p = triplet
        return (int(self.node_classes[i]), int(p), int(self.node_classes[j]))


def _pooled_recall(results, k: int, keep):
    """Recall over the union of gt triplets passing the keep predicate."""
    total = 0
    hit = 0
    for res in results:
        wanted = [t for t in res.gt_triplets if keep(res, t)]
        if not wanted:
            continue
        top = res.ranked.top(k)
        total += len(wanted)
        hit += sum(1 for t in wanted if t in top)
    if total == 0:
        return None
    return hit / total


def mean_recall_at_k(results, space: LabelSpace, k: int):
    """Unweighted mean of per-predicate recalls (predicates with gt only)."""
    recalls = []
    for p in range(1, space.num_predicate_classes):
        r = _pooled_recall(results, k, lambda res, t, p=p: t[2] == p)
        if r is not None:
            recalls.append(r)
    if not recalls:
        return None
    return float(np.mean(recalls))


def zero_shot_recall(results, census: dict, k: int):
    """Recall restricted to class triplets never seen in training; None
    with a zero denominator (everything was seen)."""
    return _pooled_recall(results, k,
                          lambda res, t: res.class_key(t) not in census)


def few_shot_recall(results, census: dict, buckets, k: int) -> dict:
    """Recall per inclusive training-count bucket, e.g. (1, 5) and (6, 10)."""
    buckets = [(int(lo), int(hi)) for lo, hi in buckets]
    for a, (lo, hi) in enumerate(buckets):
        if lo > hi:
            raise ValueError(f"bucket {lo}-{hi} is empty")
        for lo2, hi2 in buckets[a + 1:]:
            if lo <= hi2 and lo2 <= hi:
                raise ValueError(f"buckets {lo}-{hi} and {lo2}-{hi2} overlap")
    out = {}
    for lo, hi in buckets:
        out[(lo, hi)] = _pooled_recall(
            results, k,
            lambda res, t, lo=lo, hi=hi: lo <= census.get(res.class_key(t), 0) <= hi)
    return out


def constraint_violation_rate(decoded_scenes, rules) -> float:
    """Fraction of decoded scenes breaking at least one generator rule.

    decoded_scenes: iterable of (node_labels, edge_labels) pairs.
    """
    scenes = list(decoded_scenes)
    if not scenes:
        return 0.0
    bad = sum(1 for node_labels, edge_labels in scenes
              if rule_violations(node_labels, edge_labels, rules))
    return bad / len(scenes)
