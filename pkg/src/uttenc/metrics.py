"""Classification metrics and score-level fusion.

EER is computed on the ROC convex hull (pool-adjacent-violators), which
makes it deterministic on small trial sets and interpolates linearly
where the discrete miss/false-alarm curves cross.  The average detection
cost follows the NIST LRE pairwise form with C_miss = C_fa = 1 and
P_target = 0.5, with detection decided by the max-score rule (ties to
the lowest class index).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class TrialScores:
    """Per-utterance score vectors (log-softmax), truth and optional tags."""

    ids: list
    scores: np.ndarray        # (N, C)
    labels: np.ndarray        # (N,)
    buckets: list | None = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.scores.ndim != 2 or self.scores.shape[0] != len(self.ids):
            raise ValueError("score matrix rows must match the utterance ids")
        if self.labels.shape != (self.scores.shape[0],):
            raise ValueError("labels must be one per utterance")
        if self.scores.shape[0] and (self.labels.min() < 0
                                     or self.labels.max() >= self.scores.shape[1]):
            raise ValueError("label out of range")

    @property
    def num_classes(self) -> int:
        return self.scores.shape[1]

    def subset(self, mask: np.ndarray) -> "TrialScores":
        idx = np.flatnonzero(mask)
        return TrialScores(
            ids=[self.ids[i] for i in idx],
            scores=self.scores[idx],
            labels=self.labels[idx],
            buckets=[self.buckets[i] for i in idx] if self.buckets else None,
        )


def accuracy(trials: TrialScores) -> float:
    """Fraction of argmax-correct trials; ties break to the lowest index."""
    if len(trials.ids) == 0:
        raise ValueError("no trials")
    pred = trials.scores.argmax(axis=1)
    return float((pred == trials.labels).mean())


def _pav(y: np.ndarray):
    """Pool-adjacent-violators: nondecreasing fit, as (block mean, width)."""
    means = []
    widths = []
    for v in y:
        means.append(float(v))
        widths.append(1)
        while len(means) > 1 and means[-2] >= means[-1]:
            w = widths[-1] + widths[-2]
            m = (means[-1] * widths[-1] + means[-2] * widths[-2]) / w
            means = means[:-2] + [m]
            widths = widths[:-2] + [w]
    return np.array(means), np.array(widths, dtype=np.int64)


def rocch(target_scores, nontarget_scores):
    """Vertices (p_miss, p_fa) of the ROC convex hull."""
    tar = np.asarray(target_scores, dtype=np.float64).ravel()
    non = np.asarray(nontarget_scores, dtype=np.float64).ravel()
    nt, nn = tar.size, non.size
    if nt == 0 or nn == 0:
        raise ValueError("both target and nontarget scores are required")
    scores = np.concatenate([tar, non])
    ideal = np.concatenate([np.ones(nt), np.zeros(nn)])
    order = np.argsort(scores, kind="stable")   # targets precede ties
    ideal = ideal[order]
    _, widths = _pav(ideal)

    boundaries = np.concatenate([[0], np.cumsum(widths)])
    cum_tar = np.concatenate([[0.0], np.cumsum(ideal)])
    p_miss = np.empty(boundaries.size)
    p_fa = np.empty(boundaries.size)
    for i, left in enumerate(boundaries):
        miss = cum_tar[left]                    # targets rejected
        fa = nn - (left - miss)                 # nontargets accepted
        p_miss[i] = miss / nt
        p_fa[i] = fa / nn
    return p_miss, p_fa


def eer(target_scores, nontarget_scores) -> float:
    """Equal error rate from the ROC convex hull."""
    p_miss, p_fa = rocch(target_scores, nontarget_scores)
    diff = p_miss - p_fa
    for i in range(diff.size - 1):
        if diff[i] <= 0.0 <= diff[i + 1]:
            dx = p_miss[i + 1] - p_miss[i]
            dy = p_fa[i + 1] - p_fa[i]
            if dx == dy:                        # degenerate: already equal
                return float(p_miss[i])
            t = (p_fa[i] - p_miss[i]) / (dx - dy)
            return float(p_miss[i] + t * dx)
    # hull never crosses the diagonal exactly; fall back to the closest vertex
    i = int(np.abs(diff).argmin())
    return float(0.5 * (p_miss[i] + p_fa[i]))


def pooled_eer(trials: TrialScores) -> float:
    """EER over all (utterance, class) detection trials pooled together."""
    n, c = trials.scores.shape
    onehot = np.zeros((n, c), dtype=bool)
    onehot[np.arange(n), trials.labels] = True
    return eer(trials.scores[onehot], trials.scores[~onehot])


def cavg(trials: TrialScores, c_miss: float = 1.0, c_fa: float = 1.0,
         p_target: float = 0.5) -> float:
    """NIST LRE-style pairwise average detection cost.

    Detection uses the max-score rule: a trial detects language t iff t
    is the argmax of its score vector (ties to the lowest index).
    Languages with no trials are excluded with a warning.
    """
    n, c = trials.scores.shape
    if c < 2:
        raise ValueError("cavg needs at least 2 classes")
    pred = trials.scores.argmax(axis=1)
    present = [t for t in range(c) if np.any(trials.labels == t)]
    if len(present) < c:
        warnings.warn("classes without trials excluded from cavg", RuntimeWarning)
    if len(present) < 2:
        raise ValueError("cavg needs trials from at least 2 classes")

    costs = []
    for t in present:
        t_mask = trials.labels == t
        p_miss = float((pred[t_mask] != t).mean())
        p_fas = []
        for nlang in present:
            if nlang == t:
                continue
            n_mask = trials.labels == nlang
            p_fas.append(float((pred[n_mask] == t).mean()))
        cost = (c_miss * p_target * p_miss
                + c_fa * (1.0 - p_target) * float(np.mean(p_fas)))
        costs.append(cost)
    return float(np.mean(costs))


def fuse_scores(systems: list, weights=None) -> TrialScores:
    """Weighted sum of per-trial score vectors across systems."""
    if not systems:
        raise ValueError("no systems to fuse")
    if weights is None:
        weights = np.full(len(systems), 1.0 / len(systems))
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(systems),):
            raise ValueError("one weight per system required")
        if abs(weights.sum() - 1.0) > 1e-8:
            raise ValueError("fusion weights must sum to 1")
    first = systems[0]
    for sys_i in systems[1:]:
        if sys_i.scores.shape != first.scores.shape:
            raise ValueError("systems disagree on trial/class counts")
        for a, b in zip(first.ids, sys_i.ids):
            if a != b:
                raise ValueError(f"utterance id mismatch: first divergent id {a!r}")
        if not np.array_equal(first.labels, sys_i.labels):
            raise ValueError("systems disagree on trial labels")
    fused = np.zeros_like(first.scores)
    for wgt, sys_i in zip(weights, systems):
        fused += wgt * sys_i.scores
    return TrialScores(ids=list(first.ids), scores=fused,
                       labels=first.labels.copy(),
                       buckets=list(first.buckets) if first.buckets else None)
