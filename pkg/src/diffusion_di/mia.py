"""Single-sample and set-level membership inference metrics.

Scores are oriented once, at ingestion, so that higher always means member.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.stats import rankdata

HIGHER_IS_MEMBER = "higher_is_member"
LOWER_IS_MEMBER = "lower_is_member"


@dataclass(frozen=True)
class ScoredPopulation:
    member_scores: np.ndarray
    nonmember_scores: np.ndarray

    @classmethod
    def from_scores(cls, members, nonmembers, orientation: str = HIGHER_IS_MEMBER) -> "ScoredPopulation":
        m = np.asarray(members, dtype=np.float64).ravel()
        n = np.asarray(nonmembers, dtype=np.float64).ravel()
        if m.size == 0 or n.size == 0:
            raise ValueError("both populations must be non-empty")
        if orientation == LOWER_IS_MEMBER:
            m, n = -m, -n
        elif orientation != HIGHER_IS_MEMBER:
            raise ValueError(f"unknown orientation {orientation!r}")
        return cls(m, n)


def _pop(pop_or_members, nonmembers=None) -> ScoredPopulation:
    if isinstance(pop_or_members, ScoredPopulation):
        return pop_or_members
    return ScoredPopulation.from_scores(pop_or_members, nonmembers)


def roc_curve(pop, nonmembers=None) -> np.ndarray:
    """ROC points ``(fpr, tpr)`` for thresholds at every distinct score, ``score >= thr`` is member.

    Tied scores form a single step. Starts at (0, 0) and ends at (1, 1).
    """
    pop = _pop(pop, nonmembers)
    m, n = pop.member_scores, pop.nonmember_scores
    thr = np.unique(np.concatenate([m, n]))[::-1]
    ms, ns = np.sort(m), np.sort(n)
    tpr = (m.size - np.searchsorted(ms, thr, side="left")) / m.size
    fpr = (n.size - np.searchsorted(ns, thr, side="left")) / n.size
    pts = np.column_stack([np.r_[0.0, fpr], np.r_[0.0, tpr]])
    if not np.allclose(pts[-1], 1.0):
        pts = np.vstack([pts, [1.0, 1.0]])
    return pts


def auc(pop, nonmembers=None) -> float:
    """Mann-Whitney AUC; ties count one half."""
    pop = _pop(pop, nonmembers)
    m, n = pop.member_scores, pop.nonmember_scores
    ranks = rankdata(np.concatenate([m, n]))
    u = ranks[: m.size].sum() - m.size * (m.size + 1) / 2.0
    return float(u / (m.size * n.size))


def tpr_at_fpr(pop, nonmembers=None, fpr: float = 0.01) -> float:
    """TPR at the empirical ``1 - fpr`` quantile of non-member scores.

    The threshold is the ``ceil((1 - fpr) n)``-th smallest non-member score and
    only members strictly above it count, so ties resolve against the attack.
    """
    pop = _pop(pop, nonmembers)
    n = np.sort(pop.nonmember_scores)
    if n.size < 100:
        warnings.warn(f"only {n.size} non-members; FPR={fpr} is coarsely resolved", stacklevel=2)
    j = math.ceil((1.0 - fpr) * n.size - 1e-9)
    thr = -np.inf if j <= 0 else n[j - 1]
    return float(np.mean(pop.member_scores > thr))


def best_threshold_accuracy(pop, nonmembers=None) -> float:
    """Maximum balanced accuracy over all thresholds (optimistic: fitted on the evaluation scores)."""
    pts = roc_curve(pop, nonmembers)
    return float(np.max(0.5 * (1.0 + pts[:, 1] - pts[:, 0])))


def set_level_mia(score_fn: Optional[Callable], member_pool, nonmember_pool, set_size: int,
                  n_sets: int = 1000, seed: int = 0, fpr: float = 0.01) -> float:
    """TPR@FPR of the max-score set test on member-only vs non-member-only subsets.

    With ``score_fn=None`` the pools are taken to be scores already.
    """
    mp = np.asarray(member_pool if score_fn is None else score_fn(member_pool), dtype=np.float64)
    nup = np.asarray(nonmember_pool if score_fn is None else score_fn(nonmember_pool), dtype=np.float64)
    if min(mp.size, nup.size) < set_size:
        raise ValueError(f"pools ({mp.size}, {nup.size}) smaller than set_size={set_size}")
    rng = np.random.default_rng(seed)
    mset = np.array([mp[rng.choice(mp.size, set_size, replace=False)].max() for _ in range(n_sets)])
    nset = np.array([nup[rng.choice(nup.size, set_size, replace=False)].max() for _ in range(n_sets)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return tpr_at_fpr(ScoredPopulation(mset, nset), fpr=fpr)


def mia_metrics(pop, nonmembers=None, fpr: float = 0.01) -> dict:
    pop = _pop(pop, nonmembers)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        t = tpr_at_fpr(pop, fpr=fpr)
    return {"auc": auc(pop), "tpr_at_1pct_fpr": t, "accuracy": best_threshold_accuracy(pop)}


def write_roc_csv(path, points: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["fpr", "tpr"])
        w.writerows((repr(float(f)), repr(float(t))) for f, t in points)
