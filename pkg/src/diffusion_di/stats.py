"""Decision layer: one-tailed Welch test, p-value aggregation and power.

The alternative hypothesis throughout is that the suspect set's scores have
the larger mean.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class TTestResult:
    t_stat: float
    dof: float
    p_value: float


@dataclass
class VerificationVerdict:
    mean_p: float
    ci95: tuple
    trials: int
    n_per_trial: int
    alpha: float
    reject: bool
    seed: Optional[int] = None
    harmonic_p: Optional[float] = None
    p_values: Optional[np.ndarray] = None

    def reject_rate(self) -> float:
        """Fraction of individual trials with ``p < alpha``."""
        return float(np.mean(self.p_values < self.alpha)) if self.p_values is not None else float("nan")

    def to_record(self, manifest_hash: Optional[str] = None) -> dict:
        return {
            "mean_p": self.mean_p,
            "ci95": list(self.ci95),
            "trials": self.trials,
            "n_per_trial": self.n_per_trial,
            "alpha": self.alpha,
            "reject": bool(self.reject),
            "seed": self.seed,
            "manifest_hash": manifest_hash,
        }

    def write_json(self, path, manifest_hash: Optional[str] = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_record(manifest_hash), fh, indent=2)


@dataclass(frozen=True)
class PowerEstimate:
    cohens_d: float
    power: float
    alpha: float


def welch_ttest_one_tailed(a, b) -> TTestResult:
    """Welch's unequal-variance t-test of ``mean(a) > mean(b)``.

    When both samples have zero variance the statistic is 0 (p = 0.5) for
    equal means and +/-inf (p = 0 or 1) otherwise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least two values")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("non-finite scores")
    na, nb = a.size, b.size
    va, vb = a.var(ddof=1) / na, b.var(ddof=1) / nb
    diff = a.mean() - b.mean()
    se2 = va + vb
    if se2 == 0.0:
        dof = float(na + nb - 2)
        if diff == 0.0:
            return TTestResult(0.0, dof, 0.5)
        return TTestResult(math.copysign(math.inf, diff), dof, 0.0 if diff > 0 else 1.0)
    t = diff / math.sqrt(se2)
    dof = se2 ** 2 / (va ** 2 / (na - 1) + vb ** 2 / (nb - 1))
    return TTestResult(float(t), float(dof), float(stats.t.sf(t, dof)))


def welch_pvalues(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise one-tailed Welch p-values for ``(trials, n)`` arrays."""
    na, nb = a.shape[1], b.shape[1]
    va, vb = a.var(1, ddof=1) / na, b.var(1, ddof=1) / nb
    se2 = va + vb
    diff = a.mean(1) - b.mean(1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = diff / np.sqrt(se2)
        dof = se2 ** 2 / (va ** 2 / (na - 1) + vb ** 2 / (nb - 1))
        p = stats.t.sf(t, dof)
    degenerate = se2 == 0
    p[degenerate] = np.where(diff[degenerate] == 0, 0.5, np.where(diff[degenerate] > 0, 0.0, 1.0))
    return p


def aggregate_pvalues(p_values, alpha: float = 0.01, n_per_trial: int = 0, seed=None) -> VerificationVerdict:
    """Arithmetic-mean aggregation with a normal-approximation 95% interval."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.size < 1:
        raise ValueError("no trials")
    mean_p = float(p.mean())
    if p.size > 1:
        half = 1.959963984540054 * p.std(ddof=1) / math.sqrt(p.size)
    else:
        half = 0.0
    ci = (max(0.0, mean_p - half), min(1.0, mean_p + half))
    with np.errstate(divide="ignore"):
        harmonic = float(p.size / np.sum(1.0 / p)) if np.all(p > 0) else 0.0
    return VerificationVerdict(mean_p, ci, int(p.size), int(n_per_trial), alpha, mean_p < alpha, seed, harmonic, p)


def cdi_verdict(scores_P, scores_U, n_per_trial: int, trials: int = 1000, alpha: float = 0.01,
                seed: int = 0) -> VerificationVerdict:
    """Repeat the Welch test on random subsets of the scores and average the p-values.

    Each trial draws ``n_per_trial`` scores without replacement from each side
    using its own child RNG stream.
    """
    sP = np.asarray(scores_P, dtype=np.float64)
    sU = np.asarray(scores_U, dtype=np.float64)
    if n_per_trial < 2:
        raise ValueError("n_per_trial must be at least 2")
    if n_per_trial > min(sP.size, sU.size):
        raise ValueError(f"n_per_trial={n_per_trial} exceeds available scores ({sP.size}, {sU.size})")
    if trials < 1:
        raise ValueError("trials must be positive")
    a = np.empty((trials, n_per_trial))
    b = np.empty((trials, n_per_trial))
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(trials)):
        rng = np.random.default_rng(child)
        a[i] = sP[rng.choice(sP.size, n_per_trial, replace=False)]
        b[i] = sU[rng.choice(sU.size, n_per_trial, replace=False)]
    return aggregate_pvalues(welch_pvalues(a, b), alpha, n_per_trial, seed)


def cohens_d(a, b) -> float:
    """Standardised mean difference with the pooled standard deviation.

    Zero pooled variance gives a signed infinity (0 for equal means).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n1, n2 = a.size, b.size
    if n1 + n2 <= 2:
        raise ValueError("need n1 + n2 > 2")
    s1 = a.var(ddof=1) if n1 > 1 else 0.0
    s2 = b.var(ddof=1) if n2 > 1 else 0.0
    s = math.sqrt(((n1 - 1) * s1 + (n2 - 1) * s2) / (n1 + n2 - 2))
    diff = a.mean() - b.mean()
    if s == 0.0:
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return float(diff / s)


def power_at_alpha(d: float, n1: int, n2: int, alpha: float = 0.01) -> PowerEstimate:
    """Power of the one-tailed two-sample t-test at effect size ``d``.

    Uses the noncentral t distribution with ``n1 + n2 - 2`` degrees of freedom
    and noncentrality ``d * sqrt(n1 n2 / (n1 + n2))``; this is the test's
    TPR at FPR = ``alpha``.
    """
    if n1 < 2 or n2 < 2:
        raise ValueError("need at least two samples per group")
    df = n1 + n2 - 2
    crit = stats.t.isf(alpha, df)
    if math.isinf(d):
        power = 1.0 if d > 0 else 0.0
    elif d == 0:
        power = float(stats.t.sf(crit, df))
    else:
        nc = d * math.sqrt(n1 * n2 / (n1 + n2))
        power = float(stats.nct.sf(crit, df, nc))
    return PowerEstimate(float(d), min(max(power, 0.0), 1.0), alpha)
