"""Cross-validated logistic-regression scorer.

The scorer maps a feature vector to a membership confidence in ``(0, 1)``;
higher means more likely a member. Features are z-scored with statistics
fitted on the control folds only.
"""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression


@dataclass
class LabeledFeatures:
    matrix: np.ndarray
    labels: np.ndarray
    sample_ids: list
    names: Optional[list] = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim == 1:
            self.matrix = self.matrix[:, None]
        self.labels = np.asarray(self.labels).astype(bool)
        if len(self.sample_ids) != len(self.labels) or self.matrix.shape[0] != len(self.labels):
            raise ValueError("matrix, labels and sample_ids must align")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise ValueError("duplicate sample ids")

    @classmethod
    def from_sets(cls, P, U, ids_P=None, ids_U=None, names=None, balanced=True):
        P, U = np.asarray(P, float), np.asarray(U, float)
        P = P[:, None] if P.ndim == 1 else P
        U = U[:, None] if U.ndim == 1 else U
        if balanced and len(P) != len(U):
            raise ValueError(f"|P|={len(P)} != |U|={len(U)}; pass balanced=False to allow imbalance")
        ids_P = list(ids_P) if ids_P is not None else [f"P{i}" for i in range(len(P))]
        ids_U = list(ids_U) if ids_U is not None else [f"U{i}" for i in range(len(U))]
        return cls(np.vstack([P, U]), np.r_[np.ones(len(P)), np.zeros(len(U))], ids_P + ids_U, names)


@dataclass
class ScoringModel:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray  # boolean mask over input columns
    names: Optional[list] = None
    converged: bool = True
    dropped: list = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return self.kept.size

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (features[:, self.kept] - self.mean) / self.std

    def decision(self, features) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if features.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {features.shape[1]}")
        return self.standardize(features) @ self.weights + self.bias

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "bias": float(self.bias),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "kept": self.kept.tolist(),
            "names": self.names,
            "converged": self.converged,
            "dropped": self.dropped,
        }

    @classmethod
    def from_dict(cls, d) -> "ScoringModel":
        return cls(np.asarray(d["weights"]), d["bias"], np.asarray(d["mean"]), np.asarray(d["std"]),
                   np.asarray(d["kept"], bool), d.get("names"), d.get("converged", True), d.get("dropped", []))


def fit_scorer(ctrl: LabeledFeatures, reg_strength: float = 1.0, seed: int = 0, max_iter: int = 1000) -> ScoringModel:
    """L2-regularised logistic regression on z-scored features.

    ``reg_strength`` is the inverse of scikit-learn's ``C``. Zero-variance
    columns are dropped and listed in ``dropped``.
    """
    X, y = ctrl.matrix, ctrl.labels
    if y.all() or not y.any():
        raise ValueError("scorer needs both members and non-members")
    if len(y) < 2 * X.shape[1]:
        warnings.warn(f"only {len(y)} samples for {X.shape[1]} features", stacklevel=2)
    mean, std = X.mean(0), X.std(0)
    kept = std > 1e-12 * np.maximum(1.0, np.abs(mean))
    names = ctrl.names
    dropped = [names[i] if names else i for i in np.flatnonzero(~kept)]
    if not kept.any():
        return ScoringModel(np.zeros(0), 0.0, mean[kept], std[kept], kept, names, True, dropped)
    Z = (X[:, kept] - mean[kept]) / std[kept]
    clf = LogisticRegression(C=1.0 / reg_strength, max_iter=max_iter, random_state=seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        clf.fit(Z, y)
    converged = not any(issubclass(w.category, ConvergenceWarning) for w in caught)
    return ScoringModel(clf.coef_[0].copy(), float(clf.intercept_[0]), mean[kept], std[kept], kept,
                        names, converged, dropped)


def score(model: ScoringModel, features) -> np.ndarray:
    """Membership confidence ``sigmoid(w . z + b)`` for each row."""
    return expit(model.decision(features))


# --------------------------------------------------------------------------
# k-fold


def assign_folds(n_P: int, n_U: int, k_folds: int = 5, seed: int = 0):
    """Stratified fold indices: each class is shuffled and dealt round-robin."""
    rng = np.random.default_rng(seed)
    fP = np.empty(n_P, dtype=int)
    fU = np.empty(n_U, dtype=int)
    fP[rng.permutation(n_P)] = np.arange(n_P) % k_folds
    fU[rng.permutation(n_U)] = np.arange(n_U) % k_folds
    return fP, fU


def kfold_scores(P_feats, U_feats, k_folds: int = 5, seed: int = 0, reg_strength: float = 1.0,
                 folds=None, return_folds: bool = False):
    """Score every sample exactly once with a scorer fitted on the other folds.

    Returns ``(scores_P, scores_U)``, or ``(scores_P, scores_U, folds_P, folds_U)``
    with ``return_folds=True``. ``folds`` overrides the seeded assignment.
    """
    P = np.asarray(P_feats, dtype=np.float64)
    U = np.asarray(U_feats, dtype=np.float64)
    if P.ndim == 1:
        P, U = P[:, None], U[:, None]
    if k_folds < 2:
        raise ValueError("k_folds must be at least 2")
    if min(len(P), len(U)) <= k_folds:
        raise ValueError(f"need more than k_folds={k_folds} samples per set to fit each fold; "
                         f"got |P|={len(P)}, |U|={len(U)}")
    fP, fU = assign_folds(len(P), len(U), k_folds, seed) if folds is None else map(np.asarray, folds)
    sP, sU = np.empty(len(P)), np.empty(len(U))
    for i in range(k_folds):
        trP, trU = P[fP != i], U[fU != i]
        ctrl = LabeledFeatures(np.vstack([trP, trU]), np.r_[np.ones(len(trP)), np.zeros(len(trU))],
                               list(range(len(trP) + len(trU))))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = fit_scorer(ctrl, reg_strength, seed)
        sP[fP == i] = score(model, P[fP == i])
        sU[fU == i] = score(model, U[fU == i])
    if return_folds:
        return sP, sU, fP, fU
    return sP, sU


def write_score_dump(path, ids_P: Sequence, ids_U: Sequence, scores_P, scores_U, folds_P, folds_U) -> None:
    """CSV ``sample_id,is_member,fold,score``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "is_member", "fold", "score"])
        for ids, member, folds, scores in ((ids_P, 1, folds_P, scores_P), (ids_U, 0, folds_U, scores_U)):
            for sid, f, s in zip(ids, folds, scores):
                w.writerow([sid, member, int(f), repr(float(s))])


def export_model(model: ScoringModel, path) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=2)
