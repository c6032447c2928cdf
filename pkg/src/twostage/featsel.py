"""Recursive feature elimination averaged over bootstrap resamples."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from ._utils import DegenerateCohortError, check_both_classes, spawn
from .cohort import Cohort, Feature, FeatureSchema, bootstrap_indices
from .glm import fit_logistic_batch

MAX_REDRAWS = 10
# coefficients closer than the Newton step tolerance are indistinguishable
TIE_ATOL = 1e-8


@dataclass(frozen=True)
class RankTable:
    """Per-iteration elimination ranks; rank 1 is the last feature standing."""

    features: tuple[str, ...]
    ranks: np.ndarray  # (iterations, features)

    @property
    def iterations(self) -> int:
        return int(self.ranks.shape[0])

    @property
    def average(self) -> dict[str, float]:
        return dict(zip(self.features, self.ranks.mean(axis=0).tolist()))

    def ordered(self) -> list[tuple[str, float]]:
        return sorted(self.average.items(), key=lambda kv: (kv[1], kv[0]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["feature", "avg_rank", "n_iterations"])
            for name, avg in self.ordered():
                w.writerow([name, f"{avg:.3f}", self.iterations])


def _standardize(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    if not (sd > 0).all():
        return None
    return (X - mu) / sd


def elimination_ranks(X, y, names, *, ridge=1e-6) -> np.ndarray | None:
    """One RFE pass on center-scaled ``X``: drop the smallest |coefficient| until one remains.

    Returns ranks aligned with ``names`` or ``None`` when a fit is degenerate
    (a constant column or a separated fit).
    """
    Z = _standardize(np.asarray(X, dtype=float))
    if Z is None:
        return None
    m = Z.shape[1]
    alive = list(range(m))
    ranks = np.zeros(m, dtype=int)
    ones = np.ones((1, Z.shape[0]))
    while len(alive) > 1:
        beta, conv, _, _ = fit_logistic_batch(Z[:, alive], y, ones, ridge=ridge)
        if not conv[0]:
            return None
        mag = np.abs(beta[0, 1:])
        # smallest magnitude goes; on ties (up to rounding) the lexicographically later name
        tied = np.flatnonzero(mag <= mag.min() + TIE_ATOL)
        victim = max(tied, key=lambda i: names[alive[i]])
        ranks[alive[victim]] = len(alive)
        del alive[victim]
    ranks[alive[0]] = 1
    return ranks


def _one_iteration(X, y, names, rng, ridge):
    for _ in range(MAX_REDRAWS + 1):
        idx = bootstrap_indices(y, rng)
        ranks = elimination_ranks(X[idx], y[idx], names, ridge=ridge)
        if ranks is not None:
            return ranks
    raise DegenerateCohortError(f"RFE fit degenerate on {MAX_REDRAWS + 1} consecutive resamples")


def rfe_rank(cohort: Cohort, features, iterations: int = 100, seed=0, *, ridge=1e-6,
             n_jobs=None) -> RankTable:
    """Average RFE elimination rank of each feature over bootstrap resamples."""
    names = tuple(features)
    if len(names) < 2:
        raise ValueError("RFE needs at least two features")
    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    X = cohort.matrix(names)
    y = check_both_classes(cohort.y, what="outcomes")
    if not np.isfinite(X).all():
        raise ValueError("RFE needs complete features")
    jobs = (delayed(_one_iteration)(X, y, names, r, ridge) for r in spawn(seed, iterations))
    if n_jobs in (None, 1):
        rows = [f(*a, **k) for f, a, k in jobs]
    else:
        rows = Parallel(n_jobs=n_jobs)(jobs)
    return RankTable(names, np.vstack(rows))


def select_top_k(table: RankTable, k: int) -> list[str]:
    """The ``k`` best-ranked features, best first; ties resolved by name."""
    if k < 1:
        raise ValueError("k must be at least 1")
    if k > len(table.features):
        raise ValueError(f"k={k} exceeds the {len(table.features)} ranked features")
    return [name for name, _ in table.ordered()[:k]]


class RankAveragedRFE(SelectorMixin, BaseEstimator):
    """Keep the ``n_features_to_select`` features with the best average RFE rank."""

    def __init__(self, n_features_to_select=7, iterations=100, ridge=1e-6, random_state=None,
                 n_jobs=None):
        self.n_features_to_select = n_features_to_select
        self.iterations = iterations
        self.ridge = ridge
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y):
        cols = getattr(X, "columns", None)
        X, y = check_X_y(X, y, dtype=float)
        names = [str(c) for c in cols] if cols is not None else [f"x{j:06d}" for j in range(X.shape[1])]
        if cols is not None:
            self.feature_names_in_ = np.asarray(names, dtype=object)
        self.n_features_in_ = X.shape[1]
        cohort = Cohort(FeatureSchema(tuple(Feature(n) for n in names)), ids=np.arange(y.size), X=X, y=y)
        self.rank_table_ = rfe_rank(cohort, names, self.iterations, self.random_state,
                                    ridge=self.ridge, n_jobs=self.n_jobs)
        keep = set(select_top_k(self.rank_table_, self.n_features_to_select))
        self.support_ = np.array([n in keep for n in names])
        self.ranking_ = np.array([self.rank_table_.average[n] for n in names])
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "support_")
        return self.support_
