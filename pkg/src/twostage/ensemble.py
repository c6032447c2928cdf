"""Bagged logistic ensembles with cross-validated Youden thresholds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._utils import DegenerateCohortError, as_generator, check_both_classes, spawn
from .cohort import Cohort, Feature, FeatureSchema, bootstrap_indices, stratified_kfold_indices
from .glm import LogisticModel, _align, _sigmoid, fit_logistic_batch
from .metrics import auc_trapezoid, roc_points, youden_best


@dataclass(frozen=True)
class PredictionStats:
    mean: float
    sd: float
    member_probs: np.ndarray


@dataclass(frozen=True, eq=False)
class EnsembleModel:
    """Bag of logistic members plus the threshold chosen alongside them.

    ``provenance`` records the fold that produced members and threshold:
    ``fold``, ``fold_auc``, every fold's AUC, and the fold's validation
    scores/labels so the threshold can be re-derived.
    """

    members: tuple[LogisticModel, ...]
    threshold: float
    feature_names: tuple[str, ...]
    stage_label: str = "clinical"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        for m in self.members:
            if m.feature_names != self.feature_names:
                raise ValueError("member feature names differ from the ensemble's")
        params = np.stack([m.params for m in self.members])
        params.setflags(write=False)
        object.__setattr__(self, "_params", params)

    @property
    def n_members(self) -> int:
        return len(self.members)

    def member_probs(self, X) -> np.ndarray:
        """(n, members) matrix of member probabilities."""
        X = np.atleast_2d(_align(X, self.feature_names))
        return _sigmoid(self._params[:, 0] + X @ self._params[:, 1:].T)

    def predict_stats(self, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-row mean and sample SD across members, plus the member matrix."""
        probs = self.member_probs(X)
        mean = probs.mean(axis=1)
        sd = probs.std(axis=1, ddof=1) if probs.shape[1] > 1 else np.zeros(probs.shape[0])
        return mean, sd, probs

    def predict_proba(self, X) -> np.ndarray:
        return self.predict_stats(X)[0]

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.int8)

    def to_dict(self) -> dict:
        return {
            "stage_label": self.stage_label,
            "feature_names": list(self.feature_names),
            "threshold": float(self.threshold),
            "provenance": _jsonable(self.provenance),
            "members": [m.to_dict() for m in self.members],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EnsembleModel":
        names = tuple(doc["feature_names"])
        return cls(
            members=tuple(LogisticModel.from_dict(m, names) for m in doc["members"]),
            threshold=float(doc["threshold"]),
            feature_names=names,
            stage_label=doc.get("stage_label", "clinical"),
            provenance=dict(doc.get("provenance", {})),
        )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def ensemble_stats(members, x) -> PredictionStats:
    """Mean and sample SD (n - 1) of member probabilities for one sample."""
    if isinstance(members, EnsembleModel):
        probs = members.member_probs(x)[0]
    else:
        probs = np.array([float(np.ravel(m.predict_proba(x))[0]) for m in members])
    sd = float(np.std(probs, ddof=1)) if probs.size > 1 else 0.0
    return PredictionStats(mean=float(probs.mean()), sd=sd, member_probs=probs)


def _bagged_params(X, y, bags, rng, ridge, tol, max_iter):
    y = check_both_classes(y, what="training labels")
    weights = np.stack([np.bincount(bootstrap_indices(y, r), minlength=y.size)
                        for r in spawn(rng, bags)])
    start = fit_logistic_batch(X, y, np.ones((1, y.size)), ridge=ridge, tol=tol, max_iter=max_iter)
    beta0 = start[0][0] if start[1][0] else None
    return fit_logistic_batch(X, y, weights, ridge=ridge, tol=tol, max_iter=max_iter, beta0=beta0)


def _members(fit, names) -> tuple[LogisticModel, ...]:
    beta, conv, n_iter, ll = fit
    return tuple(
        LogisticModel(intercept=float(b[0]), coefficients=b[1:], feature_names=names,
                      converged=bool(c), iterations_used=int(k), final_log_likelihood=float(v))
        for b, c, k, v in zip(beta, conv, n_iter, ll)
    )


def train_bagged(train: Cohort, features, bags: int = 50, rng=None, *, ridge=1e-6,
                 tol=1e-8, max_iter=100) -> list[LogisticModel]:
    """Fit ``bags`` logistic models, each on its own bootstrap resample.

    A resample enters the fit as a vector of draw counts, which is equivalent
    to fitting on the duplicated rows. All members start from the full-data
    fit to save Newton iterations.
    """
    if bags < 1:
        raise ValueError("bags must be at least 1")
    names = tuple(features)
    X = train.matrix(names)
    fit = _bagged_params(X, train.y, bags, as_generator(rng), ridge, tol, max_iter)
    return list(_members(fit, names))


def _fold_result(X, y, tr, va, bags, rng, ridge, tol, max_iter):
    beta, conv, n_iter, ll = _bagged_params(X[tr], y[tr], bags, rng, ridge, tol, max_iter)
    scores = _sigmoid(beta[:, 0] + X[va] @ beta[:, 1:].T).mean(axis=1)
    curve = roc_points(scores, y[va])
    threshold, _ = youden_best(curve)
    return {"fit": (beta, conv, n_iter, ll), "auc": auc_trapezoid(curve), "threshold": threshold,
            "scores": scores, "labels": y[va]}


def train_ensemble_cv(train: Cohort, features, folds: int = 5, bags: int = 50, rng=None, *,
                      stage_label: str = "clinical", refit_full: bool = False, ridge=1e-6,
                      tol=1e-8, max_iter=100, n_jobs=None) -> EnsembleModel:
    """Stratified k-fold: bag on each fold's training part, keep the best fold.

    Each fold's threshold is the Youden optimum on its validation ROC. The
    fold with the highest validation AUC (lowest index on ties) supplies both
    the members and the threshold. With ``refit_full=True`` the members are
    instead re-bagged on the whole training cohort, keeping that threshold.
    """
    names = tuple(features)
    if not names:
        raise ValueError("an ensemble needs at least one feature")
    X = train.matrix(names)
    y = check_both_classes(train.y, what="training outcomes")
    if not np.isfinite(X).all():
        raise ValueError("training features contain missing values")
    split_rng, refit_rng, *fold_rngs = spawn(rng, folds + 2)

    splits = stratified_kfold_indices(y, folds, split_rng)
    if any(np.unique(y[va]).size < 2 for _, va in splits):
        splits = stratified_kfold_indices(y, folds, split_rng)
        if any(np.unique(y[va]).size < 2 for _, va in splits):
            raise DegenerateCohortError("a validation fold has a single class")

    jobs = (delayed(_fold_result)(X, y, tr, va, bags, r, ridge, tol, max_iter)
            for (tr, va), r in zip(splits, fold_rngs))
    if n_jobs in (None, 1):
        results = [f(*a, **k) for f, a, k in jobs]
    else:
        results = Parallel(n_jobs=n_jobs)(jobs)

    aucs = [r["auc"] for r in results]
    best = int(np.argmax(aucs))
    chosen = results[best]
    fit = chosen["fit"]
    if refit_full:
        fit = _bagged_params(X, y, bags, refit_rng, ridge, tol, max_iter)
    return EnsembleModel(
        members=_members(fit, names),
        threshold=chosen["threshold"],
        feature_names=names,
        stage_label=stage_label,
        provenance={
            "fold": best,
            "fold_auc": aucs[best],
            "fold_aucs": aucs,
            "refit_full": refit_full,
            "validation_scores": chosen["scores"].tolist(),
            "validation_labels": chosen["labels"].tolist(),
        },
    )


class BaggedLogisticEnsemble(ClassifierMixin, BaseEstimator):
    """Estimator front-end for :func:`train_ensemble_cv`.

    ``predict`` applies the cross-validated Youden threshold, not 0.5.
    """

    def __init__(self, folds=5, bags=50, ridge=1e-6, refit_full=False, random_state=None,
                 n_jobs=None):
        self.folds = folds
        self.bags = bags
        self.ridge = ridge
        self.refit_full = refit_full
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y):
        cols = getattr(X, "columns", None)
        X, y = check_X_y(X, y, dtype=float)
        names = [str(c) for c in cols] if cols is not None else [f"x{i}" for i in range(X.shape[1])]
        if cols is not None:
            self.feature_names_in_ = np.asarray(names, dtype=object)
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.array([0, 1])
        cohort = Cohort(FeatureSchema(tuple(Feature(n) for n in names)),
                        ids=np.arange(y.size), X=X, y=y)
        self.ensemble_ = train_ensemble_cv(
            cohort, names, folds=self.folds, bags=self.bags, rng=self.random_state,
            refit_full=self.refit_full, ridge=self.ridge, n_jobs=self.n_jobs)
        self.threshold_ = self.ensemble_.threshold
        return self

    def _matrix(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def predict_stats(self, X):
        return self.ensemble_.predict_stats(self._matrix(X))

    def predict_proba(self, X):
        p = self.ensemble_.predict_proba(self._matrix(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold_).astype(int)
