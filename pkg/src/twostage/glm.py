"""Binary logistic regression fitted by damped Newton (IRLS) with a tiny ridge.

The fitting core is batched: ``B`` models sharing one design matrix but
carrying different per-row weights are solved together. A bootstrap resample
is exactly a weight vector of draw counts, so bagging reduces to one batched
call over the full design.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._utils import check_both_classes

SEPARATION_LIMIT = 1e3
_P_LO = np.finfo(float).tiny
_P_HI = np.nextafter(1.0, 0.0)


def _sigmoid(eta):
    return np.clip(expit(eta), _P_LO, _P_HI)


@dataclass(frozen=True)
class LogisticModel:
    intercept: float
    coefficients: np.ndarray
    feature_names: tuple[str, ...]
    converged: bool = True
    iterations_used: int = 0
    final_log_likelihood: float = float("nan")

    def __post_init__(self):
        coef = np.asarray(self.coefficients, dtype=float)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if coef.shape != (len(self.feature_names),):
            raise ValueError(f"{coef.size} coefficients for {len(self.feature_names)} features")

    @property
    def params(self) -> np.ndarray:
        return np.r_[self.intercept, self.coefficients]

    def decision_function(self, X) -> np.ndarray:
        X = _align(X, self.feature_names)
        return self.intercept + X @ self.coefficients

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.decision_function(X))

    def to_dict(self) -> dict:
        return {
            "intercept": float(self.intercept),
            "coefficients": dict(zip(self.feature_names, map(float, self.coefficients))),
            "converged": bool(self.converged),
            "iterations_used": int(self.iterations_used),
            "final_log_likelihood": float(self.final_log_likelihood),
        }

    @classmethod
    def from_dict(cls, doc: dict, feature_names=None) -> "LogisticModel":
        coefs = doc["coefficients"]
        names = tuple(feature_names) if feature_names is not None else tuple(coefs)
        return cls(
            intercept=float(doc["intercept"]),
            coefficients=np.array([float(coefs[n]) for n in names]),
            feature_names=names,
            converged=bool(doc.get("converged", True)),
            iterations_used=int(doc.get("iterations_used", 0)),
            final_log_likelihood=float(doc.get("final_log_likelihood", float("nan"))),
        )


def _align(X, names) -> np.ndarray:
    """Feature matrix in ``names`` order; mappings and frames are aligned by name."""
    if isinstance(X, dict):
        missing = [n for n in names if n not in X]
        if missing:
            raise ValueError(f"missing features {missing}")
        return np.array([float(X[n]) for n in names])
    if hasattr(X, "columns"):
        missing = [n for n in names if n not in X.columns]
        if missing:
            raise ValueError(f"missing features {missing}")
        return X.loc[:, list(names)].to_numpy(dtype=float)
    X = np.asarray(X, dtype=float)
    if X.shape[-1] != len(names):
        raise ValueError(f"expected {len(names)} features, got {X.shape[-1]}")
    return X


def predict_proba(model: LogisticModel, x) -> np.ndarray | float:
    """sigmoid(intercept + coefficients . x) for one vector or a matrix of rows."""
    p = model.predict_proba(x)
    return float(p) if np.ndim(p) == 0 else p


def _design(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError("X must be two-dimensional")
    return np.hstack([np.ones((X.shape[0], 1)), X])


def _penalized_loglik(beta, Z, y, W, ridge):
    eta = beta @ Z.T
    ll = np.sum(W * (y * eta - np.logaddexp(0.0, eta)), axis=1)
    return ll - ridge * np.sum(beta[:, 1:] ** 2, axis=1)


def loglik_and_grad(params, X, y, ridge: float = 1e-6, sample_weight=None):
    """Penalized log-likelihood and its analytic gradient.

    ``params`` is ``[intercept, *slopes]``; the ridge term ``ridge * ||slopes||^2``
    leaves the intercept unpenalized.
    """
    Z = _design(X)
    y = np.asarray(y, dtype=float)
    w = np.ones(Z.shape[0]) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    beta = np.asarray(params, dtype=float)
    if beta.shape != (Z.shape[1],):
        raise ValueError(f"expected {Z.shape[1]} parameters, got {beta.shape}")
    if not (np.isfinite(Z).all() and np.isfinite(beta).all()):
        raise ValueError("non-finite input")
    value = float(_penalized_loglik(beta[None], Z, y, w[None], ridge)[0])
    resid = w * (y - expit(Z @ beta))
    grad = Z.T @ resid
    grad[1:] -= 2.0 * ridge * beta[1:]
    return value, grad


def fit_logistic_batch(X, y, weights, *, ridge=1e-6, tol=1e-8, max_iter=100,
                       beta0=None, history=None):
    """Fit ``B`` weighted logistic models on one design matrix.

    Parameters
    ----------
    X : (n, p) array
    y : (n,) 0/1 array
    weights : (B, n) non-negative row weights (bootstrap draw counts)
    beta0 : (p + 1,) or (B, p + 1) starting point, default zeros
    history : list, optional
        Receives the (B,) penalized log-likelihood after every iteration.

    Returns
    -------
    beta : (B, p + 1) with the intercept first
    converged : (B,) bool
    n_iter : (B,) int
    loglik : (B,) float
    """
    Z = _design(X)
    y = np.asarray(y, dtype=float)
    W = np.atleast_2d(np.asarray(weights, dtype=float))
    if not np.isfinite(Z).all():
        raise ValueError("non-finite input")
    B, d = W.shape[0], Z.shape[1]
    penalty = np.full(d, 2.0 * ridge)
    penalty[0] = 0.0

    beta = np.zeros((B, d)) if beta0 is None else np.array(np.broadcast_to(beta0, (B, d)), dtype=float)
    ll = _penalized_loglik(beta, Z, y, W, ridge)
    converged = np.zeros(B, dtype=bool)
    done = np.zeros(B, dtype=bool)
    n_iter = np.zeros(B, dtype=int)

    for _ in range(max_iter):
        act = np.flatnonzero(~done)
        if act.size == 0:
            break
        b, w = beta[act], W[act]
        p = expit(b @ Z.T)
        grad = (w * (y - p)) @ Z - penalty * b
        s = w * p * (1.0 - p)
        H = np.matmul((Z[None] * s[:, :, None]).transpose(0, 2, 1), Z)
        H[:, np.arange(d), np.arange(d)] += penalty
        try:
            step = np.linalg.solve(H, grad[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(h, g, rcond=None)[0] for h, g in zip(H, grad)])
        n_iter[act] += 1

        small = np.abs(step).max(axis=1) <= tol
        converged[act[small]] = True
        done[act[small]] = True
        move = ~small
        # step halving until the penalized likelihood strictly increases
        t = np.ones(act.size)
        accepted = np.zeros(act.size, dtype=bool)
        accepted[~move] = True
        cand = b.copy()
        cand_ll = ll[act].copy()
        for _half in range(30):
            trying = np.flatnonzero(~accepted)
            if trying.size == 0:
                break
            c = b[trying] + t[trying, None] * step[trying]
            c_ll = _penalized_loglik(c, Z, y, w[trying], ridge)
            ok = c_ll > ll[act[trying]]
            cand[trying[ok]] = c[ok]
            cand_ll[trying[ok]] = c_ll[ok]
            accepted[trying[ok]] = True
            t[trying[~ok]] *= 0.5
        # no representable ascent left: numerically at the optimum
        stalled = move & ~accepted
        converged[act[stalled]] = True
        done[act[stalled]] = True

        upd = move & accepted
        separated = upd & (np.abs(cand[:, 1:]).max(axis=1, initial=0.0) > SEPARATION_LIMIT)
        done[act[separated]] = True
        keep = upd & ~separated
        beta[act[keep]] = cand[keep]
        ll[act[keep]] = cand_ll[keep]
        if history is not None:
            history.append(ll.copy())

    return beta, converged, n_iter, ll


def fit_logistic(X, y, *, ridge=1e-6, tol=1e-8, max_iter=100, sample_weight=None,
                 feature_names=None, history=None) -> LogisticModel:
    """Maximize the ridge-penalized log-likelihood by damped Newton iterations.

    Converged means the largest Newton step fell to ``tol``. If any slope
    would exceed 1e3 in magnitude (separation), fitting stops at the last
    stable iterate and the model is flagged ``converged=False``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] < 1:
        raise ValueError("X must be a 2-D array with at least one feature")
    y = check_both_classes(y, what="y")
    if X.shape[0] != y.size:
        raise ValueError("X and y have different numbers of rows")
    if not np.isfinite(X).all():
        raise ValueError("non-finite input")
    w = np.ones(y.size) if sample_weight is None else np.asarray(sample_weight, dtype=float)
    beta, conv, n_iter, ll = fit_logistic_batch(
        X, y, w[None], ridge=ridge, tol=tol, max_iter=max_iter, history=history)
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{i}" for i in range(X.shape[1]))
    return LogisticModel(
        intercept=float(beta[0, 0]),
        coefficients=beta[0, 1:],
        feature_names=names,
        converged=bool(conv[0]),
        iterations_used=int(n_iter[0]),
        final_log_likelihood=float(ll[0]),
    )


class LogisticRegressionIRLS(ClassifierMixin, BaseEstimator):
    """scikit-learn wrapper around :func:`fit_logistic`.

    Parameters
    ----------
    ridge : float, default=1e-6
        L2 penalty on the slopes.
    tol : float, default=1e-8
        Convergence threshold on the largest Newton step.
    max_iter : int, default=100
    """

    def __init__(self, ridge=1e-6, tol=1e-8, max_iter=100):
        self.ridge = ridge
        self.tol = tol
        self.max_iter = max_iter

    def fit(self, X, y, sample_weight=None):
        names = getattr(X, "columns", None)
        X, y = check_X_y(X, y, dtype=float)
        if names is not None:
            self.feature_names_in_ = np.asarray(names, dtype=object)
        self.n_features_in_ = X.shape[1]
        self.classes_ = np.array([0, 1])
        self.model_ = fit_logistic(
            X, y, ridge=self.ridge, tol=self.tol, max_iter=self.max_iter,
            sample_weight=sample_weight,
            feature_names=None if names is None else [str(c) for c in names],
        )
        self.coef_ = self.model_.coefficients[None, :]
        self.intercept_ = np.array([self.model_.intercept])
        self.n_iter_ = np.array([self.model_.iterations_used])
        self.converged_ = self.model_.converged
        return self

    def decision_function(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=float)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.model_.intercept + X @ self.model_.coefficients

    def predict_proba(self, X):
        p = _sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)
