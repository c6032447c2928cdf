"""Replayable preprocessing: missingness and variance filters, correlation
pruning, spatial-sign normalization and stratified T-value standardization.

Fitting order is fixed: T-values (on raw measurements) -> high-missing
features -> incomplete rows -> near-zero variance -> correlation -> spatial
sign.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .cohort import STRATA, Cohort, Feature, FeatureSchema

PIPELINE_VERSION = 1


class EmptyCohortError(ValueError):
    pass


# --- column statistics on plain arrays ----------------------------------------

def missing_fraction(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[0] == 0:
        return np.zeros(X.shape[1])
    return np.isnan(X).mean(axis=0)


def nzv_mask(X, freq_ratio_cut: float = 19.0, unique_frac_cut: float = 0.10) -> np.ndarray:
    """True for columns flagged near-zero-variance.

    Flagged: a single distinct value, or (most/second-most frequent count
    ratio >= ``freq_ratio_cut`` and distinct values / n < ``unique_frac_cut``).
    Missing values are ignored.
    """
    X = np.asarray(X, dtype=float)
    flags = np.zeros(X.shape[1], dtype=bool)
    for j in range(X.shape[1]):
        col = X[:, j]
        col = col[~np.isnan(col)]
        if col.size == 0:
            flags[j] = True
            continue
        counts = sorted(Counter(col.tolist()).values(), reverse=True)
        if len(counts) == 1:
            flags[j] = True
            continue
        ratio = counts[0] / counts[1]
        flags[j] = ratio >= freq_ratio_cut and len(counts) / col.size < unique_frac_cut
    return flags


def _abs_corr(X) -> np.ndarray:
    with np.errstate(invalid="ignore", divide="ignore"):
        R = np.abs(np.corrcoef(X, rowvar=False))
    R = np.atleast_2d(np.nan_to_num(R, nan=0.0))
    R = np.maximum(R, R.T)  # corrcoef is symmetric only up to rounding
    np.fill_diagonal(R, 1.0)
    return R


def correlation_drop_order(X, names, cutoff: float = 0.83) -> list[str]:
    """Greedy pruning until no pair exceeds ``cutoff`` in absolute Pearson r.

    From the most correlated pair, the member with the larger mean absolute
    correlation to the other survivors is removed; on a tie the
    lexicographically later name goes.
    """
    names = list(names)
    R = _abs_corr(np.asarray(X, dtype=float)) if len(names) > 1 else np.ones((1, 1))
    alive = list(range(len(names)))
    dropped = []
    while len(alive) > 1:
        sub = R[np.ix_(alive, alive)]
        off = sub - np.eye(len(alive))
        top = off.max()
        if top <= cutoff:
            break
        pairs = [(min(names[alive[a]], names[alive[b]]), max(names[alive[a]], names[alive[b]]), a, b)
                 for a, b in zip(*np.nonzero(np.triu(off == top, 1)))]
        _, _, a, b = min(pairs)
        mean_a = off[a].sum() / (len(alive) - 1)
        mean_b = off[b].sum() / (len(alive) - 1)
        if mean_a > mean_b:
            victim = a
        elif mean_b > mean_a:
            victim = b
        else:
            victim = a if names[alive[a]] > names[alive[b]] else b
        dropped.append(names[alive[victim]])
        del alive[victim]
    return dropped


def spatial_sign(X, center, scale) -> np.ndarray:
    """Center, scale, then project every row onto the unit sphere (zero rows stay zero)."""
    Z = (np.asarray(X, dtype=float) - center) / scale
    norms = np.sqrt(np.sum(Z * Z, axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    return Z / safe[:, None]


# --- cohort-level operations --------------------------------------------------

def drop_high_missing(cohort: Cohort, max_frac: float = 0.20) -> tuple[Cohort, list[str]]:
    """Remove features whose missing fraction is strictly above ``max_frac``."""
    frac = missing_fraction(cohort.X)
    dropped = [n for n, f in zip(cohort.feature_names, frac) if f > max_frac]
    keep = [n for n in cohort.feature_names if n not in dropped]
    return cohort.select(keep), dropped


def drop_incomplete_rows(cohort: Cohort) -> tuple[Cohort, int]:
    complete = ~np.isnan(cohort.X).any(axis=1)
    if cohort.n and not complete.any():
        raise EmptyCohortError("every row has a missing value; nothing left after row removal")
    return cohort.subset(np.flatnonzero(complete)), int(cohort.n - complete.sum())


def nzv_filter(cohort: Cohort, freq_ratio_cut: float = 19.0,
               unique_frac_cut: float = 0.10) -> tuple[Cohort, list[str]]:
    flags = nzv_mask(cohort.X, freq_ratio_cut, unique_frac_cut)
    dropped = [n for n, f in zip(cohort.feature_names, flags) if f]
    return cohort.select([n for n in cohort.feature_names if n not in dropped]), dropped


def correlation_filter(cohort: Cohort, cutoff: float = 0.83) -> tuple[Cohort, list[str]]:
    """Prune correlated numeric features; binary and categorical ones are left alone."""
    numeric = cohort.schema.numeric
    if len(numeric) < 2:
        return cohort, []
    dropped = correlation_drop_order(cohort.matrix(numeric), numeric, cutoff)
    return cohort.select([n for n in cohort.feature_names if n not in dropped]), dropped


@dataclass(frozen=True)
class SpatialSignStats:
    features: tuple[str, ...]
    center: np.ndarray
    scale: np.ndarray

    def apply(self, cohort: Cohort) -> Cohort:
        if not self.features:
            return cohort
        X = np.array(cohort.X)
        cols = [cohort.feature_names.index(n) for n in self.features]
        X[:, cols] = spatial_sign(cohort.matrix(self.features), self.center, self.scale)
        return cohort.with_values(X)


def fit_spatial_sign(cohort: Cohort) -> SpatialSignStats:
    features = tuple(cohort.schema.numeric)
    X = cohort.matrix(list(features))
    if np.isnan(X).any():
        raise ValueError("spatial sign needs complete numeric features")
    center = X.mean(axis=0)
    scale = X.std(axis=0, ddof=1) if cohort.n > 1 else np.zeros(len(features))
    zero = [n for n, s in zip(features, scale) if not s > 0]
    if zero:
        raise ValueError(f"zero standard deviation at fit time: {zero}")
    return SpatialSignStats(features, center, scale)


def fit_apply_spatial_sign(cohort: Cohort) -> tuple[Cohort, SpatialSignStats]:
    stats = fit_spatial_sign(cohort)
    return stats.apply(cohort), stats


# --- T-values -----------------------------------------------------------------

@dataclass(frozen=True)
class TValueStats:
    """Non-fracture mean, SD and count per (sex, age_band, race, feature)."""

    table: dict = field(default_factory=dict)

    def lookup(self, stratum, feature):
        try:
            return self.table[(*stratum, feature)]
        except KeyError:
            raise ValueError(f"no reference statistics for stratum {stratum} feature {feature!r}") from None

    def to_list(self) -> list[dict]:
        return [
            {**dict(zip(STRATA, key[:3])), "feature": key[3], "mean": m, "sd": s, "n": k}
            for key, (m, s, k) in sorted(self.table.items())
        ]

    @classmethod
    def from_list(cls, rows) -> "TValueStats":
        return cls({(r["sex"], r["age_band"], r["race"], r["feature"]):
                    (float(r["mean"]), float(r["sd"]), int(r["n"])) for r in rows})


def fit_t_value_stats(reference: Cohort, features) -> TValueStats:
    """Stratum statistics from the reference cohort's non-fracture subjects (sample SD)."""
    keys = reference.stratum_keys()
    controls = reference.y == 0
    table = {}
    for stratum in sorted(set(keys)):
        rows = np.array([k == stratum for k in keys]) & controls
        for f in features:
            vals = reference.column(f)[rows]
            vals = vals[~np.isnan(vals)]
            sd = float(np.std(vals, ddof=1)) if vals.size > 1 else float("nan")
            table[(*stratum, f)] = (float(vals.mean()) if vals.size else float("nan"), sd, int(vals.size))
    return TValueStats(table)


def apply_t_values(target: Cohort, stats: TValueStats, features) -> Cohort:
    keys = target.stratum_keys()
    X = np.array(target.X)
    for f in features:
        j = target.feature_names.index(f)
        for stratum in sorted(set(keys)):
            mean, sd, n = stats.lookup(stratum, f)
            if n < 2 or not sd > 0:
                raise ValueError(
                    f"stratum {stratum} feature {f!r}: needs >= 2 non-fracture subjects with SD > 0 "
                    f"(n={n}, sd={sd})")
            rows = np.array([k == stratum for k in keys])
            X[rows, j] = (X[rows, j] - mean) / sd
    return target.with_values(X)


def t_value_transform(target: Cohort, reference: Cohort, features) -> Cohort:
    """(value - stratum non-fracture mean) / stratum non-fracture SD, per listed feature."""
    return apply_t_values(target, fit_t_value_stats(reference, features), features)


# --- the fitted pipeline ------------------------------------------------------

@dataclass(frozen=True)
class PreprocessPipeline:
    dropped_features: tuple[tuple[str, str], ...]
    row_drop_count: int
    output_features: tuple[str, ...]
    spatial: SpatialSignStats | None = None
    t_value_features: tuple[str, ...] = ()
    t_stats: TValueStats | None = None

    @property
    def spatial_sign_enabled(self) -> bool:
        return self.spatial is not None

    @property
    def center(self) -> dict:
        return {} if self.spatial is None else dict(zip(self.spatial.features, self.spatial.center.tolist()))

    @property
    def scale(self) -> dict:
        return {} if self.spatial is None else dict(zip(self.spatial.features, self.spatial.scale.tolist()))

    def apply(self, cohort: Cohort) -> tuple[Cohort, int]:
        """Replay the fitted steps on new data; returns the cohort and rows removed."""
        if self.t_stats is not None:
            cohort = apply_t_values(cohort, self.t_stats, self.t_value_features)
        cohort = cohort.select(list(self.output_features))
        cohort, n_rows = drop_incomplete_rows(cohort)
        if self.spatial is not None:
            cohort = self.spatial.apply(cohort)
        return cohort, n_rows

    def to_dict(self) -> dict:
        return {
            "version": PIPELINE_VERSION,
            "dropped_features": [{"name": n, "reason": r} for n, r in self.dropped_features],
            "row_drop_count": self.row_drop_count,
            "output_features": list(self.output_features),
            "spatial_sign_enabled": self.spatial_sign_enabled,
            "center": self.center,
            "scale": self.scale,
            "t_value_features": list(self.t_value_features),
            "t_value_strata": None if self.t_stats is None else self.t_stats.to_list(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PreprocessPipeline":
        if doc.get("version") != PIPELINE_VERSION:
            raise ValueError(f"unsupported pipeline version {doc.get('version')!r}")
        spatial = None
        if doc["spatial_sign_enabled"]:
            feats = tuple(doc["center"])
            spatial = SpatialSignStats(feats, np.array([doc["center"][f] for f in feats]),
                                       np.array([doc["scale"][f] for f in feats]))
        strata = doc.get("t_value_strata")
        return cls(
            dropped_features=tuple((d["name"], d["reason"]) for d in doc["dropped_features"]),
            row_drop_count=int(doc["row_drop_count"]),
            output_features=tuple(doc["output_features"]),
            spatial=spatial,
            t_value_features=tuple(doc.get("t_value_features", ())),
            t_stats=None if strata is None else TValueStats.from_list(strata),
        )


def fit_pipeline(cohort: Cohort, *, max_missing: float = 0.20, freq_ratio_cut: float = 19.0,
                 unique_frac_cut: float = 0.10, corr_cutoff: float = 0.83,
                 spatial_sign_enabled: bool = True, t_value_features=(),
                 t_value_reference: Cohort | None = None) -> tuple[Cohort, PreprocessPipeline]:
    """Fit every step on ``cohort`` and return the transformed cohort with the pipeline.

    T-value reference statistics come from ``t_value_reference`` when given,
    otherwise from ``cohort`` itself.
    """
    t_feats = tuple(t_value_features)
    t_stats = None
    if t_feats:
        t_stats = fit_t_value_stats(t_value_reference if t_value_reference is not None else cohort, t_feats)
        cohort = apply_t_values(cohort, t_stats, t_feats)
    dropped = []
    cohort, d = drop_high_missing(cohort, max_missing)
    dropped += [(n, "high-missing") for n in d]
    cohort, n_rows = drop_incomplete_rows(cohort)
    cohort, d = nzv_filter(cohort, freq_ratio_cut, unique_frac_cut)
    dropped += [(n, "nzv") for n in d]
    cohort, d = correlation_filter(cohort, corr_cutoff)
    dropped += [(n, "correlated") for n in d]
    spatial = None
    if spatial_sign_enabled:
        cohort, spatial = fit_apply_spatial_sign(cohort)
    pipeline = PreprocessPipeline(
        dropped_features=tuple(dropped),
        row_drop_count=n_rows,
        output_features=tuple(cohort.feature_names),
        spatial=spatial,
        t_value_features=tuple(f for f in t_feats if f in cohort.feature_names),
        t_stats=t_stats,
    )
    return cohort, pipeline


# --- scikit-learn transformers on plain arrays -------------------------------

class _ColumnFilter(SelectorMixin, BaseEstimator):
    def _validate(self, X, reset):
        X = check_array(X, dtype=float, ensure_all_finite="allow-nan")
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return X

    def _get_support_mask(self):
        check_is_fitted(self, "support_")
        return self.support_


class HighMissingFilter(_ColumnFilter):
    def __init__(self, max_frac=0.20):
        self.max_frac = max_frac

    def fit(self, X, y=None):
        X = self._validate(X, reset=True)
        self.missing_fraction_ = missing_fraction(X)
        self.support_ = self.missing_fraction_ <= self.max_frac
        return self


class NearZeroVarianceFilter(_ColumnFilter):
    def __init__(self, freq_ratio_cut=19.0, unique_frac_cut=0.10):
        self.freq_ratio_cut = freq_ratio_cut
        self.unique_frac_cut = unique_frac_cut

    def fit(self, X, y=None):
        X = self._validate(X, reset=True)
        self.support_ = ~nzv_mask(X, self.freq_ratio_cut, self.unique_frac_cut)
        return self


class CorrelationFilter(_ColumnFilter):
    def __init__(self, cutoff=0.83):
        self.cutoff = cutoff

    def fit(self, X, y=None):
        X = self._validate(X, reset=True)
        names = [f"x{j:06d}" for j in range(X.shape[1])]
        dropped = set(correlation_drop_order(X, names, self.cutoff))
        self.support_ = np.array([n not in dropped for n in names])
        return self


class SpatialSignTransformer(TransformerMixin, BaseEstimator):
    """Center/scale with training statistics, then normalize rows to unit length."""

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        self.n_features_in_ = X.shape[1]
        self.center_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0, ddof=1)
        if not (self.scale_ > 0).all():
            raise ValueError("zero standard deviation at fit time")
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=float)
        return spatial_sign(X, self.center_, self.scale_)


class TValueStandardizer(TransformerMixin, BaseEstimator):
    """Stratified T-values for a pandas frame carrying stratum columns.

    ``fit(X, y)`` learns non-fracture (``y == 0``) statistics per stratum;
    ``transform`` rewrites ``features`` and leaves other columns untouched.
    """

    def __init__(self, features=(), strata_cols=(("sex", "sex"), ("age_band", "age_band"), ("race", "race"))):
        self.features = features
        self.strata_cols = strata_cols

    def _cohort(self, X, y=None):
        feats = list(self.features)
        strata = {k: X[c].astype(str).to_numpy() for k, c in dict(self.strata_cols).items()}
        n = len(X)
        return Cohort(FeatureSchema(tuple(Feature(f) for f in feats)), ids=np.arange(n),
                      X=X[feats].to_numpy(dtype=float),
                      y=np.zeros(n, dtype=np.int8) if y is None else np.asarray(y), strata=strata)

    def fit(self, X, y):
        self.stats_ = fit_t_value_stats(self._cohort(X, y), list(self.features))
        return self

    def transform(self, X):
        check_is_fitted(self)
        out = X.copy()
        out[list(self.features)] = apply_t_values(self._cohort(X), self.stats_, list(self.features)).X
        return out
