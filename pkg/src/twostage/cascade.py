"""Uncertainty-gated two-stage classification.

Stage 1 (clinical features) decides every case whose ensemble disagreement
z-score ``|mean - threshold| / sd`` is at least ``z_cutoff``; the remaining,
uncertain cases are decided by stage 2 (clinical plus imaging features).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._utils import (FORMAT_VERSION, NeedsImagingError, SchemaMismatchError, as_generator,
                     check_both_classes, spawn)
from .cohort import Cohort, Feature, FeatureSchema, stratified_split
from .cohort import bootstrap_indices, stratified_kfold_indices
from .ensemble import EnsembleModel, PredictionStats, train_ensemble_cv
from .glm import fit_logistic
from .metrics import MetricSet, evaluate_scores, roc_auc, roc_points, summarize_runs, youden_best

NEEDS_IMAGING = "needs-imaging"


@dataclass(frozen=True)
class CascadeConfig:
    folds: int = 5
    bags: int = 50
    z_cutoff: float = 2.0
    refit_full: bool = False
    merged_auc: str = "raw"  # or "shifted": each probability minus its stage threshold
    ridge: float = 1e-6
    n_jobs: int | None = None

    def __post_init__(self):
        if self.z_cutoff < 0:
            raise ValueError("z_cutoff must be non-negative")
        if self.merged_auc not in ("raw", "shifted"):
            raise ValueError("merged_auc must be 'raw' or 'shifted'")


@dataclass(frozen=True, eq=False)
class CascadeModel:
    stage1: EnsembleModel
    stage2: EnsembleModel
    z_cutoff: float = 2.0

    def __post_init__(self):
        if self.z_cutoff < 0:
            raise ValueError("z_cutoff must be non-negative")

    def to_dict(self) -> dict:
        return {
            "format": "twostage-cascade",
            "version": FORMAT_VERSION,
            "z_cutoff": float(self.z_cutoff),
            "stage1": self.stage1.to_dict(),
            "stage2": self.stage2.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CascadeModel":
        if doc.get("format") != "twostage-cascade":
            raise ValueError("not a cascade model document")
        if doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported cascade model version {doc.get('version')!r}")
        return cls(EnsembleModel.from_dict(doc["stage1"]), EnsembleModel.from_dict(doc["stage2"]),
                   float(doc["z_cutoff"]))


@dataclass(frozen=True)
class CaseDecision:
    id: str
    stage_used: int
    probability: float
    z: float
    predicted: int


def uncertainty_z(stats, threshold: float):
    """``|mean - threshold| / sd``; with ``sd == 0`` it is +inf unless mean equals threshold.

    Accepts a :class:`PredictionStats` or a ``(mean, sd)`` pair of scalars or arrays.
    """
    mean, sd = (stats.mean, stats.sd) if isinstance(stats, PredictionStats) else stats
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    gap = np.abs(mean - threshold)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, gap / np.where(sd > 0, sd, 1.0), np.where(gap > 0, np.inf, 0.0))
    return float(z) if z.ndim == 0 else z


@dataclass(frozen=True)
class Decisions:
    """Vectorized routing outcome for a batch of cases."""

    ids: np.ndarray
    stage_used: np.ndarray      # 1, 2, or 0 where stage 2 was needed but imaging was missing
    probability: np.ndarray     # deciding ensemble's mean probability (NaN when undecided)
    z: np.ndarray
    predicted: np.ndarray       # 0/1, -1 when undecided
    stage1_probability: np.ndarray
    stage2_probability: np.ndarray

    def __len__(self):
        return self.ids.size

    def case(self, i: int) -> CaseDecision:
        return CaseDecision(str(self.ids[i]), int(self.stage_used[i]), float(self.probability[i]),
                            float(self.z[i]), int(self.predicted[i]))


def _table(data, names):
    """(n, len(names)) float matrix from a Cohort, mapping of columns, or frame; absent -> NaN."""
    if isinstance(data, Cohort):
        cols = data.feature_names
        n = data.n
        get = lambda f: data.column(f)  # noqa: E731
    elif hasattr(data, "columns"):
        cols = list(data.columns)
        n = len(data)
        get = lambda f: data[f].to_numpy(dtype=float)  # noqa: E731
    else:
        cols = list(data)
        n = len(next(iter(data.values()))) if data else 0
        get = lambda f: np.asarray(data[f], dtype=float)  # noqa: E731
    out = np.full((n, len(names)), np.nan)
    for j, f in enumerate(names):
        if f in cols:
            out[:, j] = get(f)
    return out


def decide(model: CascadeModel, data, ids=None, *, on_missing: str = "raise") -> Decisions:
    """Route and decide every case in ``data``.

    ``on_missing="raise"`` raises :class:`NeedsImagingError` for the first
    routed case lacking a stage-2 feature; ``"flag"`` marks such cases with
    ``stage_used == 0`` instead.
    """
    s1, s2 = model.stage1, model.stage2
    X1 = _table(data, s1.feature_names)
    if np.isnan(X1).any():
        bad = [f for j, f in enumerate(s1.feature_names) if np.isnan(X1[:, j]).any()]
        raise SchemaMismatchError(f"stage-1 features missing or incomplete: {bad}")
    n = X1.shape[0]
    if ids is None:
        ids = data.ids if isinstance(data, Cohort) else np.arange(n).astype(str)
    ids = np.asarray(ids).astype(str)

    mean1, sd1, _ = s1.predict_stats(X1)
    z = uncertainty_z((mean1, sd1), s1.threshold)
    certain = z >= model.z_cutoff

    X2 = _table(data, s2.feature_names)
    routed = np.flatnonzero(~certain)
    complete = ~np.isnan(X2[routed]).any(axis=1)
    if not complete.all():
        first = routed[~complete][0]
        missing = [f for j, f in enumerate(s2.feature_names) if np.isnan(X2[first, j])]
        if on_missing == "raise":
            raise NeedsImagingError(missing, ids[first])
    mean2 = np.full(n, np.nan)
    ok = routed[complete]
    if ok.size:
        mean2[ok] = s2.predict_proba(X2[ok])

    stage = np.where(certain, 1, 2)
    stage[routed[~complete]] = 0
    prob = np.where(certain, mean1, mean2)
    thr = np.where(certain, s1.threshold, s2.threshold)
    predicted = np.where(stage == 0, -1, (prob >= thr).astype(int))
    return Decisions(ids, stage, prob, z, predicted, mean1, mean2)


def cascade_predict(model: CascadeModel, sample, sample_id=None) -> CaseDecision:
    """Decision for one case given as a mapping of feature name to value."""
    row = {k: [np.nan if v is None else float(v)] for k, v in dict(sample).items()}
    return decide(model, row, ids=[sample_id if sample_id is not None else "0"]).case(0)


@dataclass(frozen=True)
class CascadeReport:
    overall: MetricSet
    stage1_accuracy: float
    stage2_accuracy: float
    stage1_fraction: float
    stage2_fraction: float
    n_uncertain: int
    n: int
    stage1_alone: MetricSet
    stage2_alone: MetricSet

    def as_row(self) -> dict:
        row = {**self.overall.as_dict()}
        row.update(stage1_accuracy=self.stage1_accuracy, stage2_accuracy=self.stage2_accuracy,
                   stage1_fraction=self.stage1_fraction, stage2_fraction=self.stage2_fraction,
                   n_uncertain=self.n_uncertain, n=self.n)
        for prefix, ms in (("ensemble1", self.stage1_alone), ("ensemble2", self.stage2_alone)):
            row.update({f"{prefix}_{k}": v for k, v in ms.as_dict().items()})
        # undefined stage accuracy is null, not NaN, in every serialized form
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()}


def evaluate_cascade(model: CascadeModel, test: Cohort, *, merged_auc: str = "raw") -> CascadeReport:
    """Merged-prediction metrics plus stage-wise accuracy and routing fractions.

    Assumes imaging is available for every test case. A stage that decides no
    cases has accuracy NaN (undefined), never 0.
    """
    y = check_both_classes(test.y, what="test outcomes")
    d = decide(model, test)
    stage1 = d.stage_used == 1
    stage2 = ~stage1
    correct = d.predicted == y
    if merged_auc == "shifted":
        score = d.probability - np.where(stage1, model.stage1.threshold, model.stage2.threshold)
    else:
        score = d.probability
    pred = d.predicted.astype(bool)
    tp = int(np.sum(pred & (y == 1)))
    tn = int(np.sum(~pred & (y == 0)))
    overall = MetricSet(accuracy=(tp + tn) / y.size, sensitivity=tp / int(y.sum()),
                        specificity=tn / int((y == 0).sum()), auc=roc_auc(score, y))

    p2_all = model.stage2.predict_proba(test.matrix(model.stage2.feature_names))
    n = y.size
    n1 = int(stage1.sum())
    return CascadeReport(
        overall=overall,
        stage1_accuracy=float(correct[stage1].mean()) if n1 else math.nan,
        stage2_accuracy=float(correct[stage2].mean()) if n - n1 else math.nan,
        stage1_fraction=n1 / n,
        stage2_fraction=(n - n1) / n,
        n_uncertain=n - n1,
        n=n,
        stage1_alone=evaluate_scores(d.stage1_probability, y, model.stage1.threshold),
        stage2_alone=evaluate_scores(p2_all, y, model.stage2.threshold),
    )


def train_cascade(train: Cohort, clinical_features, stage2_features, config: CascadeConfig | None = None,
                  rng=None) -> CascadeModel:
    """Stage 1 on clinical features, stage 2 on clinical + imaging, independent rng streams."""
    config = config or CascadeConfig()
    clinical_features = list(clinical_features)
    stage2_features = list(stage2_features)
    imaging = [f for f in stage2_features
               if f in train.schema and train.schema[f].stage_tag == "imaging"]
    if not imaging:
        raise ValueError("stage 2 needs at least one imaging feature")
    if not np.isfinite(train.matrix(stage2_features)).all():
        raise ValueError("stage-2 training features must be complete")
    r1, r2 = spawn(rng, 2)
    kw = dict(folds=config.folds, bags=config.bags, refit_full=config.refit_full,
              ridge=config.ridge, n_jobs=config.n_jobs)
    stage1 = train_ensemble_cv(train, clinical_features, rng=r1, stage_label="clinical", **kw)
    stage2 = train_ensemble_cv(train, stage2_features, rng=r2, stage_label="clinical+imaging", **kw)
    return CascadeModel(stage1, stage2, config.z_cutoff)


# --- evaluation protocols -----------------------------------------------------

@dataclass(frozen=True)
class ProtocolResult:
    protocol: str
    rows: list
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "rows": self.rows,
                "summary": {k: {"mean": _null(m), "sd": _null(s)} for k, (m, s) in self.summary.items()}}


def _null(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def _numeric_fields(rows):
    return [k for k, v in rows[0].items()
            if any(isinstance(r.get(k), (int, float)) and not isinstance(r.get(k), bool) for r in rows)
            and k != "run"]


def summarize_rows(rows) -> dict:
    return summarize_runs(rows, fields=_numeric_fields(rows))


def _run_all(fn, args_list, n_jobs):
    if n_jobs in (None, 1):
        return [fn(*a) for a in args_list]
    return Parallel(n_jobs=n_jobs)(delayed(fn)(*a) for a in args_list)


def _single_run(X, y, folds, rng, ridge):
    boot_rng, fold_rng = spawn(rng, 2)
    idx = bootstrap_indices(y, boot_rng)
    Xb, yb = X[idx], y[idx]
    per_fold = []
    for tr, va in stratified_kfold_indices(yb, folds, fold_rng):
        model = fit_logistic(Xb[tr], yb[tr], ridge=ridge)
        scores = model.predict_proba(Xb[va])
        threshold, _ = youden_best(roc_points(scores, yb[va]))
        per_fold.append(evaluate_scores(scores, yb[va], threshold).as_dict())
    return {k: float(np.mean([f[k] for f in per_fold])) for k in per_fold[0]}


def protocol_single_ensemble(cohort: Cohort, features, runs: int = 100, folds: int = 5, rng=None,
                             *, ridge=1e-6, n_jobs=None) -> ProtocolResult:
    """Bootstrap the cohort, k-fold CV a logistic model on it, average folds; repeat ``runs`` times.

    Each fold's threshold is the Youden optimum on its own validation part.
    """
    X = cohort.matrix(list(features))
    y = check_both_classes(cohort.y, what="outcomes")
    if min(cohort.positives, cohort.negatives) < folds:
        raise ValueError(f"each class needs at least {folds} samples")
    results = _run_all(_single_run, [(X, y, folds, r, ridge) for r in spawn(rng, runs)], n_jobs)
    rows = [{"run": i, **r} for i, r in enumerate(results)]
    return ProtocolResult("single", rows, summarize_rows(rows))


def _two_stage_run(cohort, clinical, stage2, config, train_frac, rng):
    split_rng, model_rng = spawn(rng, 2)
    train, test = stratified_split(cohort, train_frac, split_rng)
    model = train_cascade(train, clinical, stage2, config, model_rng)
    return evaluate_cascade(model, test, merged_auc=config.merged_auc).as_row()


def protocol_two_stage(cohort: Cohort, clinical_features, stage2_features, runs: int = 100,
                       config: CascadeConfig | None = None, rng=None, *,
                       train_frac: float = 0.8) -> ProtocolResult:
    """Independent stratified 80/20 splits: train the cascade, evaluate on the held-out part."""
    config = config or CascadeConfig()
    args = [(cohort, list(clinical_features), list(stage2_features), config, train_frac, r)
            for r in spawn(rng, runs)]
    # parallelize across runs; members within a run stay sequential
    inner = CascadeConfig(**{**asdict(config), "n_jobs": None})
    args = [(*a[:3], inner, *a[4:]) for a in args]
    rows = [{"run": i, **r} for i, r in enumerate(_run_all(_two_stage_run, args, config.n_jobs))]
    return ProtocolResult("two-stage", rows, summarize_rows(rows))


def _external_run(internal, external, clinical, stage2, config, train_frac, rng):
    split_rng, model_rng = spawn(rng, 2)
    train, test = stratified_split(internal, train_frac, split_rng)
    model = train_cascade(train, clinical, stage2, config, model_rng)
    row = evaluate_cascade(model, external, merged_auc=config.merged_auc).as_row()
    row.update({f"internal_{k}": v for k, v in
                evaluate_cascade(model, test, merged_auc=config.merged_auc).as_row().items()})
    return row


def protocol_external(internal: Cohort, external: Cohort, clinical_features, stage2_features,
                      runs: int = 100, config: CascadeConfig | None = None, rng=None, *,
                      exclude=(), train_frac: float = 0.8) -> ProtocolResult:
    """Train on an internal 80/20 split each run and test on the whole external cohort.

    Features listed in ``exclude`` (e.g. follow-up time) are removed from
    both stages first. Rows also carry the internal held-out metrics, prefixed
    ``internal_``.
    """
    config = config or CascadeConfig()
    clinical = [f for f in clinical_features if f not in set(exclude)]
    stage2 = [f for f in stage2_features if f not in set(exclude)]
    for f in dict.fromkeys(clinical + stage2):
        for label, c in (("internal", internal), ("external", external)):
            if f not in c.schema:
                raise SchemaMismatchError(f"feature {f!r} missing from the {label} cohort")
    check_both_classes(external.y, what="external outcomes")
    inner = CascadeConfig(**{**asdict(config), "n_jobs": None})
    args = [(internal, external, clinical, stage2, inner, train_frac, r) for r in spawn(rng, runs)]
    rows = [{"run": i, **r} for i, r in enumerate(_run_all(_external_run, args, config.n_jobs))]
    return ProtocolResult("external", rows, summarize_rows(rows))


# --- estimator front-end ------------------------------------------------------

class TwoStageClassifier(ClassifierMixin, BaseEstimator):
    """Uncertainty-gated cascade over two bagged logistic ensembles.

    ``X`` must be a pandas DataFrame (or mapping of columns) containing every
    name in ``stage1_features`` and ``stage2_features``. Features of stage 2
    that are absent from stage 1 are treated as imaging.
    """

    def __init__(self, stage1_features=(), stage2_features=(), folds=5, bags=50, z_cutoff=2.0,
                 refit_full=False, merged_auc="raw", random_state=None, n_jobs=None):
        self.stage1_features = stage1_features
        self.stage2_features = stage2_features
        self.folds = folds
        self.bags = bags
        self.z_cutoff = z_cutoff
        self.refit_full = refit_full
        self.merged_auc = merged_auc
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self):
        return CascadeConfig(folds=self.folds, bags=self.bags, z_cutoff=self.z_cutoff,
                             refit_full=self.refit_full, merged_auc=self.merged_auc, n_jobs=self.n_jobs)

    def _cohort(self, X, y):
        s1 = list(self.stage1_features)
        names = list(dict.fromkeys(s1 + list(self.stage2_features)))
        schema = FeatureSchema(tuple(Feature(n, "numeric", "clinical" if n in s1 else "imaging")
                                     for n in names))
        y = np.zeros(len(X), dtype=np.int8) if y is None else np.asarray(y)
        return Cohort(schema, ids=np.arange(len(y)), X=_table(X, names), y=y)

    def fit(self, X, y):
        self.classes_ = np.array([0, 1])
        self.model_ = train_cascade(self._cohort(X, y), self.stage1_features, self.stage2_features,
                                    self._config(), as_generator(self.random_state))
        return self

    def decide(self, X, on_missing="raise") -> Decisions:
        check_is_fitted(self)
        return decide(self.model_, X, on_missing=on_missing)

    def predict_proba(self, X):
        p = self.decide(X).probability
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return self.decide(X).predicted

    def score_report(self, X, y) -> CascadeReport:
        check_is_fitted(self)
        return evaluate_cascade(self.model_, self._cohort(X, y), merged_auc=self.merged_auc)
