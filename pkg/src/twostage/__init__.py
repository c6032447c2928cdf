"""Uncertainty-gated two-stage bagged logistic classification for tabular risk prediction."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .cascade import (CascadeConfig, CascadeModel, CascadeReport, CaseDecision, TwoStageClassifier,
                      cascade_predict, evaluate_cascade, protocol_external, protocol_single_ensemble,
                      protocol_two_stage, train_cascade, uncertainty_z)
from .cohort import (Cohort, Feature, FeatureSchema, SyntheticSpec, bootstrap_resample, generate_synthetic,
                     load_cohort, stratified_split)
from .ensemble import BaggedLogisticEnsemble, EnsembleModel, ensemble_stats, train_bagged, train_ensemble_cv
from .featsel import RankAveragedRFE, rfe_rank, select_top_k
from .glm import LogisticModel, LogisticRegressionIRLS, fit_logistic, loglik_and_grad
from .metrics import (MetricSet, RocCurve, auc_trapezoid, confusion_at, cutoff_classify, roc_points,
                      summarize_runs, youden_best)
from .preprocess import PreprocessPipeline, fit_pipeline, t_value_transform

__all__ = [
    "BaggedLogisticEnsemble", "CascadeConfig", "CascadeModel", "CascadeReport", "CaseDecision", "Cohort",
    "EnsembleModel", "Feature", "FeatureSchema", "LogisticModel", "LogisticRegressionIRLS", "MetricSet",
    "PreprocessPipeline", "RankAveragedRFE", "RocCurve", "SyntheticSpec", "TwoStageClassifier",
    "auc_trapezoid", "bootstrap_resample", "cascade_predict", "confusion_at", "cutoff_classify",
    "ensemble_stats", "evaluate_cascade", "fit_logistic", "fit_pipeline", "generate_synthetic",
    "load_cohort", "loglik_and_grad", "protocol_external", "protocol_single_ensemble", "protocol_two_stage",
    "rfe_rank", "roc_points", "select_top_k", "stratified_split", "summarize_runs", "t_value_transform",
    "train_bagged", "train_cascade", "train_ensemble_cv", "uncertainty_z", "youden_best",
]
