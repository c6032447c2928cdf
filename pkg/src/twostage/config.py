"""Run configuration: every constant of the experiment, overridable from a file or flags."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .cascade import CascadeConfig
from .cohort import Feature, FeatureSchema


@dataclass
class RunConfig:
    seed: int = 0
    runs: int = 100
    folds: int = 5
    bags: int = 50
    z_cutoff: float = 2.0
    train_frac: float = 0.8
    k_stage1: int = 7
    k_stage2: int = 15
    rfe_iterations: int = 100
    corr_cutoff: float = 0.83
    missing_cutoff: float = 0.20
    nzv_freq_ratio: float = 19.0
    nzv_unique_frac: float = 0.10
    spatial_sign: bool = True
    t_value_features: list = field(default_factory=list)
    refit_full: bool = False
    merged_auc: str = "raw"
    n_jobs: int | None = None
    protocol: str = "two-stage"

    input: str | None = None
    external: str | None = None
    out_dir: str = "out"

    outcome_col: str = "outcome"
    id_col: str | None = "id"
    schema: list = field(default_factory=list)
    strata: dict = field(default_factory=dict)   # sex/age_band/race -> column name
    age_bands: list | None = None
    exclude_features: list = field(default_factory=list)
    stage1_features: list | None = None
    stage2_features: list | None = None

    def __post_init__(self):
        if self.protocol not in ("single", "two-stage", "external"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        CascadeConfig(z_cutoff=self.z_cutoff, merged_auc=self.merged_auc)

    @property
    def feature_schema(self) -> FeatureSchema:
        return FeatureSchema(tuple(Feature(**e) if isinstance(e, dict) else Feature(e) for e in self.schema))

    @property
    def cascade(self) -> CascadeConfig:
        return CascadeConfig(folds=self.folds, bags=self.bags, z_cutoff=self.z_cutoff,
                             refit_full=self.refit_full, merged_auc=self.merged_auc, n_jobs=self.n_jobs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**doc)

    def with_overrides(self, **overrides) -> "RunConfig":
        doc = self.to_dict()
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig.from_dict(doc)


def load_config(path) -> RunConfig:
    """Read a YAML (or JSON) key-value file into a :class:`RunConfig`."""
    text = Path(path).read_text(encoding="utf-8")
    doc = yaml.safe_load(text) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return RunConfig.from_dict(doc)
