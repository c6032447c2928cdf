"""Cohort data model, CSV ingestion, stratified splitting, resampling and a
synthetic cohort generator.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from ._utils import DegenerateCohortError, SchemaMismatchError, as_generator, check_binary_labels

KINDS = ("numeric", "binary", "categorical")
STAGE_TAGS = ("clinical", "imaging")
STRATA = ("sex", "age_band", "race")
MISSING_MARKERS = ("", "NA")


class CohortParseError(ValueError):
    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str = "numeric"
    stage_tag: str = "clinical"

    def __post_init__(self):
        if not self.name:
            raise ValueError("feature name must be non-empty")
        if self.kind not in KINDS:
            raise ValueError(f"feature {self.name!r}: kind must be one of {KINDS}")
        if self.stage_tag not in STAGE_TAGS:
            raise ValueError(f"feature {self.name!r}: stage_tag must be one of {STAGE_TAGS}")


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature list, each tagged with a kind and the stage that may use it."""

    entries: tuple[Feature, ...]

    def __post_init__(self):
        entries = tuple(e if isinstance(e, Feature) else Feature(*e) for e in self.entries)
        object.__setattr__(self, "entries", entries)
        names = [e.name for e in entries]
        dupes = sorted({n for n in names if names.count(n) > 1})
        if dupes:
            raise ValueError(f"duplicate feature names: {dupes}")

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def __contains__(self, name):
        return name in self.names

    def __getitem__(self, name) -> Feature:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def tagged(self, stage_tag: str) -> list[str]:
        return [e.name for e in self.entries if e.stage_tag == stage_tag]

    @property
    def clinical(self) -> list[str]:
        return self.tagged("clinical")

    @property
    def imaging(self) -> list[str]:
        return self.tagged("imaging")

    @property
    def numeric(self) -> list[str]:
        return [e.name for e in self.entries if e.kind == "numeric"]

    def subset(self, names) -> "FeatureSchema":
        missing = [n for n in names if n not in self]
        if missing:
            raise SchemaMismatchError(f"features not in schema: {missing}")
        return FeatureSchema(tuple(self[n] for n in names))

    def to_list(self) -> list[dict]:
        return [{"name": e.name, "kind": e.kind, "stage_tag": e.stage_tag} for e in self.entries]

    @classmethod
    def from_list(cls, items) -> "FeatureSchema":
        return cls(tuple(Feature(**item) if isinstance(item, dict) else Feature(item) for item in items))


@dataclass(frozen=True, eq=False)
class Cohort:
    """Immutable table of samples.

    ``X`` holds feature values column-aligned with ``schema.names``; NaN marks
    a missing value. ``strata`` maps ``sex``/``age_band``/``race`` to per-sample
    labels (absent keys mean the cohort is unstratified on that attribute).
    """

    schema: FeatureSchema
    ids: np.ndarray
    X: np.ndarray
    y: np.ndarray
    strata: dict = field(default_factory=dict)
    dropped_missing_outcome: int = 0

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float).reshape(-1, len(self.schema))
        y = check_binary_labels(self.y, name="outcome")
        ids = np.asarray(self.ids).astype(str)
        if not (X.shape[0] == y.size == ids.size):
            raise ValueError("ids, X and y disagree on the number of samples")
        strata = {k: np.asarray(v).astype(str) for k, v in self.strata.items()}
        for k, v in strata.items():
            if k not in STRATA:
                raise ValueError(f"unknown stratum attribute {k!r}")
            if v.size != y.size:
                raise ValueError(f"stratum {k!r} has {v.size} labels for {y.size} samples")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "strata", strata)

    def __len__(self):
        return int(self.y.size)

    @property
    def n(self) -> int:
        return int(self.y.size)

    @property
    def positives(self) -> int:
        return int(self.y.sum())

    @property
    def negatives(self) -> int:
        return self.n - self.positives

    @property
    def feature_names(self) -> list[str]:
        return self.schema.names

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.schema.names.index(name)
        except ValueError:
            raise SchemaMismatchError(f"feature {name!r} not in cohort") from None
        return self.X[:, j]

    def matrix(self, names=None) -> np.ndarray:
        if names is None:
            return self.X
        cols = self.schema.names
        missing = [n for n in names if n not in cols]
        if missing:
            raise SchemaMismatchError(f"features missing from cohort: {missing}")
        return self.X[:, [cols.index(n) for n in names]]

    def stratum_keys(self) -> list[tuple[str, ...]]:
        keys = [self.strata.get(a, np.full(self.n, "")) for a in STRATA]
        return list(zip(*(k.tolist() for k in keys)))

    def subset(self, idx) -> "Cohort":
        idx = np.asarray(idx)
        return replace(
            self,
            ids=self.ids[idx],
            X=self.X[idx],
            y=self.y[idx],
            strata={k: v[idx] for k, v in self.strata.items()},
        )

    def select(self, names) -> "Cohort":
        return replace(self, schema=self.schema.subset(names), X=self.matrix(names))

    def with_values(self, X, schema=None) -> "Cohort":
        return replace(self, X=X, schema=self.schema if schema is None else schema)


def _parse_float(text: str, line: int, column: str) -> float:
    if text in MISSING_MARKERS:
        return math.nan
    try:
        value = float(text)
    except ValueError:
        raise CohortParseError(f"non-numeric value {text!r}", line, column) from None
    if not math.isfinite(value):
        raise CohortParseError(f"non-finite value {text!r}", line, column)
    return value


def assign_age_band(age: float, bands) -> str:
    """Label of the first inclusive ``[lo, hi]`` band containing ``age``."""
    for lo, hi in bands:
        if lo <= age <= hi:
            return f"{lo:g}-{hi:g}"
    raise ValueError(f"age {age} outside all bands {list(bands)}")


def load_cohort(path, schema: FeatureSchema, outcome_col: str, *, id_col=None,
                strata_cols=None, age_bands=None) -> Cohort:
    """Read a UTF-8 CSV into a :class:`Cohort`.

    ``""`` and ``"NA"`` are missing; any other non-numeric text in a feature
    column is an error. Rows whose outcome is missing are dropped and counted
    in ``dropped_missing_outcome``.

    ``strata_cols`` maps ``sex``/``race``/``age_band`` to column names. The
    ``age_band`` column may hold labels directly or, when ``age_bands`` is
    given, numeric ages that are binned into those bands.
    """
    strata_cols = dict(strata_cols or {})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortParseError("missing header row", 1) from None
        pos = {name: j for j, name in enumerate(header)}
        needed = [outcome_col, *schema.names, *strata_cols.values()]
        if id_col is not None:
            needed.append(id_col)
        missing = [c for c in needed if c not in pos]
        if missing:
            raise SchemaMismatchError(f"columns missing from {path}: {missing}")

        ids, rows, ys = [], [], []
        strata = {k: [] for k in strata_cols}
        dropped = 0
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise CohortParseError(f"expected {len(header)} fields, got {len(rec)}", lineno)
            out = rec[pos[outcome_col]].strip()
            if out in MISSING_MARKERS:
                dropped += 1
                continue
            yv = _parse_float(out, lineno, outcome_col)
            if yv not in (0.0, 1.0):
                raise CohortParseError(f"outcome must be 0/1, got {out!r}", lineno, outcome_col)
            ys.append(int(yv))
            rows.append([_parse_float(rec[pos[n]].strip(), lineno, n) for n in schema.names])
            ids.append(rec[pos[id_col]] if id_col is not None else str(lineno - 1))
            for k, col in strata_cols.items():
                label = rec[pos[col]].strip()
                if k == "age_band" and age_bands:
                    label = assign_age_band(_parse_float(label, lineno, col), age_bands)
                strata[k].append(label)

    return Cohort(
        schema=schema,
        ids=np.array(ids, dtype=str),
        X=np.array(rows, dtype=float).reshape(len(ys), len(schema)),
        y=np.array(ys, dtype=np.int8),
        strata={k: np.array(v, dtype=str) for k, v in strata.items()},
        dropped_missing_outcome=dropped,
    )


def read_feature_table(path, id_col=None) -> tuple[list[str], dict[str, np.ndarray]]:
    """Unlabelled CSV as ``(ids, {column: float array})``; non-numeric columns are skipped.

    Used for scoring, where outcome and stratum columns may be absent.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortParseError("missing header row", 1) from None
        records = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise CohortParseError(f"expected {len(header)} fields, got {len(rec)}", lineno)
            records.append(rec)
    ids = ([r[header.index(id_col)] for r in records] if id_col in header
           else [str(i + 1) for i in range(len(records))])
    columns = {}
    for j, name in enumerate(header):
        if name == id_col:
            continue
        try:
            columns[name] = np.array([_parse_float(r[j].strip(), i + 2, name)
                                      for i, r in enumerate(records)], dtype=float)
        except CohortParseError:
            continue
    return ids, columns


def _fmt(value: float) -> str:
    return "NA" if math.isnan(value) else repr(float(value))


def write_cohort(cohort: Cohort, path, outcome_col: str = "outcome", id_col: str = "id") -> None:
    """Write a cohort as CSV with exact (round-trippable) float text."""
    strata_names = [a for a in STRATA if a in cohort.strata]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([id_col, *strata_names, *cohort.schema.names, outcome_col])
        for i in range(cohort.n):
            w.writerow([
                cohort.ids[i],
                *(cohort.strata[a][i] for a in strata_names),
                *(_fmt(v) for v in cohort.X[i]),
                int(cohort.y[i]),
            ])


# --- splitting and resampling -------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def stratified_split_indices(y, train_frac: float, seed) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    y = check_binary_labels(y)
    rng = as_generator(seed)
    train, test = [], []
    for cls in (0, 1):
        members = np.flatnonzero(y == cls)
        if members.size < 2:
            raise DegenerateCohortError(f"class {cls} has {members.size} samples; cannot stratify")
        perm = rng.permutation(members)
        k = _round_half_up(members.size * train_frac)
        train.append(perm[:k])
        test.append(perm[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def stratified_split(cohort: Cohort, train_frac: float = 0.8, seed=0) -> tuple[Cohort, Cohort]:
    """Per-class ``round(count * train_frac)`` samples go to train (halves round up)."""
    tr, te = stratified_split_indices(cohort.y, train_frac, seed)
    return cohort.subset(tr), cohort.subset(te)


def stratified_kfold_indices(y, folds: int, rng) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified fold assignment; each class is dealt round-robin over the folds."""
    y = check_binary_labels(y)
    if folds < 2:
        raise ValueError("folds must be at least 2")
    for cls in (0, 1):
        if int(np.sum(y == cls)) < folds:
            raise DegenerateCohortError(f"class {cls} has fewer samples than folds={folds}")
    rng = as_generator(rng)
    assign = np.empty(y.size, dtype=int)
    offset = 0
    for cls in (0, 1):
        members = rng.permutation(np.flatnonzero(y == cls))
        assign[members] = (np.arange(members.size) + offset) % folds
        offset += members.size
    return [(np.flatnonzero(assign != f), np.flatnonzero(assign == f)) for f in range(folds)]


def bootstrap_indices(y, rng, max_redraws: int = 100) -> np.ndarray:
    """``n`` draws with replacement, redrawn until both classes appear."""
    y = np.asarray(y)
    n = y.size
    if n == 0:
        raise DegenerateCohortError("cannot resample an empty cohort")
    rng = as_generator(rng)
    for _ in range(max_redraws + 1):
        idx = rng.integers(0, n, n)
        k = int(y[idx].sum())
        if 0 < k < n:
            return idx
    raise DegenerateCohortError(f"no two-class bootstrap resample after {max_redraws} redraws")


def bootstrap_resample(cohort: Cohort, rng) -> Cohort:
    return cohort.subset(bootstrap_indices(cohort.y, rng))


# --- synthetic cohorts --------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Generative description of a synthetic cohort.

    Clinical features are standard normal (``binary_features`` are 0/1 with
    probability 0.3); imaging features are BMD-like values whose stratum-wise
    standardized form drives the outcome. When ``borderline_band`` is set,
    imaging contributes to risk only for samples whose clinical score falls
    inside it.
    """

    n: int
    prevalence: float
    clinical_effects: dict
    imaging_effects: dict
    borderline_band: tuple[float, float] | None = None
    seed: int = 0
    binary_features: tuple[str, ...] = ()
    noise_clinical: int = 0
    sex: str = "male"
    age_bands: tuple[tuple[float, float], ...] = ((65, 75), (76, 96))
    races: tuple[tuple[str, float], ...] = (("white", 0.90), ("black", 0.04),
                                            ("asian", 0.03), ("other", 0.03))

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be positive")
        if not 0.0 < self.prevalence < 1.0:
            raise ValueError("prevalence must lie strictly between 0 and 1")
        if self.borderline_band is not None and not self.borderline_band[0] < self.borderline_band[1]:
            raise ValueError("borderline_band needs lo < hi")
        overlap = set(self.clinical_effects) & set(self.imaging_effects)
        if overlap:
            raise ValueError(f"features both clinical and imaging: {sorted(overlap)}")

    @property
    def schema(self) -> FeatureSchema:
        clinical = list(self.clinical_effects) + [f"noise{i}" for i in range(self.noise_clinical)]
        entries = [Feature(n, "binary" if n in self.binary_features else "numeric", "clinical")
                   for n in clinical]
        entries += [Feature(n, "numeric", "imaging") for n in self.imaging_effects]
        return FeatureSchema(tuple(entries))


def _solve_offset(score, u, target: int) -> float:
    """Smallest offset (by bisection) with at least ``target`` positives.

    With common random numbers ``u`` the positive count is monotone in the
    offset, so the empirical count can be steered exactly.
    """
    def count(off):
        return int(np.sum(u < expit(score + off)))

    lo, hi = -60.0, 60.0
    if count(lo) > target or count(hi) < target:
        raise ValueError("offset bisection failed to bracket the target prevalence")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if count(mid) >= target:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-12:
            break
    return hi


def generate_synthetic(spec: SyntheticSpec, *, return_truth: bool = False):
    """Draw a cohort from ``spec``; deterministic given ``spec.seed``.

    With ``return_truth=True`` also returns each sample's generating outcome
    probability (the Bayes-optimal risk score).
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    schema = spec.schema

    race_labels = [r for r, _ in spec.races]
    race_p = np.array([p for _, p in spec.races], dtype=float)
    race = rng.choice(race_labels, size=n, p=race_p / race_p.sum())
    band_idx = rng.integers(0, len(spec.age_bands), n)
    age_band = np.array([f"{lo:g}-{hi:g}" for lo, hi in spec.age_bands])[band_idx]
    sex = np.full(n, spec.sex)

    clinical = schema.clinical
    Xc = rng.standard_normal((n, len(clinical)))
    for j, name in enumerate(clinical):
        if name in spec.binary_features:
            Xc[:, j] = (Xc[:, j] > 0.5244).astype(float)  # P(z > 0.5244) = 0.3
    coef_c = np.array([spec.clinical_effects.get(name, 0.0) for name in clinical])
    clinical_score = Xc @ coef_c

    imaging = schema.imaging
    Zi = rng.standard_normal((n, len(imaging)))
    coef_i = np.array([spec.imaging_effects[name] for name in imaging])
    imaging_score = Zi @ coef_i
    if spec.borderline_band is not None:
        lo, hi = spec.borderline_band
        imaging_score = np.where((clinical_score >= lo) & (clinical_score <= hi), imaging_score, 0.0)

    # BMD-like raw imaging values: stratum-dependent location and spread
    race_shift = {lab: 0.03 * k for k, lab in enumerate(race_labels)}
    loc = 0.95 - 0.05 * band_idx + np.array([race_shift[r] for r in race])
    scale = 0.12 + 0.01 * band_idx
    Xi = loc[:, None] + scale[:, None] * Zi

    score = clinical_score + imaging_score
    u = rng.random(n)
    target = _round_half_up(n * spec.prevalence)
    offset = _solve_offset(score, u, target)
    prob = expit(score + offset)
    y = (u < prob).astype(np.int8)
    if abs(y.mean() - spec.prevalence) > 0.1 * spec.prevalence:
        raise ValueError(f"empirical prevalence {y.mean():.4f} misses target {spec.prevalence}")

    cohort = Cohort(
        schema=schema,
        ids=np.array([f"s{i:06d}" for i in range(n)]),
        X=np.hstack([Xc, Xi]),
        y=y,
        strata={"sex": sex, "age_band": age_band, "race": race},
    )
    return (cohort, prob) if return_truth else cohort


def male_mimic(seed: int = 0, n: int = 3764) -> SyntheticSpec:
    """Prevalence 3.7 %, the older-male cohort's hip-fracture rate."""
    return SyntheticSpec(
        n=n, prevalence=0.037, seed=seed, sex="male",
        clinical_effects={"age": 0.5, "grip": -0.3, "walk_pace": -0.3, "prior_fracture": 0.4,
                          "height": 0.1, "weight": -0.3, "smoking": 0.2},
        imaging_effects={"bmd_neck": -0.8, "bmd_hip": -0.5, "bmd_spine": -0.2},
        binary_features=("prior_fracture", "smoking"),
    )


def female_mimic(seed: int = 0, n: int = 3239) -> SyntheticSpec:
    """Prevalence 15.2 % (491 of 3239), the older-female cohort's rate."""
    return SyntheticSpec(
        n=n, prevalence=491 / 3239, seed=seed, sex="female",
        clinical_effects={"age": 0.4, "grip": -0.2, "walk_pace": -0.3, "prior_fracture": 0.3,
                          "height": 0.1, "weight": -0.3, "smoking": 0.1},
        imaging_effects={"bmd_neck": -0.7, "bmd_hip": -0.5, "bmd_spine": -0.2},
        binary_features=("prior_fracture", "smoking"),
    )


def borderline_family(seed: int = 0, n: int = 5000, prevalence: float = 0.10) -> SyntheticSpec:
    """Imaging carries signal only for clinical scores in [-0.5, 1.5].

    That band straddles the stage-1 decision boundary, so the cases stage 1
    is unsure about are exactly those imaging can resolve.
    """
    return SyntheticSpec(
        n=n, prevalence=prevalence, seed=seed,
        clinical_effects={"c0": 0.6, "c1": 0.5, "c2": -0.4, "c3": 0.3, "c4": 0.3, "c5": -0.2, "c6": 0.2},
        imaging_effects={"i0": -1.5, "i1": -1.0, "i2": 0.5},
        borderline_band=(-0.5, 1.5),
    )
