"""Shared validation and random-stream helpers."""

from __future__ import annotations

import numbers
import statistics

import numpy as np

FORMAT_VERSION = 1


class DegenerateCohortError(ValueError):
    """Raised when a resample or split cannot contain both outcome classes."""


class SchemaMismatchError(ValueError):
    """Raised when a required feature is absent from a cohort or input table."""


class NeedsImagingError(ValueError):
    """Raised when a case is routed to stage 2 but lacks an imaging feature."""

    def __init__(self, missing, sample_id=None):
        self.missing = list(missing)
        self.sample_id = sample_id
        who = f"sample {sample_id!r}" if sample_id is not None else "sample"
        super().__init__(f"{who} routed to stage 2 but lacks imaging features: {self.missing}")


def as_generator(rng) -> np.random.Generator:
    """Coerce an int seed, SeedSequence, Generator or None into a Generator."""
    if isinstance(rng, np.random.Generator):
        return rng
    if rng is None or isinstance(rng, (numbers.Integral, np.random.SeedSequence)):
        return np.random.default_rng(rng)
    raise TypeError(f"cannot build a random generator from {type(rng).__name__}")


def spawn(rng, n: int) -> list[np.random.Generator]:
    """Independent child streams; identical whether consumed sequentially or in parallel."""
    return as_generator(rng).spawn(n)


def check_binary_labels(y, *, name: str = "labels") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if y.size and not np.isin(y, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")
    return y.astype(np.int8, copy=False)


def check_both_classes(y, *, what: str = "labels") -> np.ndarray:
    y = check_binary_labels(y, name=what)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == y.size:
        raise ValueError(f"{what} must contain both classes (got {n_pos} positives of {y.size})")
    return y


def sample_sd(values) -> float:
    """Sample standard deviation (n - 1); 0 for a single value.

    Uses exact rational accumulation, so the result does not depend on
    summation order.
    """
    values = [float(v) for v in values]
    if len(values) < 2:
        return 0.0
    return statistics.stdev(values)
