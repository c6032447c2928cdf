"""JSON documents for models, pipelines and reports.

Floats are written with ``repr`` precision, so reloading reproduces the exact
values; NaN is stored as ``null``.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .cascade import CascadeModel
from .preprocess import PreprocessPipeline


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return None if math.isnan(v) else v
    return obj


def dumps(doc) -> str:
    return json.dumps(_clean(doc), indent=2, allow_nan=False) + "\n"


def write_text_atomic(path, text: str) -> None:
    """Write via a temporary file so a failed write never leaves a partial artifact."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_json(path, doc) -> None:
    write_text_atomic(path, dumps(doc))


def load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def save_model(model: CascadeModel, path) -> None:
    save_json(path, model.to_dict())


def load_model(path) -> CascadeModel:
    try:
        return CascadeModel.from_dict(load_json(path))
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt cascade model ({exc})") from exc


def save_pipeline(pipeline: PreprocessPipeline, path) -> None:
    save_json(path, pipeline.to_dict())


def load_pipeline(path) -> PreprocessPipeline:
    doc = load_json(path)
    # sd of a one-subject stratum is stored as null
    for row in doc.get("t_value_strata") or []:
        if row.get("sd") is None:
            row["sd"] = float("nan")
        if row.get("mean") is None:
            row["mean"] = float("nan")
    return PreprocessPipeline.from_dict(doc)
