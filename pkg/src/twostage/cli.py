"""Command-line entry point: ``twostage {synth,prep,run,train,score}``."""

from __future__ import annotations

import argparse
import csv
import io
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from ._utils import SchemaMismatchError
from .cascade import (NEEDS_IMAGING, ProtocolResult, decide, protocol_external, protocol_single_ensemble,
                      protocol_two_stage, train_cascade)
from .cohort import (STRATA, Cohort, SyntheticSpec, borderline_family, female_mimic, generate_synthetic,
                     load_cohort, male_mimic, read_feature_table, write_cohort)
from .config import RunConfig, load_config
from .featsel import rfe_rank, select_top_k
from .persist import load_model, save_json, save_model, save_pipeline, write_text_atomic
from .preprocess import fit_pipeline

METRICS = ("auc", "accuracy", "sensitivity", "specificity")
HEADINGS = {"auc": "AUC", "accuracy": "Accuracy", "sensitivity": "Sensitivity", "specificity": "Specificity"}
PRESETS = {"borderline": borderline_family, "male": male_mimic, "female": female_mimic}


class CliError(Exception):
    pass


# --- loading ------------------------------------------------------------------

def _header(path) -> list[str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return next(csv.reader(fh), [])


def load_input(config: RunConfig, path) -> Cohort:
    """Load ``path`` with the configured schema, restricted to columns the file has."""
    if path is None:
        raise CliError("no input CSV configured (set 'input' or pass --input)")
    if not Path(path).exists():
        raise CliError(f"input file not found: {path}")
    header = _header(path)
    schema = config.feature_schema
    if not len(schema):
        raise CliError("config has no feature schema")
    present = [n for n in schema.names if n in header]
    return load_cohort(path, schema.subset(present), config.outcome_col,
                       id_col=config.id_col if config.id_col in header else None,
                       strata_cols=config.strata, age_bands=config.age_bands)


def select_features(config: RunConfig, cohort: Cohort, seed_seq, out_dir: Path | None):
    """Stage feature lists from the config, or by inline rank-averaged RFE."""
    excluded = set(config.exclude_features)
    clinical = [f for f in cohort.schema.clinical if f not in excluded]
    stage2_pool = [f for f in cohort.feature_names if f not in excluded]
    rfe1, rfe2 = seed_seq.spawn(2)
    chosen = []
    for label, given, pool, k, rng in (("stage1", config.stage1_features, clinical, config.k_stage1, rfe1),
                                       ("stage2", config.stage2_features, stage2_pool, config.k_stage2, rfe2)):
        if given:
            missing = [f for f in given if f not in cohort.schema]
            if missing:
                raise SchemaMismatchError(f"{label} features missing from input: {missing}")
            chosen.append([f for f in given if f not in excluded])
            continue
        if len(pool) < 2:
            chosen.append(pool)
            continue
        table = rfe_rank(cohort, pool, config.rfe_iterations, rng, n_jobs=config.n_jobs)
        if out_dir is not None:
            table.to_csv(out_dir / f"rank_{label}.csv")
        chosen.append(select_top_k(table, min(k, len(pool))))
    s1, s2 = chosen
    if not s1:
        raise CliError("no clinical features available for stage 1")
    if not any(cohort.schema[f].stage_tag == "imaging" for f in s2):
        raise CliError("stage 2 has no imaging feature; add one to stage2_features or raise k_stage2")
    return s1, s2


# --- tables -------------------------------------------------------------------

def _cell(summary, key):
    m, s = summary.get(key, (float("nan"), float("nan")))
    return f"{m:.3f} ({s:.3f})"


def format_table(name: str, result: ProtocolResult) -> str:
    s = result.summary
    out = io.StringIO()
    head = f"{'Model':<12}" + "".join(f"{HEADINGS[m]:>16}" for m in METRICS)
    if result.protocol == "single":
        print(f"[{name}]", file=out)
        print(head, file=out)
        print(f"{'Mean (SD)':<12}" + "".join(f"{_cell(s, m):>16}" for m in METRICS), file=out)
        return out.getvalue()

    prefix = "" if result.protocol == "two-stage" else "internal_"
    blocks = [("", "[external test]"), ("internal_", "[internal test]")] if prefix else [("", None)]
    for p, title in blocks:
        if title:
            print(title, file=out)
        print(head, file=out)
        for label, key in (("Ensemble 1", f"{p}ensemble1_"), ("Two-Stage", p), ("Ensemble 2", f"{p}ensemble2_")):
            print(f"{label:<12}" + "".join(f"{_cell(s, key + m):>16}" for m in METRICS), file=out)
        for stage in (1, 2):
            print(f"Accuracy for participants kept in stage {stage}: "
                  f"{s.get(f'{p}stage{stage}_accuracy', (float('nan'),))[0]:.3f}", file=out)
            print(f"Fraction of participants kept in stage {stage}: "
                  f"{s.get(f'{p}stage{stage}_fraction', (float('nan'),))[0]:.3f}", file=out)
    return out.getvalue()


# --- commands -----------------------------------------------------------------

def cmd_synth(preset: str, n: int | None, seed: int, output, config_out=None) -> Cohort:
    factory = PRESETS[preset]
    spec: SyntheticSpec = factory(seed=seed) if n is None else factory(seed=seed, n=n)
    cohort = generate_synthetic(spec)
    write_cohort(cohort, output)
    if config_out is not None:
        doc = RunConfig(schema=spec.schema.to_list(), strata={a: a for a in STRATA},
                        input=str(output), t_value_features=list(spec.imaging_effects)).to_dict()
        save_json(config_out, doc)
    print(f"wrote {cohort.n} rows ({cohort.positives} positive) to {output}")
    return cohort


def cmd_prep(config: RunConfig) -> tuple[Path, Path]:
    out_dir = Path(config.out_dir)
    cohort = load_input(config, config.input)
    n_in, p_in = cohort.n, len(cohort.schema)
    t_feats = [f for f in config.t_value_features if f in cohort.schema]
    prepared, pipeline = fit_pipeline(
        cohort, max_missing=config.missing_cutoff, freq_ratio_cut=config.nzv_freq_ratio,
        unique_frac_cut=config.nzv_unique_frac, corr_cutoff=config.corr_cutoff,
        spatial_sign_enabled=config.spatial_sign, t_value_features=t_feats)
    if prepared.n == 0:
        raise CliError("preprocessing left an empty cohort")
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = out_dir / "prepared.csv"
    pipe_path = out_dir / "pipeline.json"
    buf = out_dir / ".prepared.csv.tmp"
    write_cohort(prepared, buf, outcome_col=config.outcome_col, id_col=config.id_col or "id")
    buf.replace(data_path)
    save_pipeline(pipeline, pipe_path)
    print(f"rows: {n_in} -> {prepared.n} (missing outcome dropped: {cohort.dropped_missing_outcome}, "
          f"incomplete dropped: {pipeline.row_drop_count})")
    print(f"features: {p_in} -> {len(prepared.schema)}")
    for name, reason in pipeline.dropped_features:
        print(f"  dropped {name}: {reason}")
    return data_path, pipe_path


def cmd_run(config: RunConfig) -> Path:
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.protocol == "external" and not config.external:
        raise CliError("the external protocol needs an 'external' cohort CSV")
    cohort = load_input(config, config.input)
    seed_seq = np.random.SeedSequence(config.seed)
    select_seq, protocol_seq = seed_seq.spawn(2)
    s1, s2 = select_features(config, cohort, select_seq, out_dir)
    rng = np.random.default_rng(protocol_seq)

    if config.protocol == "single":
        r1, r2 = rng.spawn(2)
        results = {
            "ensemble1": protocol_single_ensemble(cohort, s1, config.runs, config.folds, r1, n_jobs=config.n_jobs),
            "ensemble2": protocol_single_ensemble(cohort, s2, config.runs, config.folds, r2, n_jobs=config.n_jobs),
        }
    elif config.protocol == "two-stage":
        results = {"two-stage": protocol_two_stage(cohort, s1, s2, config.runs, config.cascade, rng,
                                                   train_frac=config.train_frac)}
    else:
        external = load_input(config, config.external)
        results = {"external": protocol_external(cohort, external, s1, s2, config.runs, config.cascade, rng,
                                                 exclude=config.exclude_features, train_frac=config.train_frac)}

    report = {
        "format": "twostage-report",
        "version": 1,
        "config": config.to_dict(),
        "features": {"stage1": s1, "stage2": s2},
        "results": {k: v.to_dict() for k, v in results.items()},
        "provenance": {"package_version": __version__, "seed": config.seed,
                       "created": datetime.now(timezone.utc).isoformat()},
    }
    path = out_dir / f"report_{config.protocol}.json"
    save_json(path, report)
    for name, result in results.items():
        print(format_table(name, result))
    print(f"report written to {path}")
    return path


def cmd_train(config: RunConfig, model_path) -> Path:
    cohort = load_input(config, config.input)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    select_seq, model_seq = np.random.SeedSequence(config.seed).spawn(2)
    s1, s2 = select_features(config, cohort, select_seq, out_dir)
    model = train_cascade(cohort, s1, s2, config.cascade, np.random.default_rng(model_seq))
    path = Path(model_path) if model_path else out_dir / "model.json"
    save_model(model, path)
    print(f"stage 1: {len(s1)} features, threshold {model.stage1.threshold:.3f}")
    print(f"stage 2: {len(s2)} features, threshold {model.stage2.threshold:.3f}")
    print(f"model written to {path}")
    return path


def cmd_score(model_file, input_csv, output_csv, id_col: str | None = "id") -> Path:
    model = load_model(model_file)
    ids, columns = read_feature_table(input_csv, id_col)
    d = decide(model, columns, ids=ids, on_missing="flag")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "stage_used", "z", "probability", "predicted"])
    for i in range(len(d)):
        if d.stage_used[i] == 0:
            w.writerow([d.ids[i], NEEDS_IMAGING, f"{d.z[i]:.3f}", "", ""])
        else:
            w.writerow([d.ids[i], int(d.stage_used[i]), f"{d.z[i]:.3f}", f"{d.probability[i]:.3f}",
                        int(d.predicted[i])])
    write_text_atomic(output_csv, buf.getvalue())
    n_need = int(np.sum(d.stage_used == 0))
    print(f"scored {len(d)} cases: stage 1 {int(np.sum(d.stage_used == 1))}, "
          f"stage 2 {int(np.sum(d.stage_used == 2))}, needs imaging {n_need}")
    return Path(output_csv)


# --- argument parsing ---------------------------------------------------------

def _config_from(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    return config.with_overrides(seed=args.seed, runs=getattr(args, "runs", None),
                                 protocol=getattr(args, "protocol", None), out_dir=args.out_dir,
                                 input=args.input, external=getattr(args, "external", None))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twostage", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML/JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--input", help="cohort CSV (overrides config 'input')")

    p = sub.add_parser("synth", help="write a synthetic cohort CSV")
    p.add_argument("--preset", choices=sorted(PRESETS), default="borderline")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.add_argument("--config-out", help="also write a matching run configuration")

    p = sub.add_parser("prep", help="fit and apply preprocessing")
    common(p)

    p = sub.add_parser("run", help="run an evaluation protocol and write a report")
    common(p)
    p.add_argument("--runs", type=int)
    p.add_argument("--protocol", choices=("single", "two-stage", "external"))
    p.add_argument("--external", help="external cohort CSV")

    p = sub.add_parser("train", help="train a cascade on the whole input and save it")
    common(p)
    p.add_argument("--model", help="output model path (default OUT_DIR/model.json)")

    p = sub.add_parser("score", help="route and score cases with a saved cascade")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--id-col", default="id")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            cmd_synth(args.preset, args.n, args.seed, args.output, args.config_out)
        elif args.command == "prep":
            cmd_prep(_config_from(args))
        elif args.command == "run":
            cmd_run(_config_from(args))
        elif args.command == "train":
            cmd_train(_config_from(args), args.model)
        elif args.command == "score":
            cmd_score(args.model, args.input, args.output, args.id_col)
    except (CliError, ValueError, OSError) as exc:
        print(f"twostage {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
