"""Acceptance criteria, one test each.

Every test appends a PASS/FAIL line to ``RESULTS`` (printed in the terminal
summary by conftest) before asserting, so a red criterion still reports
what it measured.
"""

import json
import math
import statistics
import time

import numpy as np

from tests.test_glm import gradient_check_max_rel_error, recovery_data
from tests.test_metrics import brute_youden, mann_whitney_auc, random_instance
from twostage.cascade import (CascadeConfig, CascadeModel, decide, evaluate_cascade, protocol_two_stage,
                              train_cascade)
from twostage.cli import main
from twostage.cohort import borderline_family, generate_synthetic, male_mimic, stratified_split
from twostage.glm import fit_logistic
from twostage.metrics import auc_trapezoid, cutoff_classify, roc_points, youden_best
from twostage.persist import dumps, load_model
from twostage.preprocess import fit_pipeline, t_value_transform

RESULTS = []


def record(number, title, ok, detail, elapsed=None):
    took = f" [{elapsed:.1f} s]" if elapsed is not None else ""
    RESULTS.append(f"{'PASS' if ok else 'FAIL'}  {number:>2}. {title}: {detail}{took}")
    return ok


def test_01_auc_oracle():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        s, y = random_instance(rng, n_max=50)
        worst = max(worst, abs(auc_trapezoid(roc_points(s, y)) - mann_whitney_auc(s, y)))
    took = time.perf_counter() - start
    ok = worst <= 1e-12 and took < 10
    assert record(1, "AUC vs Mann-Whitney on 1000 instances", ok, f"max |diff| {worst:.1e}", took)


def test_02_youden_oracle():
    rng = np.random.default_rng(102)
    start = time.perf_counter()
    mismatches = 0
    for _ in range(1000):
        s, y = random_instance(rng, n_max=50)
        t, j = youden_best(roc_points(s, y))
        bt, bj = brute_youden(s.tolist(), y.tolist())
        mismatches += (t != bt) or abs(j - bj) > 1e-15
    took = time.perf_counter() - start
    ok = mismatches == 0 and took < 10
    assert record(2, "Youden vs exhaustive scan on 1000 instances", ok, f"{mismatches} mismatches", took)


def test_03_glm_correctness():
    start = time.perf_counter()
    rel = gradient_check_max_rel_error(seed=103, instances=100)
    X, y, beta = recovery_data(seed=2024)
    err = np.abs(fit_logistic(X, y).coefficients - beta[1:])
    took = time.perf_counter() - start
    ok = rel <= 1e-6 and bool(np.all(err <= 0.15)) and took < 30
    assert record(3, "GLM gradient and coefficient recovery", ok,
                  f"max rel grad err {rel:.1e}, max slope err {err.max():.3f}", took)


def test_04_t_value_invariant():
    c = generate_synthetic(male_mimic(seed=104))
    feats = c.schema.imaging
    out = t_value_transform(c, c, feats)
    keys = out.stratum_keys()
    worst_mean = worst_sd = 0.0
    for stratum in set(keys):
        rows = np.array([k == stratum for k in keys]) & (out.y == 0)
        for f in feats:
            v = out.column(f)[rows]
            worst_mean = max(worst_mean, abs(v.mean()))
            worst_sd = max(worst_sd, abs(v.std(ddof=1) - 1.0))
    ok = worst_mean <= 1e-10 and worst_sd <= 1e-10
    assert record(4, "T-value reference invariant", ok,
                  f"{len(set(keys))} strata, max |mean| {worst_mean:.1e}, max |sd-1| {worst_sd:.1e}")


def test_05_spatial_sign_invariant():
    c = generate_synthetic(male_mimic(seed=105, n=2000))
    out, pipe = fit_pipeline(c, t_value_features=c.schema.imaging)
    Z = out.matrix(list(pipe.spatial.features))
    norms = np.linalg.norm(Z, axis=1)
    worst = float(np.abs(norms[norms > 0] - 1.0).max())
    replay, _ = pipe.apply(c)
    identical = replay.X.tobytes() == out.X.tobytes()
    ok = worst <= 1e-12 and identical
    assert record(5, "spatial sign unit norms and bit-identical replay", ok,
                  f"max |norm-1| {worst:.1e}, replay identical={identical}")


def test_06_cascade_partition_and_boundary():
    c = generate_synthetic(borderline_family(seed=106, n=2000))
    grid = np.linspace(0.0, 4.5, 10)
    partition_ok = zero_ok = monotone_ok = True
    evaluations = 0
    for seed in range(3):
        train, test = stratified_split(c, 0.8, seed=seed)
        model = train_cascade(train, c.schema.clinical, c.feature_names, CascadeConfig(), rng=seed)
        stage1_alone = (model.stage1.predict_proba(test.matrix(model.stage1.feature_names))
                        >= model.stage1.threshold).astype(int)
        fractions = []
        for cut in grid:
            m = CascadeModel(model.stage1, model.stage2, float(cut))
            d = decide(m, test)
            rep = evaluate_cascade(m, test)
            evaluations += 1
            n1, n2 = int(np.sum(d.stage_used == 1)), int(np.sum(d.stage_used == 2))
            partition_ok &= (n1 + n2 == test.n) and (rep.n_uncertain == n2)
            fractions.append(rep.stage2_fraction)
            if cut == 0.0:
                zero_ok &= d.predicted.tolist() == stage1_alone.tolist()
        monotone_ok &= all(b >= a for a, b in zip(fractions, fractions[1:]))
    ok = partition_ok and zero_ok and monotone_ok
    assert record(6, "cascade partition, zero cutoff, monotone routing", ok,
                  f"{evaluations} evaluations; partition={partition_ok} zero-cutoff={zero_ok} "
                  f"monotone={monotone_ok}")


def test_07_borderline_family_statistics():
    c = generate_synthetic(borderline_family(seed=107, n=5000, prevalence=0.10))
    start = time.perf_counter()
    res = protocol_two_stage(c, c.schema.clinical, c.feature_names, runs=100, config=CascadeConfig(), rng=107)
    took = time.perf_counter() - start
    s = res.summary
    sens2, sens1 = s["sensitivity"][0], s["ensemble1_sensitivity"][0]
    auc2, auc1 = s["auc"][0], s["ensemble1_auc"][0]
    frac = s["stage2_fraction"][0]
    ok = sens2 > sens1 and auc2 >= auc1 and 0.15 <= frac <= 0.65 and took < 300
    assert record(7, "borderline family, two-stage vs stage 1 alone (100 runs)", ok,
                  f"sens {sens2:.3f} vs {sens1:.3f}, AUC {auc2:.3f} vs {auc1:.3f}, "
                  f"stage-2 fraction {frac:.3f}", took)


def test_08_protocol_determinism():
    c = generate_synthetic(borderline_family(seed=108, n=2000))
    args = (c, c.schema.clinical, c.feature_names)
    first = protocol_two_stage(*args, runs=10, config=CascadeConfig(), rng=108)
    second = protocol_two_stage(*args, runs=10, config=CascadeConfig(), rng=108)
    parallel = protocol_two_stage(*args, runs=10, config=CascadeConfig(n_jobs=2), rng=108)
    a, b, p = (dumps(r.rows).encode() for r in (first, second, parallel))
    ok = a == b == p
    assert record(8, "protocol rows byte-identical (repeat and parallel)", ok,
                  f"repeat={a == b} parallel={a == p}, {len(a)} bytes")


def test_09_baseline_comparator_ordering():
    c = generate_synthetic(male_mimic(seed=109))
    t = t_value_transform(c, c, ["bmd_hip"]).column("bmd_hip")
    sens_strict = cutoff_classify(t, c.y, -2.5).sensitivity
    sens_loose = cutoff_classify(t, c.y, -1.0).sensitivity
    res = protocol_two_stage(c, c.schema.clinical, c.feature_names, runs=10, config=CascadeConfig(), rng=109)
    sens_two = res.summary["sensitivity"][0]
    ok = sens_strict < sens_loose < sens_two
    assert record(9, "baseline T-value cutoffs vs two-stage sensitivity", ok,
                  f"-2.5: {sens_strict:.3f}, -1.0: {sens_loose:.3f}, two-stage: {sens_two:.3f}")


def test_10_cli_round_trip(tmp_path):
    data, cfg = tmp_path / "cohort.csv", tmp_path / "cfg.json"
    assert main(["synth", "--preset", "borderline", "--n", "1500", "--seed", "110",
                 "--output", str(data), "--config-out", str(cfg)]) == 0
    doc = json.loads(cfg.read_text())
    doc.update(folds=5, bags=20, rfe_iterations=10, runs=5, out_dir=str(tmp_path / "out"))
    cfg.write_text(json.dumps(doc))
    assert main(["run", "--config", str(cfg)]) == 0
    report = json.loads((tmp_path / "out" / "report_two-stage.json").read_text())
    result = report["results"]["two-stage"]
    summary_ok = True
    for key, cell in result["summary"].items():
        vals = [r[key] for r in result["rows"] if r[key] is not None and not math.isnan(r[key])]
        sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
        summary_ok &= cell["mean"] == math.fsum(vals) / len(vals) and cell["sd"] == sd

    model_path = tmp_path / "model.json"
    assert main(["train", "--config", str(cfg), "--model", str(model_path)]) == 0
    cohort = generate_synthetic(borderline_family(seed=110, n=1500))
    first, again = load_model(model_path), load_model(model_path)
    d1, d2 = decide(first, cohort), decide(again, cohort)
    scored = tmp_path / "scores.csv"
    assert main(["score", "--model", str(model_path), "--input", str(data), "--output", str(scored)]) == 0
    lines = scored.read_text().splitlines()[1:]
    stages = [line.split(",")[1] for line in lines]
    decisions_ok = (d1.predicted.tolist() == d2.predicted.tolist()
                    and d1.probability.tobytes() == d2.probability.tobytes()
                    and stages == [str(s) for s in d1.stage_used.tolist()])
    ok = summary_ok and decisions_ok
    assert record(10, "CLI report summaries and model reload", ok,
                  f"summaries exact={summary_ok}, reloaded decisions identical={decisions_ok}")

