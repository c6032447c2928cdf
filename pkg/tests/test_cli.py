import csv
import json
import math
import statistics

import numpy as np
import pytest

from twostage.cascade import decide
from twostage.cli import main
from twostage.cohort import generate_synthetic, borderline_family, write_cohort
from twostage.persist import load_model

FAST = {"folds": 3, "bags": 5, "rfe_iterations": 5, "k_stage1": 4, "k_stage2": 8, "runs": 2}


def synth(tmp_path, n=800, seed=0, name="cohort.csv", **overrides):
    data = tmp_path / name
    cfg = tmp_path / f"{name}.config.json"
    assert main(["synth", "--preset", "borderline", "--n", str(n), "--seed", str(seed),
                 "--output", str(data), "--config-out", str(cfg)]) == 0
    doc = json.loads(cfg.read_text())
    doc.update(FAST, out_dir=str(tmp_path / "out"), **overrides)
    cfg.write_text(json.dumps(doc))
    return data, cfg


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def columns(rows, model):
    names = dict.fromkeys(model.stage1.feature_names + model.stage2.feature_names)
    return {k: [float(r[k]) for r in rows] for k in names}


def test_prep_writes_outputs_and_is_deterministic(tmp_path):
    _, cfg = synth(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["prep", "--config", str(cfg), "--out-dir", str(out_a)]) == 0
    assert main(["prep", "--config", str(cfg), "--out-dir", str(out_b)]) == 0
    for name in ("prepared.csv", "pipeline.json"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    pipe = json.loads((out_a / "pipeline.json").read_text())
    assert pipe["spatial_sign_enabled"] is True
    assert len(read_csv(out_a / "prepared.csv")) == 800


def test_prep_with_every_row_incomplete_fails(tmp_path, capsys):
    names = [f"f{j}" for j in range(5)]
    rows = []
    for i in range(5):
        vals = [str(float(i + j)) for j in range(5)]
        vals[i] = "NA"
        rows.append(",".join([str(i), *vals, str(i % 2)]))
    data = tmp_path / "bad.csv"
    data.write_text("id," + ",".join(names) + ",outcome\n" + "\n".join(rows) + "\n")
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("schema: [f0, f1, f2, f3, f4]\nspatial_sign: false\n")
    code = main(["prep", "--config", str(cfg), "--input", str(data), "--out-dir", str(tmp_path / "o")])
    assert code != 0
    assert "missing" in capsys.readouterr().err
    assert not (tmp_path / "o" / "prepared.csv").exists()


def test_run_two_stage_report_and_summary_recomputation(tmp_path):
    _, cfg = synth(tmp_path, seed=2)
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg), "--runs", "5", "--out-dir", str(out)]) == 0
    report = json.loads((out / "report_two-stage.json").read_text())
    result = report["results"]["two-stage"]
    assert len(result["rows"]) == 5
    for key, cell in result["summary"].items():
        vals = [r[key] for r in result["rows"] if r[key] is not None and not math.isnan(r[key])]
        assert cell["mean"] == math.fsum(vals) / len(vals)
        assert cell["sd"] == (statistics.stdev(vals) if len(vals) > 1 else 0.0)
    assert (out / "rank_stage1.csv").exists()
    assert report["provenance"]["seed"] == report["config"]["seed"]


def test_run_single_protocol(tmp_path, capsys):
    _, cfg = synth(tmp_path, seed=3)
    assert main(["run", "--config", str(cfg), "--protocol", "single", "--out-dir", str(tmp_path / "s")]) == 0
    report = json.loads((tmp_path / "s" / "report_single.json").read_text())
    assert set(report["results"]) == {"ensemble1", "ensemble2"}
    assert "Mean (SD)" in capsys.readouterr().out


def test_external_schema_mismatch_exits_nonzero(tmp_path, capsys):
    _, cfg = synth(tmp_path, seed=4)
    ext = generate_synthetic(borderline_family(seed=9, n=300))
    ext = ext.select([f for f in ext.feature_names if f != "i0"])
    ext_path = tmp_path / "ext.csv"
    write_cohort(ext, ext_path)
    doc = json.loads(cfg.read_text())
    doc["stage2_features"] = ["c0", "c1", "c2", "i0", "i1"]
    cfg.write_text(json.dumps(doc))
    code = main(["run", "--config", str(cfg), "--protocol", "external", "--external", str(ext_path),
                 "--out-dir", str(tmp_path / "e")])
    assert code != 0
    assert "i0" in capsys.readouterr().err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("train")
    data, cfg = synth(tmp, seed=5)
    model_path = tmp / "model.json"
    assert main(["train", "--config", str(cfg), "--model", str(model_path)]) == 0
    return data, model_path


def test_score_flags_needs_imaging_and_keeps_certain_rows(trained, tmp_path):
    data, model_path = trained
    model = load_model(model_path)
    rows = read_csv(data)
    cols = columns(rows, model)
    d = decide(model, cols)
    certain = int(np.flatnonzero(d.stage_used == 1)[0])
    uncertain = int(np.flatnonzero(d.stage_used == 2)[0])
    picked = [rows[certain], rows[uncertain]]
    for r in picked:
        for f in ("i0", "i1", "i2"):
            r[f] = ""
    inp = tmp_path / "score_in.csv"
    with open(inp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(picked[0]))
        w.writeheader()
        w.writerows(picked)
    out = tmp_path / "scores.csv"
    assert main(["score", "--model", str(model_path), "--input", str(inp), "--output", str(out)]) == 0
    scored = read_csv(out)
    assert scored[0]["stage_used"] == "1"
    assert scored[0]["predicted"] in ("0", "1")
    assert scored[1]["stage_used"] == "needs-imaging"
    assert scored[1]["predicted"] == ""


def test_score_matches_reloaded_model(trained, tmp_path):
    data, model_path = trained
    out = tmp_path / "scores.csv"
    assert main(["score", "--model", str(model_path), "--input", str(data), "--output", str(out)]) == 0
    scored = read_csv(out)
    rows = read_csv(data)
    model = load_model(model_path)
    cols = columns(rows, model)
    d = decide(model, cols)
    assert [int(s["stage_used"]) for s in scored] == d.stage_used.tolist()
    assert [int(s["predicted"]) for s in scored] == d.predicted.tolist()
    assert [s["id"] for s in scored] == [r["id"] for r in rows]


def test_corrupt_model_exits_nonzero(trained, tmp_path, capsys):
    data, _ = trained
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "twostage-cascade", "version": 1, "stage1": {')
    code = main(["score", "--model", str(bad), "--input", str(data), "--output", str(tmp_path / "x.csv")])
    assert code != 0
    assert "corrupt" in capsys.readouterr().err
    assert not (tmp_path / "x.csv").exists()


def test_unknown_config_key_is_rejected(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 1\nbogus: 2\n")
    assert main(["prep", "--config", str(cfg)]) != 0


def test_report_config_echo_reproduces_rows(tmp_path):
    _, cfg = synth(tmp_path, seed=6)
    assert main(["run", "--config", str(cfg), "--out-dir", str(tmp_path / "first")]) == 0
    first = json.loads((tmp_path / "first" / "report_two-stage.json").read_text())
    echo = tmp_path / "echo.json"
    echo.write_text(json.dumps({**first["config"], "out_dir": str(tmp_path / "second")}))
    assert main(["run", "--config", str(echo)]) == 0
    second = json.loads((tmp_path / "second" / "report_two-stage.json").read_text())
    assert second["results"] == first["results"]
    assert second["features"] == first["features"]
