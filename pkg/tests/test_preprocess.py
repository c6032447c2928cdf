import itertools

import numpy as np
import pytest

from tests.conftest import make_cohort
from twostage.cohort import generate_synthetic, male_mimic
from twostage.persist import load_pipeline, save_pipeline
from twostage.preprocess import (CorrelationFilter, EmptyCohortError, HighMissingFilter,
                                 NearZeroVarianceFilter, PreprocessPipeline, SpatialSignTransformer,
                                 correlation_filter, drop_high_missing, drop_incomplete_rows,
                                 fit_apply_spatial_sign, fit_pipeline, fit_t_value_stats, nzv_filter,
                                 nzv_mask, spatial_sign, t_value_transform)


def with_missing(k, n=100):
    col = np.arange(n, dtype=float)
    col[:k] = np.nan
    return col


def test_missing_fraction_boundary_is_strict():
    X = np.column_stack([with_missing(21), with_missing(20), np.arange(100.0)])
    c = make_cohort(X, [0, 1] * 50, names=["m21", "m20", "full"])
    out, dropped = drop_high_missing(c, 0.20)
    assert dropped == ["m21"]
    assert out.feature_names == ["m20", "full"]
    assert list(HighMissingFilter(0.20).fit(X).get_support()) == [False, True, True]


def test_incomplete_rows_are_dropped_and_counted():
    X = np.array([[1.0, 2.0], [np.nan, 1.0], [3.0, 4.0], [5.0, np.nan]])
    out, n = drop_incomplete_rows(make_cohort(X, [0, 1, 0, 1]))
    assert n == 2
    assert out.X.tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_every_row_missing_is_an_error():
    X = np.array([[np.nan, 1.0], [2.0, np.nan]])
    with pytest.raises(EmptyCohortError):
        drop_incomplete_rows(make_cohort(X, [0, 1]))


def test_nzv_examples(rng):
    rare = np.r_[np.zeros(999), 1.0]
    const = np.ones(1000)
    balanced = np.r_[np.zeros(500), np.ones(500)]
    cont = rng.normal(size=1000)
    X = np.column_stack([rare, const, balanced, cont])
    assert nzv_mask(X).tolist() == [True, True, False, False]
    out, dropped = nzv_filter(make_cohort(X, [0, 1] * 500, names=["rare", "const", "bal", "cont"]))
    assert dropped == ["rare", "const"]
    assert NearZeroVarianceFilter().fit(X).get_support().tolist() == [False, False, True, True]


def test_duplicate_pair_drops_exactly_one(rng):
    a = rng.normal(size=300)
    X = np.column_stack([a, a.copy(), rng.normal(size=300)])
    out, dropped = correlation_filter(make_cohort(X, [0, 1] * 150, names=["a", "b", "z"]))
    assert len(dropped) == 1
    assert dropped[0] in ("a", "b")
    assert "z" in out.feature_names


def test_moderate_correlation_keeps_both(rng):
    a = rng.normal(size=5000)
    b = 0.5 * a + np.sqrt(0.75) * rng.normal(size=5000)
    _, dropped = correlation_filter(make_cohort(np.column_stack([a, b]), [0, 1] * 2500))
    assert dropped == []


def test_no_surviving_pair_exceeds_cutoff(rng):
    for _ in range(20):
        latent = rng.normal(size=(200, 3))
        mix = rng.normal(size=(3, 8))
        X = latent @ mix + 0.3 * rng.normal(size=(200, 8))
        out, dropped = correlation_filter(make_cohort(X, [0, 1] * 100), 0.83)
        R = np.abs(np.corrcoef(out.X, rowvar=False))
        for i, j in itertools.combinations(range(out.X.shape[1]), 2):
            assert R[i, j] <= 0.83
    assert CorrelationFilter(0.83).fit(X).get_support().sum() == out.X.shape[1]


def test_spatial_sign_examples():
    out = spatial_sign(np.array([[3.0, 4.0], [0.0, 0.0]]), np.zeros(2), np.ones(2))
    np.testing.assert_allclose(out[0], [0.6, 0.8], atol=1e-15)
    assert out[1].tolist() == [0.0, 0.0]


def test_spatial_sign_unit_norms_and_replay(rng):
    X = rng.normal(loc=3.0, scale=[1.0, 5.0, 0.1], size=(500, 3))
    c = make_cohort(X, [0, 1] * 250)
    out, stats = fit_apply_spatial_sign(c)
    norms = np.linalg.norm(out.X, axis=1)
    assert np.all(np.abs(norms[norms > 0] - 1.0) <= 1e-12)
    again = stats.apply(c)
    assert again.X.tobytes() == out.X.tobytes()
    est = SpatialSignTransformer().fit(X)
    np.testing.assert_allclose(est.transform(X), out.X, rtol=0, atol=1e-12)


def test_spatial_sign_zero_sd_is_error():
    with pytest.raises(ValueError):
        fit_apply_spatial_sign(make_cohort(np.column_stack([np.ones(4), np.arange(4.0)]), [0, 1, 0, 1]))


def tv_cohort(values, y, strata):
    return make_cohort(np.asarray(values, float)[:, None], y, names=["bmd"],
                       strata={"sex": [s[0] for s in strata], "age_band": [s[1] for s in strata],
                               "race": [s[2] for s in strata]})


def test_t_value_example():
    s = ("M", "65-75", "white")
    c = tv_cohort([0.8, 1.0, 1.2, 0.9], [0, 0, 0, 1], [s] * 4)
    out = t_value_transform(c, c, ["bmd"])
    assert out.X[3, 0] == pytest.approx(-0.5, abs=1e-12)


def test_t_value_one_control_stratum_raises():
    a, b = ("M", "65-75", "white"), ("M", "76-96", "white")
    c = tv_cohort([0.8, 1.0, 1.2, 0.9, 0.7], [0, 0, 0, 0, 1], [a, a, a, b, b])
    with pytest.raises(ValueError, match="76-96"):
        t_value_transform(c, c, ["bmd"])


def test_t_value_reference_invariant():
    c = generate_synthetic(male_mimic(seed=2, n=2000))
    feats = c.schema.imaging
    out = t_value_transform(c, c, feats)
    keys = out.stratum_keys()
    for stratum in set(keys):
        rows = np.array([k == stratum for k in keys]) & (out.y == 0)
        for f in feats:
            v = out.column(f)[rows]
            assert abs(v.mean()) <= 1e-10
            assert abs(v.std(ddof=1) - 1.0) <= 1e-10


def test_t_value_stats_use_controls_only():
    s = ("F", "65-75", "white")
    c = tv_cohort([1.0, 2.0, 3.0, 100.0], [0, 0, 0, 1], [s] * 4)
    mean, sd, n = fit_t_value_stats(c, ["bmd"]).lookup(s, "bmd")
    assert (mean, sd, n) == (2.0, 1.0, 3)


def test_step_order_changes_output(rng):
    # filtering rows before versus after the column filter gives different cohorts
    X = rng.normal(size=(50, 2))
    X[:15, 0] = np.nan
    X[20, 1] = np.nan
    c = make_cohort(X, [0, 1] * 25)
    cols_first, _ = drop_high_missing(c, 0.20)
    cols_first, _ = drop_incomplete_rows(cols_first)
    rows_first, _ = drop_incomplete_rows(c)
    rows_first, _ = drop_high_missing(rows_first, 0.20)
    assert cols_first.X.shape != rows_first.X.shape


def test_pipeline_fit_replay_and_round_trip(tmp_path):
    c = generate_synthetic(male_mimic(seed=5, n=1500))
    X = np.array(c.X)
    X[::40, 0] = np.nan
    c = c.with_values(X)
    out, pipe = fit_pipeline(c, t_value_features=c.schema.imaging)
    assert pipe.row_drop_count == int(np.isnan(X).any(axis=1).sum())
    replay, n_rows = pipe.apply(c)
    assert replay.X.tobytes() == out.X.tobytes()
    save_pipeline(pipe, tmp_path / "p.json")
    back = load_pipeline(tmp_path / "p.json")
    assert back.to_dict() == pipe.to_dict()
    assert back.apply(c)[0].X.tobytes() == out.X.tobytes()
    with pytest.raises(ValueError):
        PreprocessPipeline.from_dict({**pipe.to_dict(), "version": 99})


def test_t_value_standardizer_frame():
    pd = pytest.importorskip("pandas")
    df = pd.DataFrame({"bmd": [0.8, 1.0, 1.2, 0.9], "sex": "M", "age_band": "a", "race": "w"})
    from twostage.preprocess import TValueStandardizer

    out = TValueStandardizer(features=["bmd"]).fit(df, [0, 0, 0, 1]).transform(df)
    assert out["bmd"].iloc[3] == pytest.approx(-0.5)
    assert list(out["sex"]) == ["M"] * 4
