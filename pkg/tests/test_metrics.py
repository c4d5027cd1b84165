import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import metrics_naive, sample_std
from dgadmil.metrics import make_report, regression_metrics, sigma_profile


def test_perfect_prediction():
    y = [50.0, 61.0, 72.5, 80.0]
    m = regression_metrics(y, y)
    assert m["mae"] == 0 and m["rmse"] == 0
    assert m["pcc"] == pytest.approx(1.0, abs=1e-12)
    assert m["slope"] == pytest.approx(1.0) and m["intercept"] == pytest.approx(0.0, abs=1e-9)


def test_two_subject_values():
    m = regression_metrics([62.0, 68.0], [60.0, 70.0])
    assert m["mae"] == 2.0 and m["rmse"] == 2.0
    assert m["pcc"] == pytest.approx(1.0)


def test_matches_naive_oracle(rng):
    for _ in range(50):
        n = int(rng.integers(3, 40))
        true = rng.uniform(40, 90, n)
        pred = true + rng.normal(0, 5, n)
        m = regression_metrics(pred, true)
        mae, rmse, pcc = metrics_naive(pred.tolist(), true.tolist())
        assert abs(m["mae"] - mae) < 1e-9 and abs(m["rmse"] - rmse) < 1e-9 and abs(m["pcc"] - pcc) < 1e-9


def test_constant_prediction_has_no_pcc():
    assert math.isnan(regression_metrics([60.0, 60.0, 60.0], [50.0, 60.0, 70.0])["pcc"])


def test_shape_mismatch():
    with pytest.raises(ValueError):
        regression_metrics([1.0, 2.0], [1.0])


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.tuples(st.floats(40, 90), st.floats(-20, 20)), min_size=3, max_size=30),
    st.floats(0.1, 10), st.floats(-50, 50),
)
def test_rmse_bounds_mae_and_pcc_affine_invariant(pairs, a, b):
    true = np.array([p[0] for p in pairs])
    pred = true + np.array([p[1] for p in pairs])
    m = regression_metrics(pred, true)
    assert m["rmse"] >= m["mae"] - 1e-12
    if np.ptp(pred) > 1e-6 and np.ptp(true) > 1e-6:
        m2 = regression_metrics(a * pred + b, true)
        assert m2["pcc"] == pytest.approx(m["pcc"], abs=1e-9)


def test_sigma_two_subjects():
    rows = sigma_profile([61.0, 62.0], [1.0, 3.0], bin_width=5, origin=60)
    assert len(rows) == 1 and rows[0]["n"] == 2
    assert rows[0]["sigma_pred"] == pytest.approx(math.sqrt(2))


def test_sigma_identical_predictions():
    rows = sigma_profile([60.0, 61.0, 62.0], [55.0, 55.0, 55.0], bin_width=5, origin=60)
    assert rows[0]["sigma_pred"] == 0.0
    assert rows[0]["sigma_err"] == pytest.approx(1.0)


def test_sigma_single_subject_is_undefined():
    rows = sigma_profile([60.0, 70.0, 71.0], [60.0, 69.0, 73.0], bin_width=5, origin=60)
    assert rows[0]["n"] == 1 and rows[0]["sigma_pred"] is None
    assert rows[1]["sigma_pred"] == pytest.approx(sample_std([69.0, 73.0]))


def test_sigma_bins_partition(rng):
    true = rng.uniform(44, 82, 200)
    pred = true + rng.normal(0, 3, 200)
    rows = sigma_profile(true, pred, bin_width=5)
    assert sum(r["n"] for r in rows) == 200
    for r in rows:
        sel = (true >= r["bin_lo"]) & (true < r["bin_hi"])
        assert sel.sum() == r["n"]
        if r["n"] >= 2:
            assert r["sigma_err"] == pytest.approx(sample_std((pred[sel] - true[sel]).tolist()), abs=1e-9)


def test_report_rows():
    rep = make_report([62.0, 68.0], [60.0, 70.0], subject_ids=[7, 9])
    assert [r["subject"] for r in rep.subject_rows()] == [7, 9]
    assert rep.errors.tolist() == [2.0, -2.0]
