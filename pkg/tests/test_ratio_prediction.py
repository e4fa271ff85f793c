from __future__ import annotations

import math

import numpy as np
import pytest

from gearcalib.dataset import TripRecord
from gearcalib.ratio_prediction import (
    RatioRegressionError,
    RatioRegressionModel,
    fit_ratio_regression,
    model_from_json,
    predict_pooled_ratio,
)


def make_trips_and_ratios(n=20, seed=0, coef=(0.2, 0.0, 0.8), noise=0.0, camera="T"):
    rng = np.random.default_rng(seed)
    trips = []
    ratios = {}
    ks = {}
    for s in range(n):
        maxn = int(rng.integers(0, 15))
        camratio = float(rng.uniform(0.05, 0.95))
        r = coef[0] + coef[1] * math.log(maxn + 1) + coef[2] * camratio
        r += float(rng.normal(0, noise))
        r = min(max(r, 1e-6), 1.0)
        boat, reef = 1 + s % 2, 1 + s % 2
        ks[(boat, reef)] = ks.get((boat, reef), 0) + 1
        trips.append(
            TripRecord(f"s{s}", boat, reef, ks[(boat, reef)],
                       {"D": None, "S": 1, "T": maxn, "R": None}, 10, 10, None, r, "")
        )
        ratios[f"s{s}"] = {camera: camratio}
    return trips, ratios


def test_exact_linear_recovery():
    trips, ratios = make_trips_and_ratios()
    model = fit_ratio_regression(trips, ratios, "T")
    assert model.intercept == pytest.approx(0.2, abs=1e-9)
    assert model.coef_logmaxn == pytest.approx(0.0, abs=1e-9)
    assert model.coef_camratio == pytest.approx(0.8, abs=1e-9)
    assert model.r2 == pytest.approx(1.0, abs=1e-9)
    assert model.residual_variance == pytest.approx(0.0, abs=1e-12)


def test_matches_normal_equations_oracle():
    trips, ratios = make_trips_and_ratios(seed=1, coef=(0.3, 0.05, 0.4), noise=0.05)
    model = fit_ratio_regression(trips, ratios, "T")
    X = np.column_stack(
        [
            np.ones(len(trips)),
            [math.log(t.maxn["T"] + 1) for t in trips],
            [ratios[t.trip_id]["T"] for t in trips],
        ]
    )
    y = np.array([t.pooled_ratio for t in trips])
    beta = np.linalg.solve(X.T @ X, X.T @ y)
    assert model.intercept == pytest.approx(beta[0], abs=1e-10)
    assert model.coef_logmaxn == pytest.approx(beta[1], abs=1e-10)
    assert model.coef_camratio == pytest.approx(beta[2], abs=1e-10)
    resid = y - X @ beta
    s2 = float(resid @ resid) / (len(trips) - 3)
    cov = s2 * np.linalg.inv(X.T @ X)
    assert np.allclose(model.covariance, cov, atol=1e-10)


def test_constant_camratio_named_in_error():
    trips, ratios = make_trips_and_ratios(seed=2)
    for tid in ratios:
        ratios[tid]["T"] = 0.5
    with pytest.raises(RatioRegressionError, match="camera_ratio"):
        fit_ratio_regression(trips, ratios, "T")


def test_needs_four_points():
    trips, ratios = make_trips_and_ratios(n=3)
    with pytest.raises(RatioRegressionError, match=">=4"):
        fit_ratio_regression(trips, ratios, "T")


def test_zero_variance_model_zero_pred_se():
    model = RatioRegressionModel(
        camera="T", intercept=0.2, coef_logmaxn=0.1, coef_camratio=0.5,
        covariance=np.zeros((3, 3)), residual_variance=0.0, r2=1.0, n=10,
    )
    pred = predict_pooled_ratio(model, 4, 0.3)
    assert pred.pred_se == 0.0
    assert pred.r_hat == pytest.approx(0.2 + 0.1 * math.log(5) + 0.5 * 0.3)


def test_pred_se_at_design_mean_is_textbook_value():
    trips, ratios = make_trips_and_ratios(seed=3, coef=(0.3, 0.05, 0.4), noise=0.08)
    model = fit_ratio_regression(trips, ratios, "T")
    n = len(trips)
    x1 = np.mean([math.log(t.maxn["T"] + 1) for t in trips])
    x2 = np.mean([ratios[t.trip_id]["T"] for t in trips])
    # leverage at the design centroid is exactly 1/n
    x0 = np.array([1.0, x1, x2])
    var = model.residual_variance + float(x0 @ model.covariance @ x0)
    assert var == pytest.approx(model.residual_variance * (1.0 + 1.0 / n), rel=1e-9)


def test_maxn_zero_design_point():
    model = RatioRegressionModel(
        camera="T", intercept=0.1, coef_logmaxn=5.0, coef_camratio=0.2,
        covariance=np.zeros((3, 3)), residual_variance=0.0, r2=1.0, n=8,
    )
    pred = predict_pooled_ratio(model, 0, 0.4)
    assert pred.r_hat == pytest.approx(0.1 + 0.2 * 0.4)  # log(0+1) kills the middle term


def test_monotone_in_camratio_and_flags():
    trips, ratios = make_trips_and_ratios(seed=4, coef=(0.1, 0.02, 0.7), noise=0.02)
    model = fit_ratio_regression(trips, ratios, "T")
    assert model.coef_camratio > 0
    prev = -np.inf
    for cr in (0.0, 0.25, 0.5, 0.75, 1.0):
        pred = predict_pooled_ratio(model, 5, cr)
        assert pred.r_hat > prev
        prev = pred.r_hat
    low = predict_pooled_ratio(model, 0, 0.0)
    if not (1e-6 <= low.r_hat <= 1 + 1e-6):
        assert "out_of_range" in low.flags


def test_pred_se_dominates_residual_sd():
    rng = np.random.default_rng(5)
    trips, ratios = make_trips_and_ratios(seed=5, coef=(0.2, 0.03, 0.5), noise=0.06)
    model = fit_ratio_regression(trips, ratios, "T")
    s = math.sqrt(model.residual_variance)
    for _ in range(50):
        pred = predict_pooled_ratio(model, int(rng.integers(0, 30)), float(rng.uniform(0, 1)))
        assert pred.pred_se >= s


def test_residuals_orthogonal_to_design():
    trips, ratios = make_trips_and_ratios(seed=6, coef=(0.25, 0.04, 0.45), noise=0.05)
    model = fit_ratio_regression(trips, ratios, "T")
    X = np.column_stack(
        [
            np.ones(len(trips)),
            [math.log(t.maxn["T"] + 1) for t in trips],
            [ratios[t.trip_id]["T"] for t in trips],
        ]
    )
    y = np.array([t.pooled_ratio for t in trips])
    beta = np.array([model.intercept, model.coef_logmaxn, model.coef_camratio])
    resid = y - X @ beta
    assert np.abs(X.T @ resid).max() < 1e-8


def test_camratio_domain_check():
    model = RatioRegressionModel(
        camera="T", intercept=0.2, coef_logmaxn=0.1, coef_camratio=0.5,
        covariance=np.zeros((3, 3)), residual_variance=0.0, r2=1.0, n=10,
    )
    with pytest.raises(RatioRegressionError):
        predict_pooled_ratio(model, 3, 2.0)
    with pytest.raises(RatioRegressionError):
        predict_pooled_ratio(model, -1, 0.5)


def test_json_round_trip():
    trips, ratios = make_trips_and_ratios(seed=7, coef=(0.3, 0.05, 0.4), noise=0.04)
    model = fit_ratio_regression(trips, ratios, "T")
    entry = {
        "coefficients": {
            "intercept": model.intercept,
            "log_maxn": model.coef_logmaxn,
            "camera_ratio": model.coef_camratio,
        },
        "covariance": model.covariance.tolist(),
        "residual_variance": model.residual_variance,
        "r2": model.r2,
        "n": model.n,
    }
    again = model_from_json("T", entry)
    p1 = predict_pooled_ratio(model, 6, 0.4)
    p2 = predict_pooled_ratio(again, 6, 0.4)
    assert p1.r_hat == p2.r_hat
    assert p1.pred_se == p2.pred_se
