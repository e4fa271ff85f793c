"""Least-squares prediction of the pooled species ratio from a single camera.

Surveys that pair one camera with the echosounder need a robust deflation
factor for the acoustic count.  The pooled ratio from the calibration
experiment is regressed on log(MaxN + 1) and the camera-specific ratio; the
fitted model then predicts a pooled ratio for new survey observations, with a
new-observation prediction standard error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .dataset import CAMERAS, RATIO_SHIFT, TripRecord

#: Predicted ratios outside this range are flagged as extrapolation, not clipped.
RATIO_RANGE = (RATIO_SHIFT, 1.0 + RATIO_SHIFT)


class RatioRegressionError(ValueError):
    pass


@dataclass(frozen=True)
class RatioRegressionModel:
    """OLS fit of pooled ratio on (1, log(MaxN+1), camera ratio) for one camera."""

    camera: str
    intercept: float
    coef_logmaxn: float
    coef_camratio: float
    covariance: np.ndarray  # 3x3, s^2 (X'X)^-1
    residual_variance: float
    r2: float
    n: int


@dataclass(frozen=True)
class RatioPrediction:
    r_hat: float
    pred_se: float
    flags: tuple[str, ...]


def fit_ratio_regression(
    trips: Sequence[TripRecord],
    camera_ratios: Mapping[str, Mapping[str, float | None]],
    camera: str,
) -> RatioRegressionModel:
    """Fit the pooled-ratio predictor over trips where the camera has data."""
    if camera not in CAMERAS:
        raise RatioRegressionError(f"unknown camera {camera!r}")
    xs: list[tuple[float, float]] = []
    ys: list[float] = []
    for t in trips:
        maxn = t.maxn[camera]
        ratio = camera_ratios.get(t.trip_id, {}).get(camera)
        if maxn is None or ratio is None or t.pooled_ratio is None:
            continue
        xs.append((math.log(maxn + 1.0), float(ratio)))
        ys.append(float(t.pooled_ratio))
    n = len(ys)
    if n < 4:
        raise RatioRegressionError(
            f"camera {camera}: needs >=4 trips with MaxN and ratio, got {n}"
        )
    X = np.column_stack([np.ones(n), np.array(xs)])
    y = np.array(ys)

    for col, name in ((1, "log_maxn"), (2, "camera_ratio")):
        if np.ptp(X[:, col]) == 0.0:
            raise RatioRegressionError(
                f"camera {camera}: design is rank-deficient, column {name!r} is constant"
            )
    xtx = X.T @ X
    if np.linalg.matrix_rank(xtx) < 3:
        raise RatioRegressionError(
            f"camera {camera}: design is rank-deficient, "
            "log_maxn and camera_ratio are collinear"
        )
    xtx_inv = np.linalg.inv(xtx)
    beta = xtx_inv @ (X.T @ y)
    resid = y - X @ beta
    s2 = float(resid @ resid) / (n - 3)
    sstot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / sstot if sstot > 0.0 else 1.0
    return RatioRegressionModel(
        camera=camera,
        intercept=float(beta[0]),
        coef_logmaxn=float(beta[1]),
        coef_camratio=float(beta[2]),
        covariance=s2 * xtx_inv,
        residual_variance=s2,
        r2=max(0.0, min(1.0, r2)),
        n=n,
    )


def predict_pooled_ratio(
    model: RatioRegressionModel, maxn: int, camratio: float
) -> RatioPrediction:
    """Predict the pooled ratio for a new (MaxN, camera ratio) observation.

    The SE is for a new observation: residual variance plus the coefficient
    uncertainty propagated through the design point.
    """
    if maxn < 0:
        raise RatioRegressionError("maxn must be nonnegative")
    if not (0.0 <= camratio <= 1.0 + RATIO_SHIFT):
        raise RatioRegressionError(f"camera ratio {camratio} outside [0, 1+{RATIO_SHIFT}]")
    x0 = np.array([1.0, math.log(maxn + 1.0), camratio])
    coef = np.array([model.intercept, model.coef_logmaxn, model.coef_camratio])
    r_hat = float(x0 @ coef)
    # s^2 (1 + x0' (X'X)^-1 x0) == s^2 + x0' Cov x0 since Cov = s^2 (X'X)^-1.
    var = model.residual_variance + float(x0 @ model.covariance @ x0)
    flags: list[str] = []
    if not (RATIO_RANGE[0] <= r_hat <= RATIO_RANGE[1]):
        flags.append("out_of_range")
    return RatioPrediction(r_hat=r_hat, pred_se=math.sqrt(max(var, 0.0)), flags=tuple(flags))


def fit_all_ratio_regressions(
    trips: Sequence[TripRecord],
    camera_ratios: Mapping[str, Mapping[str, float | None]],
) -> tuple[dict[str, RatioRegressionModel], dict[str, str]]:
    """Fit every camera's predictor, collecting reasons for cameras that cannot fit."""
    models: dict[str, RatioRegressionModel] = {}
    failures: dict[str, str] = {}
    for cam in CAMERAS:
        try:
            models[cam] = fit_ratio_regression(trips, camera_ratios, cam)
        except RatioRegressionError as exc:
            failures[cam] = str(exc)
    return models, failures


def model_from_json(camera: str, entry: Mapping) -> RatioRegressionModel:
    """Rebuild a fitted model from its pack JSON entry."""
    coef = entry["coefficients"]
    return RatioRegressionModel(
        camera=camera,
        intercept=float(coef["intercept"]),
        coef_logmaxn=float(coef["log_maxn"]),
        coef_camratio=float(coef["camera_ratio"]),
        covariance=np.array(entry["covariance"], dtype=float),
        residual_variance=float(entry["residual_variance"]),
        r2=float(entry["r2"]),
        n=int(entry["n"]),
    )
