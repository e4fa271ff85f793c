"""Posterior post-processing: adequacy regressions, camera calibration formulae,
calibration errors, and the serializable pack consumed by the service and widget.

Per posterior draw, the latent abundance vector is regressed on a predictor
(ratio-adjusted acoustic count, mark-recapture estimate, or one camera's MaxN)
by least squares with the slope clamped at zero from below.  Medians across
draws of the per-draw intercepts and slopes define the operational conversion
line for each camera.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import CAMERAS, TripRecord
from .inference import PosteriorDraws
from .ratio_prediction import RatioRegressionModel

#: Central 80% interval endpoints (linear-interpolation quantiles).
ERROR_INTERVAL_Q = (0.10, 0.90)

PAIRED_CAVEAT = (
    "A predicted pooled ratio times an acoustic count is an adjusted count; "
    "whether it can stand as a final abundance estimate without further "
    "modeling is unresolved."
)


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class LineFit:
    """Least-squares line with the slope constrained to be nonnegative."""

    intercept: float
    slope: float
    residual_sd: float
    r2: float
    n_points: int
    clamped: bool


def constrained_ls(x: Sequence[float], y: Sequence[float]) -> LineFit:
    """OLS of y on x; a negative slope clamps to 0 with intercept mean(y)."""
    xa = np.asarray(x, dtype=float)
    ya = np.asarray(y, dtype=float)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise CalibrationError("x and y must be equal-length vectors")
    n = len(xa)
    if n < 2:
        raise CalibrationError("need at least 2 points")
    xc = xa - xa.mean()
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise CalibrationError("constant predictor")
    slope = float(xc @ ya) / sxx
    clamped = slope < 0.0
    if clamped:
        slope = 0.0
        intercept = float(ya.mean())
    else:
        intercept = float(ya.mean()) - slope * float(xa.mean())
    resid = ya - (intercept + slope * xa)
    ssres = float(resid @ resid)
    sstot = float(((ya - ya.mean()) ** 2).sum())
    r2 = 1.0 - ssres / sstot if sstot > 0.0 else 0.0
    residual_sd = math.sqrt(ssres / (n - 2)) if n > 2 else 0.0
    return LineFit(
        intercept=intercept,
        slope=slope,
        residual_sd=residual_sd,
        r2=max(0.0, min(1.0, r2)),
        n_points=n,
        clamped=clamped,
    )


def _ls_many(x: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise constrained least squares of each Y row on the shared x.

    Returns (intercepts, slopes, r2, clamped) across the M rows of Y.
    """
    xm = x.mean()
    xc = x - xm
    sxx = float(xc @ xc)
    if sxx == 0.0:
        raise CalibrationError("constant predictor")
    slopes = (Y @ xc) / sxx
    clamped = slopes < 0.0
    slopes = np.where(clamped, 0.0, slopes)
    ymeans = Y.mean(axis=1)
    intercepts = ymeans - slopes * xm
    resid = Y - intercepts[:, None] - slopes[:, None] * x[None, :]
    ssres = (resid * resid).sum(axis=1)
    sstot = ((Y - ymeans[:, None]) ** 2).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        r2 = np.where(sstot > 0.0, 1.0 - ssres / sstot, 0.0)
    return intercepts, slopes, np.clip(r2, 0.0, 1.0), clamped


@dataclass
class DrawsFit:
    """Per-draw constrained line fits of latent abundance on one predictor."""

    c0: np.ndarray
    c1: np.ndarray
    r2: np.ndarray
    clamped: np.ndarray
    n_points: int

    @property
    def median_intercept(self) -> float:
        return float(np.median(self.c0))

    @property
    def median_slope(self) -> float:
        return float(np.median(self.c1))

    @property
    def median_r2(self) -> float:
        return float(np.median(self.r2))

    def summary(self) -> dict:
        cov = float(np.cov(self.c0, self.c1, ddof=1)[0, 1])
        sd0 = float(np.std(self.c0, ddof=1))
        sd1 = float(np.std(self.c1, ddof=1))
        corr = cov / (sd0 * sd1) if sd0 > 0.0 and sd1 > 0.0 else 0.0
        return {
            "intercept": {
                "mean": float(self.c0.mean()),
                "median": self.median_intercept,
                "variance": float(np.var(self.c0, ddof=1)),
            },
            "slope": {
                "mean": float(self.c1.mean()),
                "median": self.median_slope,
                "variance": float(np.var(self.c1, ddof=1)),
            },
            "correlation": corr,
            "median_r2": self.median_r2,
            "clamped_fits": int(self.clamped.sum()),
            "n_points": self.n_points,
        }


def _phi_matrix(draws: PosteriorDraws) -> np.ndarray:
    return np.exp(draws.logphi_matrix())


@dataclass
class AdequacyBlock:
    """Alignment regressions of latent abundance on the absolute-count data."""

    phi_on_rn: DrawsFit
    phi_on_mr: DrawsFit | None
    mr_omitted: bool


def adequacy_alignment(draws: PosteriorDraws, trips: Sequence[TripRecord]) -> AdequacyBlock:
    """Per-draw fits of abundance on ratio-adjusted acoustic counts and MR estimates."""
    phi = _phi_matrix(draws)
    if phi.shape[1] != len(trips):
        raise CalibrationError("draws do not cover the supplied trips")
    rn = np.array([t.pooled_ratio * t.acoustic_total for t in trips])
    c0, c1, r2, cl = _ls_many(rn, phi)
    fit_rn = DrawsFit(c0, c1, r2, cl, len(trips))

    mr_idx = [i for i, t in enumerate(trips) if t.markrecapture is not None]
    if len(mr_idx) < 2:
        return AdequacyBlock(phi_on_rn=fit_rn, phi_on_mr=None, mr_omitted=True)
    mr = np.array([float(trips[i].markrecapture) for i in mr_idx])
    c0m, c1m, r2m, clm = _ls_many(mr, phi[:, mr_idx])
    fit_mr = DrawsFit(c0m, c1m, r2m, clm, len(mr_idx))
    return AdequacyBlock(phi_on_rn=fit_rn, phi_on_mr=fit_mr, mr_omitted=False)


@dataclass
class ErrorRow:
    trip_id: str
    reef_type: str
    maxn: int
    median: float
    lo80: float
    hi80: float


@dataclass
class CameraCalibration:
    """Posterior calibration coefficients and error table for one camera."""

    camera: str
    b0: np.ndarray
    b1: np.ndarray
    r2: np.ndarray
    clamped: np.ndarray
    n_obs: int
    error_rows: list[ErrorRow] = field(default_factory=list)

    @property
    def median_line(self) -> tuple[float, float]:
        return float(np.median(self.b0)), float(np.median(self.b1))

    def summary(self) -> dict:
        return DrawsFit(self.b0, self.b1, self.r2, self.clamped, self.n_obs).summary()


def derive_calibration(
    draws: PosteriorDraws, trips: Sequence[TripRecord], camera: str
) -> CameraCalibration:
    """Per-draw constrained fits of abundance on one camera's observed MaxN counts."""
    if camera not in CAMERAS:
        raise CalibrationError(f"unknown camera {camera!r}")
    obs_idx = [i for i, t in enumerate(trips) if t.maxn[camera] is not None]
    if len(obs_idx) < 3:
        raise CalibrationError(
            f"camera {camera}: needs >=3 trips with observed MaxN, got {len(obs_idx)}"
        )
    x = np.array([float(trips[i].maxn[camera]) for i in obs_idx])
    phi = _phi_matrix(draws)[:, obs_idx]
    b0, b1, r2, cl = _ls_many(x, phi)
    return CameraCalibration(
        camera=camera, b0=b0, b1=b1, r2=r2, clamped=cl, n_obs=len(obs_idx)
    )


def calibration_error(
    draws: PosteriorDraws,
    cal: CameraCalibration,
    trips: Sequence[TripRecord],
    camera: str,
) -> list[ErrorRow]:
    """Median and central 80% interval of (conversion-line value - abundance) per trip."""
    med_b0, med_b1 = cal.median_line
    phi = _phi_matrix(draws)
    rows: list[ErrorRow] = []
    for i, t in enumerate(trips):
        maxn = t.maxn[camera]
        if maxn is None:
            continue
        predicted = med_b0 + med_b1 * float(maxn)
        err = predicted - phi[:, i]
        lo, med, hi = np.quantile(err, [ERROR_INTERVAL_Q[0], 0.5, ERROR_INTERVAL_Q[1]])
        rows.append(
            ErrorRow(
                trip_id=t.trip_id,
                reef_type=t.reef_type,
                maxn=int(maxn),
                median=float(med),
                lo80=float(lo),
                hi80=float(hi),
            )
        )
    return rows


@dataclass
class CalibrationPack:
    """Serializable bundle of calibration formulae, error tables, and adequacy checks."""

    provenance: dict
    cameras: dict[str, CameraCalibration]
    adequacy: AdequacyBlock
    paired: dict[str, RatioRegressionModel]
    skipped_cameras: dict[str, str] = field(default_factory=dict)
    schema_version: int = 1

    def to_json_dict(self) -> dict:
        def fit_dict(fit: DrawsFit) -> dict:
            return {
                "c0": [float(v) for v in fit.c0],
                "c1": [float(v) for v in fit.c1],
                "summary": fit.summary(),
                "median_line": {
                    "intercept": fit.median_intercept,
                    "slope": fit.median_slope,
                },
                "median_r2": fit.median_r2,
            }

        cameras = {}
        for cam, cal in self.cameras.items():
            med0, med1 = cal.median_line
            cameras[cam] = {
                "b0": [float(v) for v in cal.b0],
                "b1": [float(v) for v in cal.b1],
                "summary": cal.summary(),
                "median_line": {"intercept": med0, "slope": med1},
                "median_r2": float(np.median(cal.r2)),
                "n_obs": cal.n_obs,
                "calibration_error": [
                    {
                        "trip_id": r.trip_id,
                        "reef_type": r.reef_type,
                        "maxn": r.maxn,
                        "median": r.median,
                        "lo80": r.lo80,
                        "hi80": r.hi80,
                    }
                    for r in cal.error_rows
                ],
            }
        paired = {}
        for cam, model in self.paired.items():
            paired[cam] = {
                "coefficients": {
                    "intercept": model.intercept,
                    "log_maxn": model.coef_logmaxn,
                    "camera_ratio": model.coef_camratio,
                },
                "covariance": [[float(v) for v in row] for row in model.covariance],
                "residual_variance": model.residual_variance,
                "r2": model.r2,
                "n": model.n,
                "caveat": PAIRED_CAVEAT,
            }
        adequacy = {
            "phi_on_rn": fit_dict(self.adequacy.phi_on_rn),
            "phi_on_mr": None
            if self.adequacy.phi_on_mr is None
            else fit_dict(self.adequacy.phi_on_mr),
            "mr_omitted": self.adequacy.mr_omitted,
        }
        return {
            "schema_version": self.schema_version,
            "provenance": self.provenance,
            "cameras": cameras,
            "adequacy": adequacy,
            "paired": paired,
            "skipped_cameras": self.skipped_cameras,
        }

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=1).encode()

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_json_bytes())


def apply_calibration(pack: Mapping, camera: str, maxn: int) -> tuple[float, float]:
    """Point estimate and approximate SE for converting one MaxN count.

    The SE propagates the posterior variances and correlation of the
    calibration intercept and slope through the affine formula.
    """
    if maxn < 0:
        raise CalibrationError("maxn must be nonnegative")
    cams = pack["cameras"]
    if camera not in cams:
        raise CalibrationError(f"camera {camera!r} not in pack")
    entry = cams[camera]
    line = entry["median_line"]
    estimate = line["intercept"] + line["slope"] * maxn
    s = entry["summary"]
    var_b0 = s["intercept"]["variance"]
    var_b1 = s["slope"]["variance"]
    cov = s["correlation"] * math.sqrt(var_b0 * var_b1)
    var = var_b0 + maxn * maxn * var_b1 + 2.0 * maxn * cov
    return float(estimate), float(math.sqrt(max(var, 0.0)))


def build_pack(
    draws: PosteriorDraws,
    trips: Sequence[TripRecord],
    paired: Mapping[str, RatioRegressionModel] | None = None,
    *,
    model_config_hash: str,
    seed: int,
) -> CalibrationPack:
    """Assemble per-camera calibrations, error tables, and adequacy checks."""
    cameras: dict[str, CameraCalibration] = {}
    skipped: dict[str, str] = {}
    for cam in CAMERAS:
        try:
            cal = derive_calibration(draws, trips, cam)
        except CalibrationError as exc:
            skipped[cam] = str(exc)
            continue
        cal.error_rows = calibration_error(draws, cal, trips, cam)
        cameras[cam] = cal
    return CalibrationPack(
        provenance={
            "model_config_hash": model_config_hash,
            "seed": seed,
            "n_draws": draws.n_draws,
        },
        cameras=cameras,
        adequacy=adequacy_alignment(draws, trips),
        paired=dict(paired or {}),
        skipped_cameras=skipped,
    )


PACK_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "provenance", "cameras", "adequacy", "paired"],
    "properties": {
        "schema_version": {"const": 1},
        "provenance": {
            "type": "object",
            "required": ["model_config_hash", "seed", "n_draws"],
            "properties": {
                "model_config_hash": {"type": "string"},
                "seed": {"type": "integer"},
                "n_draws": {"type": "integer", "minimum": 1},
            },
        },
        "cameras": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": [
                    "b0",
                    "b1",
                    "summary",
                    "median_line",
                    "median_r2",
                    "n_obs",
                    "calibration_error",
                ],
                "properties": {
                    "b0": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                    "b1": {"type": "array", "items": {"type": "number"}, "minItems": 1},
                    "median_line": {
                        "type": "object",
                        "required": ["intercept", "slope"],
                        "properties": {
                            "intercept": {"type": "number"},
                            "slope": {"type": "number", "minimum": 0},
                        },
                    },
                    "median_r2": {"type": "number", "minimum": 0, "maximum": 1},
                    "n_obs": {"type": "integer", "minimum": 3},
                    "calibration_error": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["trip_id", "reef_type", "maxn", "median", "lo80", "hi80"],
                        },
                    },
                },
            },
        },
        "adequacy": {
            "type": "object",
            "required": ["phi_on_rn", "phi_on_mr", "mr_omitted"],
        },
        "paired": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["coefficients", "covariance", "residual_variance", "r2", "n"],
                "properties": {
                    "covariance": {
                        "type": "array",
                        "minItems": 3,
                        "maxItems": 3,
                        "items": {
                            "type": "array",
                            "minItems": 3,
                            "maxItems": 3,
                            "items": {"type": "number"},
                        },
                    },
                    "residual_variance": {"type": "number", "minimum": 0},
                    "n": {"type": "integer", "minimum": 4},
                },
            },
        },
    },
}


def validate_pack(doc: dict) -> None:
    """Raise if the document does not satisfy the pack schema."""
    import jsonschema

    try:
        jsonschema.validate(doc, PACK_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise CalibrationError(f"invalid calibration pack: {exc.message}") from exc
    for cam, entry in doc["cameras"].items():
        for row in entry["calibration_error"]:
            if not (row["lo80"] <= row["median"] <= row["hi80"]):
                raise CalibrationError(
                    f"camera {cam}: calibration-error interval rows must be ordered"
                )
