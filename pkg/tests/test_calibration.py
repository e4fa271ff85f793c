from __future__ import annotations

import json

import numpy as np
import pytest

from conftest import synthetic_draws
from gearcalib.calibration import (
    CalibrationError,
    adequacy_alignment,
    apply_calibration,
    build_pack,
    calibration_error,
    constrained_ls,
    derive_calibration,
    validate_pack,
)
from gearcalib.dataset import TripRecord


def trip(tid, boat, reef, k, maxn, N, mr=None, r=0.25):
    return TripRecord(tid, boat, reef, k, maxn, N, N, mr, r, "pyramid" if reef == 1 else "rocks")


@pytest.fixture()
def trips():
    rng = np.random.default_rng(0)
    out = []
    ks = {}
    for s in range(12):
        boat = 1 + s % 2
        reef = 1 if s < 9 else 2
        ks[(boat, reef)] = ks.get((boat, reef), 0) + 1
        maxn = {"D": int(rng.integers(0, 9)), "S": int(rng.integers(0, 12)),
                "T": int(rng.integers(0, 7)), "R": (int(rng.integers(0, 8)) if boat == 1 else None)}
        mr = int(rng.integers(10, 60)) if (reef == 1 and s % 3 == 0) else None
        out.append(trip(f"s{s}", boat, reef, ks[(boat, reef)], maxn,
                        int(rng.integers(5, 80)), mr=mr, r=0.2 + 0.02 * s))
    return out


class TestConstrainedLS:
    def test_exact_line(self):
        fit = constrained_ls([0, 1, 2], [0, 1, 2])
        assert (fit.intercept, fit.slope) == (0.0, 1.0)
        assert fit.r2 == 1.0
        assert not fit.clamped
        assert fit.residual_sd == 0.0

    def test_negative_slope_clamps(self):
        fit = constrained_ls([0, 1, 2], [2, 1, 0])
        assert fit.clamped
        assert fit.slope == 0.0
        assert fit.intercept == pytest.approx(1.0)

    def test_matches_normal_equations(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            x = rng.normal(0, 2, 20)
            y = 1.5 + 0.8 * x + rng.normal(0, 0.5, 20)
            fit = constrained_ls(x, y)
            X = np.column_stack([np.ones(20), x])
            b = np.linalg.solve(X.T @ X, X.T @ y)
            if b[1] >= 0:
                assert fit.intercept == pytest.approx(b[0], abs=1e-10)
                assert fit.slope == pytest.approx(b[1], abs=1e-10)

    def test_preconditions(self):
        with pytest.raises(CalibrationError):
            constrained_ls([1.0], [2.0])
        with pytest.raises(CalibrationError, match="constant"):
            constrained_ls([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
        with pytest.raises(CalibrationError):
            constrained_ls([1.0, 2.0], [1.0, 2.0, 3.0])


class TestAdequacy:
    def test_identity_alignment(self, trips):
        rn = np.array([t.pooled_ratio * t.acoustic_total for t in trips])
        logphi = np.log(np.tile(rn, (40, 1)))
        draws = synthetic_draws([t.trip_id for t in trips], logphi)
        block = adequacy_alignment(draws, trips)
        assert block.phi_on_rn.median_intercept == pytest.approx(0.0, abs=1e-9)
        assert block.phi_on_rn.median_slope == pytest.approx(1.0, abs=1e-9)
        assert block.phi_on_rn.median_r2 == pytest.approx(1.0, abs=1e-12)

    def test_independent_of_mr_clamps(self, trips):
        rng = np.random.default_rng(2)
        logphi = rng.normal(1.0, 0.3, (400, len(trips)))
        draws = synthetic_draws([t.trip_id for t in trips], logphi)
        block = adequacy_alignment(draws, trips)
        assert block.phi_on_mr is not None
        # with abundance independent of the MR covariate, about half the raw
        # slopes are negative, so clamping is frequent and the median is ~0
        assert block.phi_on_mr.median_slope == pytest.approx(0.0, abs=0.05)
        assert block.phi_on_mr.clamped.sum() > 100

    def test_single_mr_trip_omitted(self, trips):
        one_mr = [
            TripRecord(t.trip_id, t.boat, t.reef_size, t.replicate, t.maxn,
                       t.acoustic_total, t.acoustic_focal,
                       t.markrecapture if i == 0 else None, t.pooled_ratio, t.reef_type)
            for i, t in enumerate(trips)
        ]
        rng = np.random.default_rng(3)
        draws = synthetic_draws([t.trip_id for t in trips],
                                rng.normal(1, 0.2, (40, len(trips))))
        block = adequacy_alignment(draws, one_mr)
        assert block.mr_omitted
        assert block.phi_on_mr is None


class TestDeriveCalibration:
    def test_constant_abundance_degenerate(self, trips):
        kappa = 7.5
        logphi = np.full((60, len(trips)), np.log(kappa))
        draws = synthetic_draws([t.trip_id for t in trips], logphi)
        cal = derive_calibration(draws, trips, "S")
        b0_med, b1_med = cal.median_line
        assert b0_med == pytest.approx(kappa, rel=1e-9)
        assert b1_med == 0.0

    def test_generate_and_recover(self, trips):
        rng = np.random.default_rng(4)
        y = np.array([float(t.maxn["S"]) for t in trips])
        logphi = np.log(2.0 + 3.0 * y[None, :] + rng.normal(0, 0.05, (600, len(trips))))
        draws = synthetic_draws([t.trip_id for t in trips], logphi)
        cal = derive_calibration(draws, trips, "S")
        b0_med, b1_med = cal.median_line
        assert b0_med == pytest.approx(2.0, abs=0.25)
        assert b1_med == pytest.approx(3.0, abs=0.1)

    def test_too_few_observations(self, trips):
        few = trips[:4]
        for t in few[1:]:
            t.maxn["T"] = None if False else t.maxn["T"]
        sparse = [
            TripRecord(t.trip_id, t.boat, t.reef_size, t.replicate,
                       {**t.maxn, "T": None if i > 0 else t.maxn["T"]},
                       t.acoustic_total, t.acoustic_focal, t.markrecapture,
                       t.pooled_ratio, t.reef_type)
            for i, t in enumerate(few)
        ]
        rng = np.random.default_rng(5)
        draws = synthetic_draws([t.trip_id for t in sparse], rng.normal(1, 0.2, (40, 4)))
        with pytest.raises(CalibrationError, match=">=3"):
            derive_calibration(draws, sparse, "T")

    def test_summary_permutation_invariance(self, trips):
        rng = np.random.default_rng(6)
        logphi = rng.normal(1.0, 0.4, (200, len(trips)))
        draws = synthetic_draws([t.trip_id for t in trips], logphi)
        cal = derive_calibration(draws, trips, "S")
        perm = rng.permutation(200)
        shuffled = synthetic_draws([t.trip_id for t in trips], logphi[perm])
        cal2 = derive_calibration(shuffled, trips, "S")
        s1, s2 = cal.summary(), cal2.summary()
        for key in ("intercept", "slope"):
            for stat in ("mean", "median", "variance"):
                assert s1[key][stat] == pytest.approx(s2[key][stat], abs=1e-12)

    def test_median_line_idempotent_under_duplication(self, trips):
        rng = np.random.default_rng(7)
        logphi = rng.normal(1.0, 0.4, (200, len(trips)))
        draws = synthetic_draws([t.trip_id for t in trips], logphi)
        doubled = synthetic_draws([t.trip_id for t in trips], np.vstack([logphi, logphi]))
        line1 = derive_calibration(draws, trips, "S").median_line
        line2 = derive_calibration(doubled, trips, "S").median_line
        assert line1 == pytest.approx(line2, abs=1e-12)


class TestCalibrationErrorRows:
    def _draws(self, trips, sd=0.3, seed=8):
        rng = np.random.default_rng(seed)
        y = np.array([float(t.maxn["S"]) for t in trips])
        logphi = np.log(np.clip(1.0 + 2.0 * y[None, :] + rng.normal(0, sd, (300, len(trips))), 0.1, None))
        return synthetic_draws([t.trip_id for t in trips], logphi)

    def test_self_consistency_zero_errors(self, trips):
        # abundance identical across draws and exactly on a line in MaxN
        y = np.array([float(t.maxn["S"]) for t in trips])
        logphi = np.log(np.tile(1.0 + 2.0 * y, (50, 1)))
        draws = synthetic_draws([t.trip_id for t in trips], logphi)
        cal = derive_calibration(draws, trips, "S")
        rows = calibration_error(draws, cal, trips, "S")
        for row in rows:
            assert row.median == pytest.approx(0.0, abs=1e-9)

    def test_interval_contains_median_with_reef_labels(self, trips):
        draws = self._draws(trips)
        cal = derive_calibration(draws, trips, "S")
        rows = calibration_error(draws, cal, trips, "S")
        assert len(rows) == len(trips)
        for row in rows:
            assert row.lo80 <= row.median <= row.hi80
            assert row.reef_type in ("pyramid", "rocks")

    def test_widths_grow_with_noise(self, trips):
        lo = self._draws(trips, sd=0.05, seed=9)
        hi = self._draws(trips, sd=0.8, seed=9)
        w = []
        for draws in (lo, hi):
            cal = derive_calibration(draws, trips, "S")
            rows = calibration_error(draws, cal, trips, "S")
            w.append(np.mean([r.hi80 - r.lo80 for r in rows]))
        assert w[1] > w[0]


class TestApplyCalibration:
    def _pack_doc(self, trips, logphi):
        draws = synthetic_draws([t.trip_id for t in trips], logphi)
        pack = build_pack(draws, trips, model_config_hash="abc", seed=0)
        return pack.to_json_dict(), draws

    def test_point_mass_coefficients(self, trips):
        y = np.array([float(t.maxn["S"]) for t in trips])
        logphi = np.log(np.tile(np.maximum(y, 1e-9), (50, 1)))  # phi == maxn exactly
        doc, _ = self._pack_doc(trips, logphi)
        est, se = apply_calibration(doc, "S", 5)
        assert est == pytest.approx(5.0, abs=1e-9)
        assert se == pytest.approx(0.0, abs=1e-9)

    def test_maxn_zero_uses_intercept_only(self, trips):
        rng = np.random.default_rng(10)
        logphi = rng.normal(1.0, 0.4, (300, len(trips)))
        doc, draws = self._pack_doc(trips, logphi)
        cal = derive_calibration(draws, trips, "S")
        est, se = apply_calibration(doc, "S", 0)
        assert est == pytest.approx(np.median(cal.b0), abs=1e-12)
        assert se == pytest.approx(np.std(cal.b0, ddof=1), abs=1e-9)

    def test_matches_empirical_sd(self, trips):
        rng = np.random.default_rng(11)
        y = np.array([float(t.maxn["S"]) for t in trips])
        logphi = np.log(np.clip(2.0 + 1.5 * y[None, :] + rng.normal(0, 1.0, (2000, len(trips))), 0.05, None))
        doc, draws = self._pack_doc(trips, logphi)
        cal = derive_calibration(draws, trips, "S")
        for maxn in (0, 3, 9):
            _, se = apply_calibration(doc, "S", maxn)
            empirical = np.std(cal.b0 + cal.b1 * maxn, ddof=1)
            assert se == pytest.approx(empirical, rel=0.15)

    def test_negative_maxn_rejected(self, trips):
        rng = np.random.default_rng(12)
        doc, _ = self._pack_doc(trips, rng.normal(1, 0.3, (50, len(trips))))
        with pytest.raises(CalibrationError):
            apply_calibration(doc, "S", -1)

    def test_affine_in_maxn(self, trips):
        rng = np.random.default_rng(13)
        doc, _ = self._pack_doc(trips, rng.normal(1, 0.3, (50, len(trips))))
        line = doc["cameras"]["S"]["median_line"]
        e0, _ = apply_calibration(doc, "S", 0)
        e1, _ = apply_calibration(doc, "S", 1)
        e7, _ = apply_calibration(doc, "S", 7)
        assert e1 - e0 == pytest.approx(line["slope"], abs=1e-12)
        assert e7 == pytest.approx(e0 + 7 * line["slope"], abs=1e-12)


class TestPackSerialization:
    def test_schema_and_round_trip(self, trips):
        rng = np.random.default_rng(14)
        logphi = rng.normal(1.0, 0.4, (120, len(trips)))
        draws = synthetic_draws([t.trip_id for t in trips], logphi)
        pack = build_pack(draws, trips, model_config_hash="abc", seed=3)
        doc = pack.to_json_dict()
        validate_pack(doc)
        again = json.loads(pack.to_json_bytes())
        assert again == json.loads(json.dumps(doc))
        # ROV observed on only boat-1 trips but that is still >= 3 here
        assert set(doc["cameras"]) == {"D", "S", "T", "R"}
        assert doc["provenance"]["n_draws"] == 120

    def test_deterministic_bytes(self, trips):
        rng = np.random.default_rng(15)
        logphi = rng.normal(1.0, 0.4, (80, len(trips)))
        draws = synthetic_draws([t.trip_id for t in trips], logphi)
        b1 = build_pack(draws, trips, model_config_hash="abc", seed=3).to_json_bytes()
        b2 = build_pack(draws, trips, model_config_hash="abc", seed=3).to_json_bytes()
        assert b1 == b2
