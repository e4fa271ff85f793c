"""Regenerate the bundled 21-trip synthetic calibration dataset.

The design mirrors the calibration experiment: boat/reef-size cells of sizes
13, 2, 4 and 2; all trips carry SBRUV and trap cameras; two trips lack the
drop camera only, five lack the ROV only, two lack both; the ROV never rides
boat 2; mark-recapture estimates exist on ten large-reef trips.  MaxN,
acoustic, and mark-recapture counts are generated from the reduced model at
known parameter values (frozen alongside for tests), with the species table
built first so pooled ratios are real ratios of tabulated MaxN sums.

Usage: python tools/make_fixture.py
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parent.parent
DATA_DIR = ROOT / "src" / "gearcalib" / "data"
TRUTH_PATH = ROOT / "tests" / "data" / "fixture_truth.json"

CAMERAS = ("D", "S", "T", "R")

TRUE_PARAMS = {
    "nu_x[1]": 0.25,
    "gamma_x[1]": 1.6,
    "sigma_phi[1]": 0.55,
    "sigma_phi[2]": 0.45,
    "beta_y0[D]": 0.9,
    "beta_y0[S]": 1.5,
    "beta_y0[T]": 1.1,
    "beta_y0[R]": 1.2,
    "beta1[1,D]": 0.45,
    "beta1[2,D]": 0.30,
    "beta1[1,S]": 0.70,
    "beta1[2,S]": 0.50,
    "beta1[1,T]": 0.55,
    "beta1[2,T]": 0.40,
    "beta1[1,R]": 0.60,
    "beta1[2,R]": 0.35,
    "rho": 0.45,
    "sigma_y": 0.50,
}

# (trip, boat, reef size, reef type, D present, R present, has mark-recapture)
DESIGN = [
    ("t01", 1, 1, "Super pyramid", True, True, True),
    ("t02", 1, 1, "Super pyramid", True, True, True),
    ("t03", 1, 1, "Super pyramid", True, True, True),
    ("t04", 1, 1, "Super pyramid", True, True, True),
    ("t05", 1, 1, "Super pyramid", False, True, True),
    ("t06", 1, 1, "Super pyramid", True, True, True),
    ("t07", 1, 1, "Super pyramid", True, True, True),
    ("t08", 1, 1, "Super pyramid", True, True, True),
    ("t09", 1, 1, "Super pyramid", False, False, True),
    ("t10", 1, 1, "Super pyramid", True, True, True),
    ("t11", 1, 1, "Tank", True, True, False),
    ("t12", 1, 1, "Bridge rubble", True, True, False),
    ("t13", 1, 1, "Tank", True, True, False),
    ("t14", 1, 2, "Rock outcrop", True, True, False),
    ("t15", 1, 2, "Large rocks", False, True, False),
    ("t16", 2, 1, "Bridge rubble", True, False, False),
    ("t17", 2, 1, "Tank", True, False, False),
    ("t18", 2, 1, "Bridge rubble", True, False, False),
    ("t19", 2, 1, "Tank", True, False, False),
    ("t20", 2, 2, "Chicken coop", True, False, False),
    ("t21", 2, 2, "Rock outcrop", False, False, False),
]

# species -> (is_gaj, is_gaj_plus, per-camera detectability, large-reef rate, small-reef rate)
SPECIES = {
    "greater_amberjack": (1, 1, {"D": 1.0, "S": 1.0, "T": 1.0, "R": 1.0}, None, None),
    "red_snapper": (0, 1, {"D": 0.8, "S": 1.0, "T": 1.0, "R": 1.0}, 7.0, 2.0),
    "almaco_jack": (0, 1, {"D": 0.6, "S": 1.0, "T": 0.8, "R": 1.0}, 3.0, 1.0),
    "grey_triggerfish": (0, 1, {"D": 0.9, "S": 1.0, "T": 1.0, "R": 0.9}, 5.0, 2.5),
    "atlantic_spadefish": (0, 1, {"D": 0.5, "S": 0.9, "T": 0.7, "R": 1.0}, 4.0, 1.5),
    "bank_sea_bass": (0, 0, {"D": 0.7, "S": 1.0, "T": 1.0, "R": 1.0}, 6.0, 4.0),
    "lionfish": (0, 0, {"D": 0.4, "S": 0.8, "T": 0.9, "R": 1.0}, 2.0, 1.5),
}


def main() -> None:
    rng = np.random.Generator(np.random.Philox(key=np.array([2026, 809], dtype=np.uint64)))
    p = TRUE_PARAMS
    n = len(DESIGN)
    boat_sign = np.array([1.0 if row[1] == 1 else -1.0 for row in DESIGN])
    reef_sign = np.array([1.0 if row[2] == 1 else -1.0 for row in DESIGN])
    reef_j = np.array([row[2] for row in DESIGN])

    sigma_phi = np.where(reef_j == 1, p["sigma_phi[1]"], p["sigma_phi[2]"])
    logphi = (
        boat_sign * p["nu_x[1]"]
        + reef_sign * p["gamma_x[1]"]
        + rng.normal(0.0, 1.0, n) * sigma_phi
    )
    phit = logphi - logphi.mean()

    rho, sigma_y = p["rho"], p["sigma_y"]
    g = rng.normal(0.0, 1.0, n)
    e = rng.normal(0.0, 1.0, (n, 4))
    eps = sigma_y * (math.sqrt(rho) * g[:, None] + math.sqrt(1.0 - rho) * e)
    logmu = np.empty((n, 4))
    for ci, cam in enumerate(CAMERAS):
        slope = np.where(reef_j == 1, p[f"beta1[1,{cam}]"], p[f"beta1[2,{cam}]"])
        logmu[:, ci] = p[f"beta_y0[{cam}]"] + slope * phit + eps[:, ci]
    y = rng.poisson(np.exp(logmu))

    present = {}
    for s, row in enumerate(DESIGN):
        present[row[0]] = {
            "D": row[4],
            "S": True,
            "T": True,
            "R": row[5],
        }

    # Species table first: pooled ratios must be genuine ratios of its sums.
    species_rows = []
    gaj_plus_sum = np.zeros(n)
    gaj_sum = np.zeros(n)
    for s, row in enumerate(DESIGN):
        tid = row[0]
        for cam in CAMERAS:
            if not present[tid][cam]:
                continue
            cam_plus_total = 0
            for sid, (is_gaj, is_plus, detect, rate_l, rate_s) in SPECIES.items():
                if sid == "greater_amberjack":
                    count = int(y[s, CAMERAS.index(cam)])
                else:
                    rate = (rate_l if reef_j[s] == 1 else rate_s) * detect[cam]
                    count = int(rng.poisson(rate))
                if count > 0 or sid == "greater_amberjack":
                    species_rows.append((tid, cam, sid, count))
                if is_plus:
                    cam_plus_total += count
                    gaj_plus_sum[s] += count
                    if is_gaj:
                        gaj_sum[s] += count
            if cam_plus_total == 0:
                species_rows.append((tid, cam, "red_snapper", 1))
                gaj_plus_sum[s] += 1

    r = gaj_sum / gaj_plus_sum + 1e-6
    N = rng.poisson(np.exp(logphi) / r)
    N_focal = rng.binomial(N, 0.6)
    Nmr = rng.poisson(np.exp(logphi + rng.normal(0.0, 0.3, n)))

    DATA_DIR.mkdir(parents=True, exist_ok=True)
    TRUTH_PATH.parent.mkdir(parents=True, exist_ok=True)

    with (DATA_DIR / "trips.csv").open("w") as fh:
        fh.write("trip_id,boat,reef_size,reef_type,maxn_D,maxn_S,maxn_T,maxn_R,N,N_focal,N_mr,r\n")
        for s, row in enumerate(DESIGN):
            tid, boat, reef, rtype, has_d, has_r, has_mr = row
            cells = [
                str(int(y[s, ci])) if present[tid][cam] else "NA"
                for ci, cam in enumerate(CAMERAS)
            ]
            mr = str(int(Nmr[s])) if has_mr else "NA"
            fh.write(
                f"{tid},{boat},{reef},{rtype},{cells[0]},{cells[1]},{cells[2]},{cells[3]},"
                f"{int(N[s])},{int(N_focal[s])},{mr},{float(r[s])!r}\n"
            )

    with (DATA_DIR / "species.csv").open("w") as fh:
        fh.write("trip_id,camera,species_id,maxn\n")
        for tid, cam, sid, count in species_rows:
            fh.write(f"{tid},{cam},{sid},{count}\n")

    with (DATA_DIR / "registry.csv").open("w") as fh:
        fh.write("species_id,is_gaj,is_gaj_plus\n")
        for sid, (is_gaj, is_plus, *_rest) in SPECIES.items():
            fh.write(f"{sid},{is_gaj},{is_plus}\n")

    truth = {
        "params": TRUE_PARAMS,
        "logphi": [float(v) for v in logphi],
        "trip_ids": [row[0] for row in DESIGN],
    }
    TRUTH_PATH.write_text(json.dumps(truth, indent=1, sort_keys=True))
    print(f"wrote {DATA_DIR}/trips.csv species.csv registry.csv and {TRUTH_PATH}")
    print(f"N range: {N.min()}..{N.max()}; pooled r range: {r.min():.3f}..{r.max():.3f}")


if __name__ == "__main__":
    main()
