from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from gearcalib.calibration import derive_calibration, validate_pack
from gearcalib.cli import EXIT_INPUT, EXIT_NONCONVERGED, EXIT_OK, main
from gearcalib.dataset import load_trips
from gearcalib.inference import PosteriorDraws

FAST_SAMPLER = """\
n_chains=2
n_iterations=2200
burn_in=1200
thin=10
seed=99
"""


@pytest.fixture()
def fast_sampler_file(tmp_path):
    path = tmp_path / "sampler.txt"
    path.write_text(FAST_SAMPLER)
    return path


def fit_args(fixture_paths, out: Path, sampler: Path, seed: int | None = None):
    args = [
        "fit",
        "--trips", str(fixture_paths["trips"]),
        "--species", str(fixture_paths["species"]),
        "--registry", str(fixture_paths["registry"]),
        "--sampler-config", str(sampler),
        "--out", str(out),
    ]
    if seed is not None:
        args += ["--seed", str(seed)]
    return args


def test_missing_input_file_exits_2(tmp_path, capsys):
    code = main(["fit", "--trips", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o")])
    assert code == EXIT_INPUT
    assert "error:" in capsys.readouterr().err


def test_fit_writes_outputs_and_is_byte_deterministic(
    fixture_paths, fast_sampler_file, tmp_path
):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    code1 = main(fit_args(fixture_paths, out1, fast_sampler_file))
    code2 = main(fit_args(fixture_paths, out2, fast_sampler_file))
    # short chains are allowed to miss the gates; both runs must agree on that
    assert code1 == code2
    assert code1 in (EXIT_OK, EXIT_NONCONVERGED)
    d1 = (out1 / "draws.csv").read_bytes()
    d2 = (out2 / "draws.csv").read_bytes()
    assert d1 == d2
    assert (out1 / "diagnostics.json").read_bytes() == (out2 / "diagnostics.json").read_bytes()
    report = json.loads((out1 / "diagnostics.json").read_text())
    assert set(report) >= {"parameters", "worst_rhat", "min_ess", "converged", "acceptance"}
    manifest = json.loads((out1 / "manifest.json").read_text())
    assert str(fixture_paths["trips"]) in manifest["inputs"]


def test_pack_matches_library_and_is_stable(
    fixture_paths, fast_sampler_file, tmp_path, fixture_trips
):
    fit_out = tmp_path / "fit"
    main(fit_args(fixture_paths, fit_out, fast_sampler_file))
    pack1 = tmp_path / "p1" / "pack.json"
    pack2 = tmp_path / "p2" / "pack.json"
    for pack_path in (pack1, pack2):
        code = main([
            "pack",
            "--trips", str(fixture_paths["trips"]),
            "--species", str(fixture_paths["species"]),
            "--registry", str(fixture_paths["registry"]),
            "--draws", str(fit_out / "draws.csv"),
            "--out", str(pack_path),
        ])
        assert code == EXIT_OK
    assert pack1.read_bytes() == pack2.read_bytes()

    doc = json.loads(pack1.read_text())
    validate_pack(doc)
    assert set(doc["cameras"]) == {"D", "S", "T", "R"}
    assert set(doc["paired"]) == {"D", "S", "T", "R"}

    draws = PosteriorDraws.from_csv(fit_out / "draws.csv")
    trips = load_trips(fixture_paths["trips"])
    cal = derive_calibration(draws, trips, "T")
    med0, med1 = cal.median_line
    assert doc["cameras"]["T"]["median_line"]["intercept"] == pytest.approx(med0, abs=1e-12)
    assert doc["cameras"]["T"]["median_line"]["slope"] == pytest.approx(med1, abs=1e-12)


def test_simulate_n_zero_errors(fixture_paths, tmp_path, capsys):
    code = main([
        "simulate",
        "--trips", str(fixture_paths["trips"]),
        "--final-draws", str(tmp_path / "missing.csv"),
        "--n-datasets", "0",
        "--out", str(tmp_path / "sim"),
    ])
    assert code == EXIT_INPUT


def test_simulate_smoke_and_determinism(fixture_paths, fast_sampler_file, tmp_path):
    fit_out = tmp_path / "fit"
    main(fit_args(fixture_paths, fit_out, fast_sampler_file))
    outs = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        code = main([
            "simulate",
            "--trips", str(fixture_paths["trips"]),
            "--species", str(fixture_paths["species"]),
            "--registry", str(fixture_paths["registry"]),
            "--final-draws", str(fit_out / "draws.csv"),
            "--n-datasets", "1",
            "--replication", "1",
            "--sampler-config", str(fast_sampler_file),
            "--seed", "31",
            "--out", str(out),
        ])
        assert code == EXIT_OK
        outs.append(out)
    r1 = (outs[0] / "capture-report.json").read_bytes()
    r2 = (outs[1] / "capture-report.json").read_bytes()
    assert r1 == r2
    assert (outs[0] / "capture-table.txt").read_bytes() == (outs[1] / "capture-table.txt").read_bytes()
    report = json.loads(r1)
    names = {row["name"] for row in report["rows"]}
    # the reported parameter set is the full population block plus derived cells
    assert {"beta0", "nu_x[1]", "gamma_x[1]", "sigma_phi[1]", "sigma_phi[2]",
            "xi[1]", "sigma_x[1]", "sigma_x[2]", "rho", "sigma_y", "sigma_yR",
            "Mlog[11]", "M[22]"} <= names
    assert len([n for n in names if n.startswith("beta1")]) == 11
