from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from gearcalib.dataset import load_species_table, load_trips
from gearcalib.inference import PosteriorDraws, SamplerConfig, run_mcmc
from gearcalib.modelgraph import ModelConfig, build_model

DATA_DIR = Path(__file__).resolve().parent.parent / "src" / "gearcalib" / "data"
TRUTH_PATH = Path(__file__).resolve().parent / "data" / "fixture_truth.json"


@pytest.fixture(scope="session")
def fixture_paths() -> dict[str, Path]:
    return {
        "trips": DATA_DIR / "trips.csv",
        "species": DATA_DIR / "species.csv",
        "registry": DATA_DIR / "registry.csv",
    }


@pytest.fixture(scope="session")
def fixture_trips(fixture_paths):
    return load_trips(fixture_paths["trips"])


@pytest.fixture(scope="session")
def fixture_table(fixture_paths):
    return load_species_table(fixture_paths["species"], fixture_paths["registry"])


@pytest.fixture(scope="session")
def fixture_truth() -> dict:
    return json.loads(TRUTH_PATH.read_text())


@pytest.fixture(scope="session")
def fixture_fit(fixture_trips) -> PosteriorDraws:
    """Reduced-model fit on the bundled 21-trip dataset, shared across tests."""
    graph = build_model(ModelConfig.final(), fixture_trips)
    config = SamplerConfig(
        n_chains=4, n_iterations=30_000, burn_in=10_000, thin=10, seed=20260809
    )
    return run_mcmc(graph, config)


def synthetic_draws(
    trip_ids: list[str],
    logphi: np.ndarray,
    extra: dict[str, np.ndarray] | None = None,
    n_chains: int = 2,
) -> PosteriorDraws:
    """Hand-built draws object: an (M, n) log-abundance matrix plus extra columns."""
    M, n = logphi.shape
    assert len(trip_ids) == n
    extra = extra or {}
    columns = tuple(extra) + tuple(f"logphi[{tid}]" for tid in trip_ids)
    matrix = np.column_stack([*(extra[c] for c in extra), logphi])
    return PosteriorDraws(
        columns=columns,
        matrix=matrix,
        chain_id=np.repeat(np.arange(n_chains), M // n_chains),
        acceptance={},
        n_chains=n_chains,
        seed=0,
        pop_columns=tuple(extra),
        trip_ids=tuple(trip_ids),
    )
