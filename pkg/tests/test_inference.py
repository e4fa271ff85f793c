from __future__ import annotations

import math

import numpy as np
import pytest

from gearcalib.dataset import TripRecord
from gearcalib.inference import (
    InferenceError,
    PosteriorDraws,
    SamplerConfig,
    _Lvl21State,
    ess,
    impute_missing_y,
    initialize_state,
    prior_posterior_shift,
    prior_spec_for,
    rhat,
    run_mcmc,
)
from gearcalib.modelgraph import ModelConfig, PopParam, build_model, log_posterior


def trip(tid, boat, reef, k, maxn, N, mr=None, r=0.25):
    return TripRecord(tid, boat, reef, k, maxn, N, N, mr, r, "ledge")


def draws_from_chains(chains: np.ndarray, name: str = "x") -> PosteriorDraws:
    flat = chains.reshape(-1)
    return PosteriorDraws(
        columns=(name,),
        matrix=flat[:, None],
        chain_id=np.repeat(np.arange(chains.shape[0]), chains.shape[1]),
        acceptance={},
        n_chains=chains.shape[0],
        seed=0,
        pop_columns=(name,),
        trip_ids=(),
    )


@pytest.fixture()
def small_trips():
    return [
        trip("t1", 1, 1, 1, {"D": 3, "S": 5, "T": 2, "R": 4}, 40, mr=30),
        trip("t2", 1, 1, 2, {"D": 1, "S": 2, "T": 0, "R": None}, 25, mr=20),
        trip("t3", 2, 1, 1, {"D": 0, "S": 1, "T": 1, "R": None}, 12),
        trip("t4", 1, 2, 1, {"D": None, "S": 4, "T": 3, "R": 2}, 30),
        trip("t5", 2, 2, 1, {"D": 2, "S": 3, "T": 1, "R": None}, 15),
        trip("t6", 1, 1, 3, {"D": 4, "S": 7, "T": 5, "R": 6}, 55, mr=40),
    ]


class TestRhat:
    def test_identical_chains_with_equal_halves(self):
        pattern = np.sin(np.arange(500) * 0.37) + np.arange(500) % 7
        chain = np.concatenate([pattern, pattern])  # equal split halves
        chains = np.vstack([chain, chain])
        assert rhat(draws_from_chains(chains), "x") == pytest.approx(1.0, abs=1e-6)

    def test_separated_chains(self):
        rng = np.random.default_rng(0)
        chains = np.vstack([rng.normal(0, 1, 1000), rng.normal(5, 1, 1000)])
        assert rhat(draws_from_chains(chains), "x") > 2.0

    def test_white_noise_near_one(self):
        rng = np.random.default_rng(1)
        chains = rng.normal(0, 1, (2, 10_000))
        assert rhat(draws_from_chains(chains), "x") < 1.01

    def test_single_chain_errors(self):
        with pytest.raises(InferenceError):
            rhat(draws_from_chains(np.zeros((1, 200))), "x")


class TestEss:
    def test_iid_chain(self):
        rng = np.random.default_rng(2)
        M = 20_000
        chains = rng.normal(0, 1, (1, M))
        assert ess(draws_from_chains(chains), "x") == pytest.approx(M, rel=0.2)

    def test_ar1_chain(self):
        rng = np.random.default_rng(3)
        phi = 0.9
        M = 50_000
        x = np.empty(M)
        x[0] = 0.0
        eps = rng.normal(0, 1, M)
        for i in range(1, M):
            x[i] = phi * x[i - 1] + eps[i]
        want = M * (1 - phi) / (1 + phi)
        got = ess(draws_from_chains(x[None, :]), "x")
        assert got == pytest.approx(want, rel=0.3)

    def test_constant_chain_flagged(self):
        d = draws_from_chains(np.full((1, 500), 3.3))
        with pytest.warns(UserWarning, match="constant chain"):
            assert ess(d, "x") == 500.0

    def test_short_chain_errors(self):
        with pytest.raises(InferenceError):
            ess(draws_from_chains(np.zeros((1, 50))), "x")


class TestPriorPosteriorShift:
    def test_posterior_equals_prior(self):
        rng = np.random.default_rng(4)
        d = draws_from_chains(rng.normal(0, 3, (2, 4000)))
        spec = PopParam("x", "identity", 3.0)
        assert prior_posterior_shift(d, "x", spec) < 0.1

    def test_concentrated_posterior(self):
        rng = np.random.default_rng(5)
        d = draws_from_chains(rng.normal(10, 0.1, (2, 4000)))
        spec = PopParam("x", "identity", 3.0)
        assert prior_posterior_shift(d, "x", spec) > 0.9

    def test_log_scale_samples(self):
        rng = np.random.default_rng(6)
        # sigma whose log is prior-distributed: shift should be small
        d = draws_from_chains(np.exp(rng.normal(0, 2, (2, 4000))), name="sigma_y")
        spec = PopParam("sigma_y", "log", 2.0)
        assert prior_posterior_shift(d, "sigma_y", spec) < 0.1

    def test_unknown_form_errors(self):
        d = draws_from_chains(np.zeros((1, 200)) + 1.0)
        with pytest.raises(InferenceError):
            prior_posterior_shift(d, "x", PopParam("x", "cauchy", 1.0))

    def test_prior_spec_for_tied_cells(self, small_trips):
        graph = build_model(ModelConfig(slope_ties="1D&2D|1S|2S|1T|2T|1R|2R"), small_trips)
        spec = prior_spec_for(graph, "beta1[1,D]")
        assert spec.transform == "log"


class TestInitialize:
    def test_zero_count_zero_ratio(self):
        t = trip("z", 1, 1, 1, {"D": 0, "S": 0, "T": 0, "R": 0}, 0, r=1e-6)
        graph = build_model(ModelConfig.final(), [t])
        state = initialize_state(graph, 0)
        # log(r*N + 1) = log(1) = 0
        assert state.logphi[0] == 0.0

    def test_all_zero_dataset_finite(self):
        trips = [
            trip("a", 1, 1, 1, {"D": 0, "S": 0, "T": 0, "R": 0}, 0, r=1e-6),
            trip("b", 2, 2, 1, {"D": 0, "S": 0, "T": 0, "R": 0}, 0, r=1e-6),
        ]
        graph = build_model(ModelConfig.final(), trips)
        state = initialize_state(graph, 1)
        assert np.isfinite(log_posterior(graph, state))

    def test_observed_y_anchors_logmu(self, small_trips):
        graph = build_model(ModelConfig.final(), small_trips)
        state = initialize_state(graph, 2)
        assert state.logmu[0, 1] == pytest.approx(math.log(5 + 1))
        # missing cells start at the trip's own abundance value
        assert state.logmu[1, 3] == state.logphi[1]

    @pytest.mark.parametrize(
        "cfg",
        [
            ModelConfig.final(),
            ModelConfig.comprehensive(),
            ModelConfig(include_ratio_offset=False),
            ModelConfig.comprehensive().__class__(
                **{**ModelConfig.comprehensive().__dict__, "reef_specific_sigma_x": True}
            ),
            ModelConfig(mu_intercepts="none", phi_intercept_beta0=True),
            ModelConfig(
                rov_separate=True, correlation="free", mu_intercepts="beta_plus_boat_plus_reef"
            ),
            ModelConfig(slope_ties="1D&2D|1S&2S|1T&2T|1R&2R"),
            ModelConfig(reef_specific_sigma_phi=False),
        ],
    )
    def test_init_satisfies_constraints_across_configs(self, small_trips, cfg):
        graph = build_model(cfg, small_trips)
        state = initialize_state(graph, 3)
        assert np.isfinite(log_posterior(graph, state))  # includes domain validation


class TestRunMcmc:
    def test_determinism_and_stored_constraints(self, small_trips):
        graph = build_model(ModelConfig.comprehensive(), small_trips)
        cfg = SamplerConfig(n_chains=2, n_iterations=2200, burn_in=1200, thin=10, seed=123,
                            chain_workers=1)
        d1 = run_mcmc(graph, cfg)
        d2 = run_mcmc(graph, cfg)
        assert np.array_equal(d1.matrix, d2.matrix)
        assert d1.n_draws == cfg.n_chains * cfg.draws_per_chain
        for name in d1.pop_columns:
            col = d1.column(name)
            if name.startswith(("sigma", "beta1")):
                assert (col > 0).all()
            if name == "rho":
                assert ((col > 0) & (col < 1)).all()

    def test_parallel_chains_match_sequential(self, small_trips):
        graph = build_model(ModelConfig.final(), small_trips)
        cfg_seq = SamplerConfig(n_chains=2, n_iterations=2200, burn_in=1200, thin=10,
                                seed=5, chain_workers=1)
        cfg_par = SamplerConfig(n_chains=2, n_iterations=2200, burn_in=1200, thin=10,
                                seed=5, chain_workers=2)
        d_seq = run_mcmc(graph, cfg_seq)
        d_par = run_mcmc(graph, cfg_par)
        assert np.array_equal(d_seq.matrix, d_par.matrix)


class TestFastResidualState:
    @pytest.mark.parametrize(
        "cfg",
        [
            ModelConfig.final(),
            ModelConfig.comprehensive(),
            ModelConfig.comprehensive().__class__(
                **{
                    **ModelConfig.comprehensive().__dict__,
                    "center_logphi": False,
                    "center_logmu": False,
                }
            ),
        ],
    )
    def test_deltas_match_full_recompute(self, small_trips, cfg):
        graph = build_model(cfg, small_trips)
        ev = graph.evaluator()
        rng = np.random.default_rng(17)
        z = ev.z_from_state(initialize_state(graph, 5))
        z += rng.normal(0, 0.3, z.shape)
        state = _Lvl21State(ev)
        worst = 0.0
        for _ in range(200):
            state.ensure(z)
            t = int(rng.integers(ev.n))
            if rng.random() < 0.5 or not cfg.rov_separate:
                idx = ev.sl_logphi.start + t
                dv = float(rng.normal(0, 0.6))
                fast = state.phi_delta(z, t, dv)
                before = ev.comp_lvl21(z)
                z[idx] += dv
                slow = ev.comp_lvl21(z) - before
                worst = max(worst, abs(fast - slow))
                if rng.random() < 0.5:
                    state.phi_commit()
                else:
                    z[idx] -= dv
            else:
                idxs = ev.sl_logmu.start + t * 4 + np.arange(3)
                dvec = rng.normal(0, 0.4, 3)
                fast = state.mu3_delta(z, t, dvec)
                before = ev.comp_lvl21(z)
                z[idxs] += dvec
                slow = ev.comp_lvl21(z) - before
                worst = max(worst, abs(fast - slow))
                if rng.random() < 0.5:
                    state.mu3_commit()
                else:
                    z[idxs] -= dvec
            if rng.random() < 0.1:
                state.invalidate()
        assert worst < 1e-8


class TestImpute:
    def _fit(self, small_trips):
        graph = build_model(ModelConfig.final(), small_trips)
        cfg = SamplerConfig(n_chains=2, n_iterations=3200, burn_in=1200, thin=10,
                            seed=21, chain_workers=1)
        return graph, run_mcmc(graph, cfg)

    def test_fixed_mu_poisson_mean(self, small_trips):
        graph, draws = self._fit(small_trips)
        # overwrite the stored missing-cell column with a constant log mean
        col = f"logmu[t2,R]"
        j = draws.columns.index(col)
        draws.matrix[:, j] = math.log(4.0)
        cells = impute_missing_y(graph, draws, seed=1)
        counts = cells[("t2", "R")].counts
        assert counts.mean() == pytest.approx(4.0, abs=3 * math.sqrt(4.0 / len(counts)))

    def test_guarded_negative_infinity(self, small_trips):
        graph, draws = self._fit(small_trips)
        j = draws.columns.index("logmu[t2,R]")
        draws.matrix[:, j] = -1e9
        cells = impute_missing_y(graph, draws, seed=1)
        assert (cells[("t2", "R")].counts == 0).all()
        assert cells[("t2", "R")].median == 0.0

    def test_interval_ordering_and_coverage_of_median(self, small_trips):
        graph, draws = self._fit(small_trips)
        for cell in impute_missing_y(graph, draws, seed=2).values():
            assert cell.lo80 <= cell.median <= cell.hi80

    def test_widens_with_log_mean_sd(self, small_trips):
        graph, draws = self._fit(small_trips)
        j = draws.columns.index("logmu[t2,R]")
        rng = np.random.default_rng(9)
        widths = []
        for sd in (0.1, 1.0):
            draws.matrix[:, j] = rng.normal(1.0, sd, draws.n_draws)
            cell = impute_missing_y(graph, draws, seed=3)[("t2", "R")]
            widths.append(cell.hi80 - cell.lo80)
        assert widths[1] > widths[0]
