"""Engine correctness against conjugate, quadrature, and closed-form targets."""

from __future__ import annotations

import math

import numpy as np
import pytest

from gearcalib.inference import SamplerConfig, run_mcmc_target

CFG = SamplerConfig(n_chains=2, n_iterations=44_000, burn_in=4_000, thin=4, seed=11)


def _batch_mcse(col: np.ndarray, stat, n_batches: int = 40) -> float:
    """Batch-means Monte Carlo SE of an arbitrary statistic of the chain."""
    batches = np.array_split(col, n_batches)
    ests = np.array([stat(b) for b in batches])
    return float(np.std(ests, ddof=1)) / math.sqrt(n_batches)


class Quadrature:
    """Trapezoid oracle for a 1-D unnormalized log density."""

    def __init__(self, logpdf, lo: float, hi: float, n: int = 100_001):
        self.grid = np.linspace(lo, hi, n)
        logp = logpdf(self.grid)
        logp -= logp.max()
        w = np.exp(logp)
        self.norm = np.trapezoid(w, self.grid)
        self.pdf = w / self.norm
        cdf = np.concatenate([[0.0], np.cumsum((self.pdf[1:] + self.pdf[:-1]) / 2.0
                                               * np.diff(self.grid))])
        self.cdf = cdf / cdf[-1]

    def mean(self) -> float:
        return float(np.trapezoid(self.grid * self.pdf, self.grid))

    def quantile(self, q: float) -> float:
        return float(np.interp(q, self.cdf, self.grid))

    def density_at(self, x: float) -> float:
        return float(np.interp(x, self.grid, self.pdf))


def check_against_oracle(draws_col, mean_ref, q05_ref, q95_ref):
    assert abs(draws_col.mean() - mean_ref) < 2.0 * _batch_mcse(draws_col, np.mean)
    q05, q95 = np.quantile(draws_col, [0.05, 0.95])
    assert abs(q05 - q05_ref) < 2.0 * _batch_mcse(draws_col, lambda b: np.quantile(b, 0.05))
    assert abs(q95 - q95_ref) < 2.0 * _batch_mcse(draws_col, lambda b: np.quantile(b, 0.95))


def test_conjugate_normal_normal():
    # prior N(0,1), likelihood x=2 ~ N(theta, 1) -> posterior N(1, 1/2)
    def logpost(z):
        return -0.5 * z[0] ** 2 - 0.5 * (2.0 - z[0]) ** 2

    draws = run_mcmc_target(logpost, np.zeros(1), CFG, names=("theta",))
    col = draws.column("theta")
    sd = math.sqrt(0.5)
    q05 = 1.0 - 1.6448536269514722 * sd
    q95 = 1.0 + 1.6448536269514722 * sd
    check_against_oracle(col, 1.0, q05, q95)


def test_poisson_lognormal_grid_oracle():
    # log phi ~ N(0,1); N=3 | phi ~ Poisson(phi)
    def logpdf(v):
        return -0.5 * v**2 + 3.0 * v - np.exp(v)

    oracle = Quadrature(logpdf, -12.0, 8.0)

    def logpost(z):
        v = z[0]
        return -0.5 * v * v + 3.0 * v - math.exp(v)

    draws = run_mcmc_target(logpost, np.zeros(1), CFG, names=("logphi",))
    col = draws.column("logphi")
    q05, q95 = oracle.quantile(0.05), oracle.quantile(0.95)
    check_against_oracle(col, oracle.mean(), q05, q95)


def test_two_level_lognormal_closed_form():
    # log phi ~ N(0,1); log mu | log phi ~ N(log phi, 0.5^2); w=1.3 | log mu ~ N(log mu, 0.3^2)
    s_m2, s_w2, w = 0.25, 0.09, 1.3

    def logpost(z):
        lp, lm = z
        return (
            -0.5 * lp * lp
            - 0.5 * (lm - lp) ** 2 / s_m2
            - 0.5 * (w - lm) ** 2 / s_w2
        )

    draws = run_mcmc_target(logpost, np.zeros(2), CFG, names=("logphi", "logmu"))
    col = draws.column("logphi")
    lik_var = s_m2 + s_w2
    post_var = 1.0 / (1.0 + 1.0 / lik_var)
    post_mean = w * (1.0 / lik_var) * post_var
    sd = math.sqrt(post_var)
    q05 = post_mean - 1.6448536269514722 * sd
    q95 = post_mean + 1.6448536269514722 * sd
    check_against_oracle(col, post_mean, q05, q95)


def test_same_seed_identical_draws():
    def logpost(z):
        return -0.5 * float(z @ z)

    d1 = run_mcmc_target(logpost, np.zeros(3), CFG)
    d2 = run_mcmc_target(logpost, np.zeros(3), CFG)
    assert np.array_equal(d1.matrix, d2.matrix)


def test_acceptance_rates_near_target():
    def logpost(z):
        return -0.5 * float(z @ z)

    draws = run_mcmc_target(logpost, np.zeros(2), CFG)
    for rate in draws.acceptance.values():
        assert 0.3 < rate < 0.6
