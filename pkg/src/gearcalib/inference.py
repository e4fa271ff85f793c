"""MCMC engine over calibration model graphs, plus convergence and adequacy diagnostics.

Chains use the counter-based Philox 4x64 generator: chain c of a run seeded s
draws from ``Philox(key=[s, c])``, which is platform-independent and makes
every fit reproducible from the single seed.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import gaussian_kde

from . import sampler as smp
from ._parallel import pmap
from .dataset import CAMERAS
from .modelgraph import (
    GraphEvaluator,
    ModelGraph,
    ParameterState,
    PopParam,
    slope_cell_columns,
)

#: Convergence gates replacing visual trace inspection.
RHAT_GATE = 1.05
ESS_GATE = 400.0

_MASK64 = (1 << 64) - 1


class InferenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    n_iterations: int = 50_000
    burn_in: int = 20_000
    thin: int = 10
    seed: int = 0
    adapt_window: int = 50
    block_nu_gamma_x: bool = False
    chain_workers: int | None = None

    def __post_init__(self) -> None:
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not self.burn_in < self.n_iterations:
            raise ValueError("burn_in must be smaller than n_iterations")
        kept = self.n_iterations - self.burn_in
        if kept % self.thin != 0:
            raise ValueError("(n_iterations - burn_in) must be divisible by thin")
        if kept // self.thin < 100:
            raise ValueError("need at least 100 stored draws per chain")

    @property
    def draws_per_chain(self) -> int:
        return (self.n_iterations - self.burn_in) // self.thin

    @classmethod
    def from_file(cls, path: str | Path) -> "SamplerConfig":
        kwargs: dict[str, object] = {}
        ints = {"n_chains", "n_iterations", "burn_in", "thin", "seed", "adapt_window"}
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, value = (part.strip() for part in line.split("=", 1))
            if key in ints:
                kwargs[key] = int(value)
            elif key == "block_nu_gamma_x":
                kwargs[key] = value == "true"
            elif key == "chain_workers":
                kwargs[key] = None if value in ("", "none") else int(value)
            else:
                raise ValueError(f"unknown sampler config key {key!r}")
        return cls(**kwargs)  # type: ignore[arg-type]


@dataclass
class PosteriorDraws:
    """Stored posterior draws: population parameters plus per-trip latent log-abundance."""

    columns: tuple[str, ...]
    matrix: np.ndarray  # (M, P)
    chain_id: np.ndarray  # (M,) int
    acceptance: dict[str, float]
    n_chains: int
    seed: int
    pop_columns: tuple[str, ...]
    trip_ids: tuple[str, ...]

    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        if not self._index:
            self._index = {name: i for i, name in enumerate(self.columns)}

    @property
    def n_draws(self) -> int:
        return self.matrix.shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.matrix[:, self._index[name]]
        except KeyError:
            raise KeyError(f"no stored column {name!r}") from None

    def by_chain(self, name: str) -> np.ndarray:
        col = self.column(name)
        return col.reshape(self.n_chains, -1)

    def logphi_matrix(self) -> np.ndarray:
        cols = [self._index[f"logphi[{tid}]"] for tid in self.trip_ids]
        return self.matrix[:, cols]

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["chain", "iteration", *self.columns])
            per_chain = self.n_draws // self.n_chains
            for m in range(self.n_draws):
                writer.writerow(
                    [
                        int(self.chain_id[m]),
                        m % per_chain,
                        *(repr(float(v)) for v in self.matrix[m]),
                    ]
                )

    @classmethod
    def from_csv(
        cls,
        path: str | Path,
        *,
        seed: int = 0,
        acceptance: dict[str, float] | None = None,
    ) -> "PosteriorDraws":
        with Path(path).open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[:2] != ["chain", "iteration"]:
                raise InferenceError(f"{path}: not a draws file")
            columns = tuple(header[2:])
            chain_ids = []
            rows = []
            for row in reader:
                chain_ids.append(int(row[0]))
                rows.append([float(v) for v in row[2:]])
        matrix = np.array(rows)
        chain_id = np.array(chain_ids, dtype=np.int64)
        n_chains = int(chain_id.max()) + 1 if len(chain_id) else 1
        pop_cols = tuple(c for c in columns if not c.startswith(("logphi[", "logmu[")))
        trip_ids = tuple(
            c[len("logphi[") : -1] for c in columns if c.startswith("logphi[")
        )
        return cls(
            columns=columns,
            matrix=matrix,
            chain_id=chain_id,
            acceptance=acceptance or {},
            n_chains=n_chains,
            seed=seed,
            pop_columns=pop_cols,
            trip_ids=trip_ids,
        )


def _chain_rng(seed: int, chain: int) -> np.random.Generator:
    key = np.array([seed & _MASK64, chain & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def initialize_state(graph: ModelGraph, seed: int) -> ParameterState:
    """Data-anchored latents plus jittered prior medians for population scalars."""
    return _initialize_with_rng(graph, _chain_rng(seed, 0))


def _initialize_with_rng(graph: ModelGraph, rng: np.random.Generator) -> ParameterState:
    ev = graph.evaluator()
    r = np.exp(graph.log_r) if graph.log_r is not None else np.ones(graph.n_trips)
    logphi0 = np.log(r * graph.N + 1.0)
    logmu0 = np.where(graph.y_mask, np.log(np.nan_to_num(graph.y) + 1.0), logphi0[:, None])

    for attempt in range(100):
        pop: dict[str, float] = {}
        zjit = {}
        for p in graph.pop_params:
            zval = 0.1 * p.prior_sd * rng.standard_normal()
            zjit[p.name] = zval
            if p.transform == "identity":
                pop[p.name] = zval
            elif p.transform == "log":
                pop[p.name] = math.exp(zval)
            else:
                pop[p.name] = 1.0 / (1.0 + math.exp(-zval))
        xi1 = pop.get("xi[1]", 0.0)
        logtau1 = None
        logtau2 = None
        if ev.m_tau1:
            tr = graph.tau1_rows
            logtau1 = logphi0[tr] + xi1
            if graph.config.include_ratio_offset:
                logtau1 = logtau1 - graph.log_r[tr]
        if ev.m_tau2:
            logtau2 = logphi0[ev.mr_rows] - xi1
        state = ParameterState(
            population=pop,
            logphi=logphi0.copy(),
            logmu=logmu0.copy(),
            logtau1=logtau1,
            logtau2=logtau2,
        )
        if np.isfinite(ev.total(ev.z_from_state(state))):
            return state
    raise InferenceError("could not find a finite initial state after 100 jitter retries")


def _storage_layout(graph: ModelGraph) -> tuple[tuple[str, ...], list[tuple[str, int]]]:
    """Column names and (name, pop_index) pairs with tied slope cells expanded."""
    cell_map = slope_cell_columns(graph.config)
    pop_pos = {p.name: i for i, p in enumerate(graph.pop_params)}
    pop_cols: list[tuple[str, int]] = []
    for p in graph.pop_params:
        if p.name.startswith("beta1[") and "&" in p.name:
            for cell_col, pname in sorted(cell_map.items()):
                if pname == p.name:
                    pop_cols.append((cell_col, pop_pos[p.name]))
        else:
            pop_cols.append((p.name, pop_pos[p.name]))
    names = [name for name, _ in pop_cols]
    names += [f"logphi[{tid}]" for tid in graph.trip_ids]
    missing = np.argwhere(~graph.y_mask)
    names += [f"logmu[{graph.trip_ids[t]},{CAMERAS[c]}]" for t, c in missing]
    return tuple(names), pop_cols


def _make_collect(graph: ModelGraph):
    ev = graph.evaluator()
    _, pop_cols = _storage_layout(graph)
    pop_idx = np.array([i for _, i in pop_cols], dtype=np.int64)
    transforms = [graph.pop_params[i].transform for i in pop_idx]
    is_log = np.array([t == "log" for t in transforms])
    is_logit = np.array([t == "logit" for t in transforms])
    missing_flat = np.flatnonzero(~graph.y_mask.ravel())

    def collect(z: np.ndarray) -> np.ndarray:
        vals = z[pop_idx].copy()
        vals[is_log] = np.exp(vals[is_log])
        vals[is_logit] = 1.0 / (1.0 + np.exp(-vals[is_logit]))
        return np.concatenate([vals, z[ev.sl_logphi], z[ev.sl_logmu][missing_flat]])

    return collect


class _CompCache:
    """Component totals for the committed z, maintained by site accept hooks."""

    def __init__(self, ev: GraphEvaluator):
        self._ev = ev
        self._vals: dict[str, float] = {}

    def get(self, name: str, z: np.ndarray) -> float:
        v = self._vals.get(name)
        if v is None:
            v = getattr(self._ev, f"comp_{name}")(z)
            self._vals[name] = v
        return v

    def set(self, name: str, value: float) -> None:
        self._vals[name] = value

    def invalidate(self, *names: str) -> None:
        for name in names:
            self._vals.pop(name, None)


class _Lvl21State:
    """Maintained MaxN-regression residual aggregates for O(1) latent-site deltas.

    Centering couples every trip's residual to every latent, but a single
    latent move shifts all residuals by a rank-one pattern, so the change in
    the exchangeable quadratic form is available in closed form from a few
    running sums.  Commits apply the same rank-one updates; a rebuild counter
    bounds float drift.  Exchangeable correlation only.
    """

    _REBUILD_EVERY = 1000

    def __init__(self, ev: GraphEvaluator):
        self.ev = ev
        self.valid = False
        self._commits = 0
        self._pend: tuple = ()

    def invalidate(self) -> None:
        self.valid = False

    def ensure(self, z: np.ndarray) -> None:
        if self.valid and self._commits < self._REBUILD_EVERY:
            return
        ev = self.ev
        E, resR = ev.lvl21_residuals(z)
        d = E.shape[1]
        B1 = np.exp(z[ev.slope_cell_pos])
        self.E = E
        self.S = E.sum(axis=1)
        self.B = B1[ev.reef_idx][:, :d]
        self.Bs = self.B.sum(axis=1)
        self.b2row = (self.B * self.B).sum(axis=1)
        self.B2tot = float(self.b2row.sum())
        self.C2tot = float((self.Bs * self.Bs).sum())
        self.W = float((self.B * E).sum())
        self.V = float((self.S * self.Bs).sum())
        self.Q2 = float((E * E).sum())
        self.QS = float((self.S * self.S).sum())
        if resR is not None:
            self.resR = resR
            self.B1R = B1[ev.reef_idx, 3]
            self.B2R = float((self.B1R * self.B1R).sum())
            self.B1Rsum = float(self.B1R.sum())
            self.Q2R = float((resR * resR).sum())
            self.S1R = float(resR.sum())
            self.W_R = float((self.B1R * resR).sum())
            self.b1mu = np.exp(z[ev.pos_beta1_mu])
        else:
            self.resR = None
        self.valid = True
        self._commits = 0

    def _coefs(self, z: np.ndarray) -> tuple[float, float, float, float]:
        ev = self.ev
        d = self.E.shape[1]
        rho = 1.0 / (1.0 + math.exp(-z[ev.pos_rho]))
        lam2 = 1.0 - rho
        lam1 = 1.0 + (d - 1) * rho
        a = 1.0 / lam2
        b = -rho / (lam2 * lam1)
        s2 = math.exp(2.0 * z[ev.pos_sigma_y])
        syR2 = math.exp(2.0 * z[ev.pos_sigma_yR]) if self.resR is not None else 1.0
        return a, b, s2, syR2

    def phi_delta(self, z: np.ndarray, t: int, dv: float) -> float:
        """Change in the regression component if logphi[t] moves by dv."""
        n = self.ev.n
        c = dv / n if self.ev.graph.config.center_logphi else 0.0
        k = dv * dv - 2.0 * c * dv
        d_t = float(self.B[t] @ self.E[t])
        b2t = float(self.b2row[t])
        Bst = float(self.Bs[t])
        dQ2 = 2.0 * c * self.W - 2.0 * dv * d_t + c * c * self.B2tot + b2t * k
        dQS = (
            2.0 * c * self.V
            - 2.0 * dv * float(self.S[t]) * Bst
            + c * c * self.C2tot
            + Bst * Bst * k
        )
        a, b, s2, syR2 = self._coefs(z)
        out = -(a * dQ2 + b * dQS) / (2.0 * s2)
        dQ2R = 0.0
        if self.resR is not None:
            b1rt = float(self.B1R[t])
            dRt = b1rt * float(self.resR[t])
            dQ2R = 2.0 * c * self.W_R - 2.0 * dv * dRt + c * c * self.B2R + b1rt * b1rt * k
            out -= dQ2R / (2.0 * syR2)
        self._pend = ("phi", t, dv, c, dQ2, dQS, dQ2R, b2t, Bst)
        return out

    def phi_commit(self) -> None:
        _, t, dv, c, dQ2, dQS, dQ2R, b2t, Bst = self._pend
        if c != 0.0:
            self.E += c * self.B
            self.S += c * self.Bs
        self.E[t] -= dv * self.B[t]
        self.S[t] -= dv * Bst
        self.W += c * self.B2tot - dv * b2t
        self.V += c * self.C2tot - dv * Bst * Bst
        self.Q2 += dQ2
        self.QS += dQS
        if self.resR is not None:
            b1rt = float(self.B1R[t])
            if c != 0.0:
                self.resR += c * self.B1R
            self.resR[t] -= dv * b1rt
            self.W_R += c * self.B2R - dv * b1rt * b1rt
            self.S1R += c * self.B1Rsum - dv * b1rt
            self.Q2R += dQ2R
        self._commits += 1

    def mu3_delta(self, z: np.ndarray, t: int, deltas: np.ndarray) -> float:
        """Change in the regression component if logmu[t, :3] moves by deltas."""
        n = self.ev.n
        D3 = float(deltas.sum())
        dQ2 = 2.0 * float(self.E[t] @ deltas) + float(deltas @ deltas)
        dQS = 2.0 * float(self.S[t]) * D3 + D3 * D3
        sD = float(self.b1mu @ deltas)
        cm = sD / n if self.ev.graph.config.center_logmu else 0.0
        dQ2R = (
            2.0 * cm * self.S1R
            + n * cm * cm
            + sD * sD
            - 2.0 * sD * (float(self.resR[t]) + cm)
        )
        a, b, s2, syR2 = self._coefs(z)
        out = -(a * dQ2 + b * dQS) / (2.0 * s2) - dQ2R / (2.0 * syR2)
        self._pend = ("mu3", t, deltas.copy(), D3, sD, cm, dQ2, dQS, dQ2R)
        return out

    def mu3_commit(self) -> None:
        _, t, deltas, D3, sD, cm, dQ2, dQS, dQ2R = self._pend
        self.W += float(self.B[t] @ deltas)
        self.V += float(self.Bs[t]) * D3
        self.E[t] += deltas
        self.S[t] += D3
        self.Q2 += dQ2
        self.QS += dQS
        if cm != 0.0:
            self.resR += cm
        self.resR[t] -= sD
        self.W_R += cm * self.B1Rsum - sD * float(self.B1R[t])
        self.S1R += self.ev.n * cm - sD
        self.Q2R += dQ2R
        self._commits += 1


def _pop_deps(graph: ModelGraph, name: str) -> tuple[str, ...]:
    if name in ("beta0", "nu_x[1]", "gamma_x[1]") or name.startswith("sigma_phi"):
        return ("lvl3",)
    if name == "xi[1]":
        # Small-reef acoustic means are deterministic in xi under the
        # reef-specific noise variant, so xi also enters the Poisson term.
        if len(graph.evaluator().tau1_det_rows):
            return ("lvl22", "N_pois")
        return ("lvl22",)
    if name.startswith("sigma_x"):
        return ("lvl22",)
    return ("lvl21",)


def _build_sites(graph: ModelGraph, config: SamplerConfig) -> list[smp.Site]:
    ev = graph.evaluator()
    cfg = graph.config
    n = graph.n_trips
    cache = _CompCache(ev)
    use_fast = cfg.correlation == "exchangeable"
    resid = _Lvl21State(ev) if use_fast else None
    # Variance/correlation scalars rescale the regression density without
    # moving its residuals, so they never stale the residual aggregates.
    variance_only = {"sigma_y", "sigma_yR", "rho", "rho[D,S]", "rho[D,T]", "rho[S,T]"}
    sites: list[smp.Site] = []

    def make_pop_site(i: int, deps: tuple[str, ...]) -> smp.ScalarSite:
        fns = [(c, getattr(ev, f"comp_{c}")) for c in deps]
        pending: dict[str, float] = {}
        name = graph.pop_params[i].name
        stales_resid = resid is not None and "lvl21" in deps and name not in variance_only

        def delta(z: np.ndarray, prop: float) -> float:
            old_sum = sum(cache.get(c, z) for c, _ in fns)
            old_val = z[i]
            z[i] = prop
            pending.clear()
            new_sum = 0.0
            for c, fn in fns:
                v = fn(z)
                pending[c] = v
                new_sum += v
            z[i] = old_val
            d_prior = ev.prior_term(i, prop) - ev.prior_term(i, float(old_val))
            return new_sum - old_sum + d_prior

        def on_accept() -> None:
            for c, v in pending.items():
                cache.set(c, v)
            if stales_resid:
                resid.invalidate()

        return smp.ScalarSite(
            name=name,
            idx=i,
            delta=delta,
            on_accept=on_accept,
            init_scale=0.4,
        )

    block_names = {"nu_x[1]", "gamma_x[1]"} if config.block_nu_gamma_x else set()
    for i, p in enumerate(graph.pop_params):
        if p.name in block_names:
            continue
        sites.append(make_pop_site(i, _pop_deps(graph, p.name)))
    if block_names:
        idxs = np.array([ev.pop_pos["nu_x[1]"], ev.pop_pos["gamma_x[1]"]], dtype=np.int64)
        pending_blk: dict[str, float] = {}

        def block_delta(z: np.ndarray, props: np.ndarray) -> float:
            old_sum = cache.get("lvl3", z)
            old_prior = sum(ev.prior_term(int(k), float(z[k])) for k in idxs)
            old_vals = z[idxs].copy()
            z[idxs] = props
            new_val = ev.comp_lvl3(z)
            new_prior = sum(ev.prior_term(int(k), float(v)) for k, v in zip(idxs, props))
            z[idxs] = old_vals
            pending_blk["lvl3"] = new_val
            return new_val - old_sum + new_prior - old_prior

        def block_accept() -> None:
            cache.set("lvl3", pending_blk["lvl3"])

        sites.append(
            smp.BlockSite(
                name="nu_x+gamma_x", idxs=idxs, delta=block_delta, on_accept=block_accept
            )
        )

    # Latent log-abundance.  The centered predictor couples all trips through
    # the latent mean; the O(1) rank-one update handles that coupling in the
    # exchangeable case, with a full-recompute fallback otherwise.
    phi_base = ev.sl_logphi.start

    def make_phi_site(t: int) -> smp.ScalarSite:
        idx = phi_base + t
        pending: dict[str, float] = {}

        if resid is not None:

            def delta(z: np.ndarray, prop: float) -> float:
                resid.ensure(z)
                old_val = z[idx]
                d_reg = resid.phi_delta(z, t, prop - float(old_val))
                old_local = ev.N_pois_trip(z, t) + ev.lvl3_trip(z, t) + ev.lvl22_trip(z, t)
                z[idx] = prop
                new_local = ev.N_pois_trip(z, t) + ev.lvl3_trip(z, t) + ev.lvl22_trip(z, t)
                z[idx] = old_val
                return d_reg + (new_local - old_local)

            def on_accept() -> None:
                resid.phi_commit()
                cache.invalidate("lvl21", "N_pois", "lvl22", "lvl3")

        else:

            def delta(z: np.ndarray, prop: float) -> float:
                old_local = ev.N_pois_trip(z, t) + ev.lvl3_trip(z, t) + ev.lvl22_trip(z, t)
                old_lvl21 = cache.get("lvl21", z)
                old_val = z[idx]
                z[idx] = prop
                new_local = ev.N_pois_trip(z, t) + ev.lvl3_trip(z, t) + ev.lvl22_trip(z, t)
                new_lvl21 = ev.comp_lvl21(z)
                z[idx] = old_val
                pending["lvl21"] = new_lvl21
                return (new_local - old_local) + (new_lvl21 - old_lvl21)

            def on_accept() -> None:
                cache.set("lvl21", pending["lvl21"])
                cache.invalidate("N_pois", "lvl22", "lvl3")

        return smp.ScalarSite(
            name=f"logphi[{graph.trip_ids[t]}]",
            idx=idx,
            delta=delta,
            on_accept=on_accept,
            init_scale=0.3,
        )

    for t in range(n):
        sites.append(make_phi_site(t))

    # Latent log MaxN means, by camera column.  Columns decouple across trips
    # unless the ROV sub-regression uses centered regressors.
    mu_base = ev.sl_logmu.start
    coupled_dst = cfg.rov_separate and cfg.center_logmu

    def make_mu_vec_site(ci: int, cam: str) -> smp.VectorSite:
        col_idx = mu_base + np.arange(n) * 4 + ci
        observed = graph.y_mask[:, ci]
        yv = np.where(observed, np.nan_to_num(graph.y[:, ci]), 0.0)

        def delta(z: np.ndarray, proposals: np.ndarray) -> np.ndarray:
            old = z[col_idx]
            with np.errstate(over="ignore"):
                d_pois = np.where(
                    observed,
                    yv * (proposals - old) - (np.exp(proposals) - np.exp(old)),
                    0.0,
                )
            rows_old = ev._lvl21_rows(z)
            z[col_idx] = proposals
            rows_new = ev._lvl21_rows(z)
            z[col_idx] = old
            return d_pois + (rows_new - rows_old)

        def on_accept(mask: np.ndarray) -> None:
            cache.invalidate("lvl21", "y_pois")
            if resid is not None:
                resid.invalidate()

        return smp.VectorSite(
            name=f"logmu:{cam}",
            idxs=col_idx,
            delta=delta,
            on_accept=on_accept,
            element_names=tuple(f"logmu[{tid},{cam}]" for tid in graph.trip_ids),
            init_scale=0.4,
        )

    for ci, cam in enumerate(CAMERAS):
        if coupled_dst and cam in ("D", "S", "T"):
            continue
        sites.append(make_mu_vec_site(ci, cam))

    if coupled_dst:

        def make_mu_block_site(t: int) -> smp.BlockSite:
            idxs = mu_base + t * 4 + np.arange(3)
            pending: dict[str, float] = {}

            if resid is not None:

                def delta(z: np.ndarray, props: np.ndarray) -> float:
                    resid.ensure(z)
                    old_vals = z[idxs].copy()
                    d_reg = resid.mu3_delta(z, t, props - old_vals)
                    old_local = ev.y_pois_trip(z, t)
                    z[idxs] = props
                    new_local = ev.y_pois_trip(z, t)
                    z[idxs] = old_vals
                    return d_reg + (new_local - old_local)

                def on_accept() -> None:
                    resid.mu3_commit()
                    cache.invalidate("lvl21", "y_pois")

            else:

                def delta(z: np.ndarray, props: np.ndarray) -> float:
                    old_local = ev.y_pois_trip(z, t)
                    old_lvl21 = cache.get("lvl21", z)
                    old_vals = z[idxs].copy()
                    z[idxs] = props
                    new_local = ev.y_pois_trip(z, t)
                    new_lvl21 = ev.comp_lvl21(z)
                    z[idxs] = old_vals
                    pending["lvl21"] = new_lvl21
                    return (new_local - old_local) + (new_lvl21 - old_lvl21)

                def on_accept() -> None:
                    cache.set("lvl21", pending["lvl21"])
                    cache.invalidate("y_pois")

            return smp.BlockSite(
                name=f"logmu_dst[{graph.trip_ids[t]}]",
                idxs=idxs,
                delta=delta,
                on_accept=on_accept,
                init_scale=0.3,
            )

        for t in range(n):
            sites.append(make_mu_block_site(t))

    if ev.m_tau1:
        tau1_idx = np.arange(ev.sl_tau1.start, ev.sl_tau1.stop)
        tr = graph.tau1_rows
        Nv = graph.N[tr]
        logr_tr = graph.log_r[tr] if cfg.include_ratio_offset else np.zeros(len(tr))
        pos_xi = ev.pop_pos["xi[1]"]
        pos_s1 = ev.pop_pos["sigma_x[1]"]

        def tau1_delta(z: np.ndarray, proposals: np.ndarray) -> np.ndarray:
            old = z[tau1_idx]
            with np.errstate(over="ignore"):
                d_pois = Nv * (proposals - old) - (np.exp(proposals) - np.exp(old))
            base = z[phi_base + tr] + z[pos_xi] - logr_tr
            s1 = math.exp(z[pos_s1])
            d_zeta = -0.5 * ((proposals - base) ** 2 - (old - base) ** 2) / (s1 * s1)
            return d_pois + d_zeta

        def tau1_accept(mask: np.ndarray) -> None:
            cache.invalidate("N_pois", "lvl22")

        sites.append(
            smp.VectorSite(
                name="logtau1",
                idxs=tau1_idx,
                delta=tau1_delta,
                on_accept=tau1_accept,
                element_names=tuple(f"logtau1[{graph.trip_ids[t]}]" for t in tr),
                init_scale=0.3,
            )
        )
    if ev.m_tau2:
        tau2_idx = np.arange(ev.sl_tau2.start, ev.sl_tau2.stop)
        mrr = ev.mr_rows
        mr_vals = ev.mr_vals
        pos_xi = ev.pop_pos["xi[1]"]
        pos_s2 = ev.pop_pos["sigma_x[1]" if cfg.reef_specific_sigma_x else "sigma_x[2]"]

        def tau2_delta(z: np.ndarray, proposals: np.ndarray) -> np.ndarray:
            old = z[tau2_idx]
            with np.errstate(over="ignore"):
                d_pois = mr_vals * (proposals - old) - (np.exp(proposals) - np.exp(old))
            base = z[phi_base + mrr] - z[pos_xi]
            s2 = math.exp(z[pos_s2])
            d_zeta = -0.5 * ((proposals - base) ** 2 - (old - base) ** 2) / (s2 * s2)
            return d_pois + d_zeta

        def tau2_accept(mask: np.ndarray) -> None:
            cache.invalidate("mr_pois", "lvl22")

        sites.append(
            smp.VectorSite(
                name="logtau2",
                idxs=tau2_idx,
                delta=tau2_delta,
                on_accept=tau2_accept,
                element_names=tuple(f"logtau2[{graph.trip_ids[t]}]" for t in mrr),
                init_scale=0.3,
            )
        )
    return sites


def _run_one_chain(args: tuple[ModelGraph, SamplerConfig, int]):
    graph, config, chain = args
    ev = graph.evaluator()
    rng = _chain_rng(config.seed, chain)
    state = _initialize_with_rng(graph, rng)
    z0 = ev.z_from_state(state)
    sites = _build_sites(graph, config)
    collect = _make_collect(graph)
    stored, acceptance = smp.run_chain(
        z0,
        sites,
        n_iterations=config.n_iterations,
        burn_in=config.burn_in,
        thin=config.thin,
        rng=rng,
        collect=collect,
        adapt_window=config.adapt_window,
    )
    return stored, acceptance


def run_mcmc_target(
    logpost, z0: np.ndarray, config: SamplerConfig, names: Sequence[str] | None = None
) -> PosteriorDraws:
    """Sample an arbitrary log density with the same chain machinery as run_mcmc.

    Intended for closed-form/quadrature oracle checks of the engine itself.
    """
    dim = len(z0)
    names = tuple(names) if names is not None else tuple(f"z[{i}]" for i in range(dim))
    all_stored = []
    acceptance: dict[str, float] = {}
    for chain in range(config.n_chains):
        rng = _chain_rng(config.seed, chain)
        sites = smp.sites_for_dense_target(logpost, dim, names)
        stored, acc = smp.run_chain(
            np.asarray(z0, dtype=float),
            sites,
            n_iterations=config.n_iterations,
            burn_in=config.burn_in,
            thin=config.thin,
            rng=rng,
            collect=lambda z: z.copy(),
            adapt_window=config.adapt_window,
        )
        all_stored.append(stored)
        for k, v in acc.items():
            acceptance[k] = acceptance.get(k, 0.0) + v / config.n_chains
    return PosteriorDraws(
        columns=names,
        matrix=np.vstack(all_stored),
        chain_id=np.repeat(np.arange(config.n_chains), config.draws_per_chain),
        acceptance=acceptance,
        n_chains=config.n_chains,
        seed=config.seed,
        pop_columns=names,
        trip_ids=(),
    )


def run_mcmc(graph: ModelGraph, config: SamplerConfig) -> PosteriorDraws:
    """Sample the posterior; deterministic in config.seed, chains independent."""
    columns, _ = _storage_layout(graph)
    results = pmap(
        _run_one_chain,
        [(graph, config, c) for c in range(config.n_chains)],
        workers=config.chain_workers,
    )
    matrix = np.vstack([stored for stored, _ in results])
    chain_id = np.repeat(np.arange(config.n_chains), config.draws_per_chain)
    acceptance: dict[str, float] = {}
    for _, acc in results:
        for name, rate in acc.items():
            acceptance[name] = acceptance.get(name, 0.0) + rate / config.n_chains
    pop_cols = tuple(c for c in columns if not c.startswith(("logphi[", "logmu[")))
    return PosteriorDraws(
        columns=columns,
        matrix=matrix,
        chain_id=chain_id,
        acceptance=acceptance,
        n_chains=config.n_chains,
        seed=config.seed,
        pop_columns=pop_cols,
        trip_ids=graph.trip_ids,
    )


# -- diagnostics --------------------------------------------------------------


def rhat(draws: PosteriorDraws, param: str) -> float:
    """Split-chain potential scale reduction factor."""
    if draws.n_chains < 2:
        raise InferenceError("rhat requires at least 2 chains")
    chains = draws.by_chain(param)
    half = chains.shape[1] // 2
    splits = np.vstack([chains[:, :half], chains[:, half : 2 * half]])
    L = splits.shape[1]
    means = splits.mean(axis=1)
    variances = splits.var(axis=1, ddof=1)
    W = variances.mean()
    B_over_n = means.var(ddof=1)
    if W == 0.0:
        return 1.0 if B_over_n == 0.0 else math.inf
    var_hat = (L - 1) / L * W + B_over_n
    # Values below 1 are sampling noise with no diagnostic meaning.
    return float(max(1.0, math.sqrt(var_hat / W)))


def ess(draws: PosteriorDraws, param: str) -> float:
    """Autocorrelation-time ESS with Geyer initial-positive-sequence truncation."""
    chains = draws.by_chain(param)
    M = chains.size
    if M < 100:
        raise InferenceError("ess requires at least 100 draws")
    if np.ptp(chains) == 0.0:
        warnings.warn("constant chain: effective sample size defined as the draw count")
        return float(M)
    total = 0.0
    for row in chains:
        L = len(row)
        x = row - row.mean()
        var = float(x @ x) / L
        if var == 0.0:
            total += float(L)
            continue
        nfft = 1 << (2 * L - 1).bit_length()
        f = np.fft.rfft(x, nfft)
        acov = np.fft.irfft(f * np.conj(f), nfft)[:L].real / L
        rho = acov / acov[0]
        # Sum paired autocorrelations until the first negative pair.
        tau = -1.0
        k = 0
        while 2 * k + 1 < L:
            pair = rho[2 * k] + rho[2 * k + 1]
            if pair < 0.0:
                break
            tau += 2.0 * pair
            k += 1
        tau = max(tau, 1.0)
        total += L / tau
    return float(total)


def prior_spec_for(graph: ModelGraph, column: str) -> PopParam:
    """Prior form behind a stored population column (tied cells share a prior)."""
    cell_map = slope_cell_columns(graph.config)
    name = cell_map.get(column, column)
    for p in graph.pop_params:
        if p.name == name:
            return p
    raise KeyError(f"no prior on record for column {column!r}")


def prior_posterior_shift(draws: PosteriorDraws, param: str, prior: PopParam) -> float:
    """1 minus the overlap coefficient between the posterior KDE and the prior.

    Both densities are compared on the prior's sampling scale (log for SDs and
    slopes, logit for correlations), where every prior is N(0, sd^2).
    """
    x = draws.column(param)
    if prior.transform == "log":
        if np.any(x <= 0):
            raise InferenceError(f"{param}: log-scale prior but nonpositive samples")
        x = np.log(x)
    elif prior.transform == "logit":
        if np.any((x <= 0) | (x >= 1)):
            raise InferenceError(f"{param}: logit-scale prior but samples outside (0,1)")
        x = np.log(x / (1.0 - x))
    elif prior.transform != "identity":
        raise InferenceError(f"unknown prior form {prior.transform!r}")
    sd = prior.prior_sd
    if np.ptp(x) == 0.0:
        return 1.0
    kde = gaussian_kde(x)
    lo = min(-4.0 * sd, float(x.min()) - 1.0)
    hi = max(4.0 * sd, float(x.max()) + 1.0)
    grid = np.linspace(lo, hi, 2001)
    post = kde(grid)
    pri = np.exp(-0.5 * (grid / sd) ** 2) / (sd * math.sqrt(2.0 * math.pi))
    overlap = float(np.trapezoid(np.minimum(post, pri), grid))
    return float(min(max(1.0 - overlap, 0.0), 1.0))


@dataclass(frozen=True)
class ImputedCell:
    trip_id: str
    camera: str
    counts: np.ndarray  # one predictive count per stored draw
    median: float
    lo80: float
    hi80: float


def impute_missing_y(
    graph: ModelGraph, draws: PosteriorDraws, seed: int = 0
) -> dict[tuple[str, str], ImputedCell]:
    """Posterior-predictive Poisson counts for every missing (trip, camera) cell."""
    rng = _chain_rng(seed, 0xD0)
    out: dict[tuple[str, str], ImputedCell] = {}
    for t, ci in np.argwhere(~graph.y_mask):
        tid = graph.trip_ids[t]
        cam = CAMERAS[ci]
        logmu = draws.column(f"logmu[{tid},{cam}]")
        lam = np.exp(np.clip(logmu, -745.0, math.log(1e15)))
        counts = rng.poisson(lam)
        lo, med, hi = np.quantile(counts, [0.10, 0.50, 0.90])
        out[(tid, cam)] = ImputedCell(
            trip_id=tid,
            camera=cam,
            counts=counts,
            median=float(med),
            lo80=float(lo),
            hi80=float(hi),
        )
    return out


def diagnostics_report(graph: ModelGraph, draws: PosteriorDraws) -> dict:
    """Per-parameter R-hat / ESS / prior shift plus the convergence verdict."""
    params: dict[str, dict[str, float]] = {}
    for name in draws.pop_columns:
        entry: dict[str, float] = {}
        if draws.n_chains >= 2:
            entry["rhat"] = rhat(draws, name)
        entry["ess"] = ess(draws, name)
        try:
            entry["prior_shift"] = prior_posterior_shift(
                draws, name, prior_spec_for(graph, name)
            )
        except (KeyError, InferenceError):
            pass
        params[name] = entry
    worst_rhat = max((e.get("rhat", 1.0) for e in params.values()), default=1.0)
    min_ess = min((e["ess"] for e in params.values()), default=float("inf"))
    converged = worst_rhat < RHAT_GATE and min_ess > ESS_GATE
    return {
        "parameters": params,
        "worst_rhat": worst_rhat,
        "min_ess": min_ess,
        "rhat_gate": RHAT_GATE,
        "ess_gate": ESS_GATE,
        "converged": bool(converged),
        "acceptance": draws.acceptance,
    }
