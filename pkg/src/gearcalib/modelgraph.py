"""Joint log-posterior for the camera/acoustic/mark-recapture calibration model family.

A model instance couples, per boat trip: Poisson MaxN counts per camera with
lognormal means, a Poisson acoustic count whose mean is the latent true
abundance deflated by the trip's pooled species ratio, an optional Poisson
mark-recapture level, and a lognormal abundance regression on boat and reef
size.  Configuration flags select members of the family, from the richest
variant (mark-recapture level, boat/reef effects on MaxN means, separate ROV
sub-regression) down to the default reduced variant used for calibration
formulae.

Priors are specified on the sampling scales: normal on log(sigma), log(slope)
and logit(rho), and normal on raw intercepts/effects.  `log_posterior`
evaluates them on those scales, so an unconstrained-scale sampler needs no
additional Jacobian terms.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import gammaln

from .dataset import CAMERAS, TripRecord

LOG_2PI = math.log(2.0 * math.pi)

DST = ("D", "S", "T")

#: The eight (reef size, camera) slope cells, in column-name order.
SLOPE_CELLS = tuple((j, cam) for cam in CAMERAS for j in (1, 2))

_DEFAULT_TIES = "|".join(f"{j}{cam}" for j, cam in SLOPE_CELLS)


class ModelConfigError(ValueError):
    """Configuration selects an inestimable or inconsistent model structure."""


class DomainError(ValueError):
    """A ParameterState violates a hard constraint of the model family."""


def _parse_ties(text: str) -> tuple[tuple[str, ...], ...]:
    groups = tuple(tuple(sorted(g.split("&"))) for g in text.split("|") if g)
    seen = [cell for g in groups for cell in g]
    expected = sorted(f"{j}{cam}" for j, cam in SLOPE_CELLS)
    if sorted(seen) != expected:
        raise ModelConfigError(f"slope_ties must partition {expected}, got {seen}")
    return tuple(sorted(groups))


@dataclass(frozen=True)
class ModelConfig:
    """Flags selecting one member of the model family.

    Defaults reproduce the reduced model used to derive calibration formulae:
    ratio-offset acoustic level, camera intercepts only, quadvariate
    exchangeable MaxN errors, centered abundance predictor, reef-specific
    abundance noise variances.
    """

    include_markrecapture: bool = False
    include_ratio_offset: bool = True
    mu_intercepts: str = "beta_only"  # none | beta_only | beta_plus_boat_plus_reef
    phi_intercept_beta0: bool = False
    rov_separate: bool = False
    correlation: str = "exchangeable"  # exchangeable | free
    slope_ties: str = _DEFAULT_TIES
    center_logphi: bool = True
    center_logmu: bool = False
    beta1_prior_sd: float = 2.0
    reef_specific_sigma_phi: bool = True
    reef_specific_sigma_x: bool = False

    def __post_init__(self) -> None:
        if self.mu_intercepts not in ("none", "beta_only", "beta_plus_boat_plus_reef"):
            raise ModelConfigError(f"bad mu_intercepts {self.mu_intercepts!r}")
        if self.correlation not in ("exchangeable", "free"):
            raise ModelConfigError(f"bad correlation {self.correlation!r}")
        if self.correlation == "free" and not self.rov_separate:
            raise ModelConfigError(
                "free correlation is only estimable with the trivariate MaxN block "
                "(rov_separate=true); the quadvariate variant requires exchangeable"
            )
        if self.beta1_prior_sd not in (2.0, 3.0):
            raise ModelConfigError("beta1_prior_sd must be 2 or 3")
        _parse_ties(self.slope_ties)

    @property
    def tie_groups(self) -> tuple[tuple[str, ...], ...]:
        return _parse_ties(self.slope_ties)

    @classmethod
    def final(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def comprehensive(cls) -> "ModelConfig":
        """Richest variant: mark-recapture level, full effect structure, ROV sub-regression."""
        return cls(
            include_markrecapture=True,
            mu_intercepts="beta_plus_boat_plus_reef",
            phi_intercept_beta0=True,
            rov_separate=True,
            center_logmu=True,
        )

    def to_text(self) -> str:
        def fmt(v: object) -> str:
            if isinstance(v, bool):
                return "true" if v else "false"
            if isinstance(v, float):
                return repr(v)
            return str(v)

        keys = [
            "include_markrecapture",
            "include_ratio_offset",
            "mu_intercepts",
            "phi_intercept_beta0",
            "rov_separate",
            "correlation",
            "slope_ties",
            "center_logphi",
            "center_logmu",
            "beta1_prior_sd",
            "reef_specific_sigma_phi",
            "reef_specific_sigma_x",
        ]
        return "".join(f"{k}={fmt(getattr(self, k))}\n" for k in keys)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kwargs: dict[str, object] = {}
        bools = {
            "include_markrecapture",
            "include_ratio_offset",
            "phi_intercept_beta0",
            "rov_separate",
            "center_logphi",
            "center_logmu",
            "reef_specific_sigma_phi",
            "reef_specific_sigma_x",
        }
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ModelConfigError(f"bad config line {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key in bools:
                if value not in ("true", "false"):
                    raise ModelConfigError(f"{key} must be true/false, got {value!r}")
                kwargs[key] = value == "true"
            elif key == "beta1_prior_sd":
                kwargs[key] = float(value)
            elif key in ("mu_intercepts", "correlation", "slope_ties"):
                kwargs[key] = value
            else:
                raise ModelConfigError(f"unknown config key {key!r}")
        return cls(**kwargs)  # type: ignore[arg-type]

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


@dataclass(frozen=True)
class PopParam:
    """One population-level scalar: its sampling-scale transform and prior SD."""

    name: str
    transform: str  # identity | log | logit
    prior_sd: float


def _pop_params(config: ModelConfig) -> tuple[PopParam, ...]:
    params: list[PopParam] = []
    add = params.append
    if config.phi_intercept_beta0:
        add(PopParam("beta0", "identity", 3.0))
    if config.mu_intercepts != "none":
        for cam in CAMERAS:
            add(PopParam(f"beta_y0[{cam}]", "identity", 3.0))
    add(PopParam("nu_x[1]", "identity", 3.0))
    add(PopParam("gamma_x[1]", "identity", 3.0))
    if config.mu_intercepts == "beta_plus_boat_plus_reef":
        for cam in DST:
            add(PopParam(f"nu_y[1,{cam}]", "identity", 3.0))
        gamma_cams = CAMERAS  # reef effect applies to the ROV regression too
        for cam in gamma_cams:
            add(PopParam(f"gamma_y[1,{cam}]", "identity", 3.0))
    for group in config.tie_groups:
        name = f"beta1[{group[0][0]},{group[0][1]}]" if len(group) == 1 else (
            "beta1[" + "&".join(group) + "]"
        )
        add(PopParam(name, "log", config.beta1_prior_sd))
    if config.rov_separate:
        for cam in DST:
            add(PopParam(f"beta1_mu[{cam}]", "log", config.beta1_prior_sd))
    if config.include_markrecapture:
        add(PopParam("xi[1]", "identity", 3.0))
    if config.correlation == "exchangeable":
        add(PopParam("rho", "logit", 2.0))
    else:
        for pair in ("D,S", "D,T", "S,T"):
            add(PopParam(f"rho[{pair}]", "logit", 2.0))
    add(PopParam("sigma_y", "log", 2.0))
    if config.rov_separate:
        add(PopParam("sigma_yR", "log", 2.0))
    if config.include_markrecapture:
        # Reef-specific: one free SD for large reefs (small-reef noise pinned at 0).
        # Otherwise one SD per count type (acoustic, mark-recapture).
        add(PopParam("sigma_x[1]", "log", 2.0))
        if not config.reef_specific_sigma_x:
            add(PopParam("sigma_x[2]", "log", 2.0))
    if config.reef_specific_sigma_phi:
        add(PopParam("sigma_phi[1]", "log", 2.0))
        add(PopParam("sigma_phi[2]", "log", 2.0))
    else:
        add(PopParam("sigma_phi", "log", 2.0))
    return tuple(params)


@dataclass
class ParameterState:
    """Constrained-scale parameter values: population block plus per-trip latents.

    Sum-to-zero effects are stored by their free component (for example
    ``nu_x[1]``); the paired component is reconstructed as its negative, so
    the constraint holds exactly by construction.
    """

    population: dict[str, float]
    logphi: np.ndarray  # (n,)
    logmu: np.ndarray  # (n, 4) in CAMERAS order
    logtau1: np.ndarray | None = None  # aligned with graph.tau1_rows
    logtau2: np.ndarray | None = None  # aligned with graph.mr_rows

    def copy(self) -> "ParameterState":
        return ParameterState(
            population=dict(self.population),
            logphi=self.logphi.copy(),
            logmu=self.logmu.copy(),
            logtau1=None if self.logtau1 is None else self.logtau1.copy(),
            logtau2=None if self.logtau2 is None else self.logtau2.copy(),
        )


@dataclass(frozen=True, eq=False)
class ModelGraph:
    """Immutable trip design plus the node list of the joint density.

    Node kinds: ``y:<trip>:<camera>`` (one per observed MaxN), ``N:<trip>``,
    ``mr:<trip>`` (when the mark-recapture level is included), ``trip:<trip>``
    (the trip's latent conditional: MaxN regression + count-offset noise +
    abundance regression), and ``prior:<param>``.
    """

    config: ModelConfig
    trip_ids: tuple[str, ...]
    reef_types: tuple[str, ...]
    boat_idx: np.ndarray  # (n,) values 0 (boat 1) / 1 (boat 2)
    reef_idx: np.ndarray  # (n,) values 0 (large) / 1 (small)
    y: np.ndarray  # (n, 4) float; NaN where missing
    y_mask: np.ndarray  # (n, 4) bool
    N: np.ndarray  # (n,) float
    Nmr: np.ndarray  # (n,) float; NaN where missing
    mr_mask: np.ndarray  # (n,) bool
    log_r: np.ndarray | None  # (n,) or None when the ratio offset is omitted
    pop_params: tuple[PopParam, ...]
    tau1_rows: np.ndarray  # trips carrying a latent acoustic log-mean
    node_ids: tuple[str, ...]
    _evaluator: list = field(default_factory=list, repr=False)

    @property
    def n_trips(self) -> int:
        return len(self.trip_ids)

    @property
    def mr_rows(self) -> np.ndarray:
        return np.flatnonzero(self.mr_mask)

    def param_names(self) -> tuple[str, ...]:
        return tuple(p.name for p in self.pop_params)

    def param(self, name: str) -> PopParam:
        for p in self.pop_params:
            if p.name == name:
                return p
        raise KeyError(name)

    def evaluator(self) -> "GraphEvaluator":
        if not self._evaluator:
            self._evaluator.append(GraphEvaluator(self))
        return self._evaluator[0]

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_evaluator"] = []
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)


def build_model(config: ModelConfig, trips: Sequence[TripRecord]) -> ModelGraph:
    """Assemble the joint-density graph for `config` over the given trips."""
    if not trips:
        raise ModelConfigError("no trips supplied")
    n = len(trips)
    trip_ids = tuple(t.trip_id for t in trips)
    boat_idx = np.array([t.boat - 1 for t in trips], dtype=np.int64)
    reef_idx = np.array([t.reef_size - 1 for t in trips], dtype=np.int64)

    y = np.full((n, 4), np.nan)
    for ti, t in enumerate(trips):
        for ci, cam in enumerate(CAMERAS):
            if t.maxn[cam] is not None:
                y[ti, ci] = float(t.maxn[cam])
    y_mask = ~np.isnan(y)

    N = np.array([float(t.acoustic_total) for t in trips])
    Nmr = np.array(
        [np.nan if t.markrecapture is None else float(t.markrecapture) for t in trips]
    )
    mr_mask = ~np.isnan(Nmr)

    if config.include_markrecapture:
        if not mr_mask.any():
            raise ModelConfigError(
                "mark-recapture level requested but no trip has a mark-recapture count"
            )
        if (reef_idx[mr_mask] != 0).any():
            bad = [trip_ids[i] for i in np.flatnonzero(mr_mask & (reef_idx == 1))]
            raise ModelConfigError(
                f"mark-recapture counts must occur at large reefs only; got {bad}"
            )

    log_r: np.ndarray | None = None
    if config.include_ratio_offset:
        missing = [t.trip_id for t in trips if t.pooled_ratio is None]
        if missing:
            raise ModelConfigError(
                f"ratio offset requested but pooled ratio missing on trips {missing}"
            )
        log_r = np.log(np.array([t.pooled_ratio for t in trips], dtype=float))

    if config.include_markrecapture:
        if config.reef_specific_sigma_x:
            tau1_rows = np.flatnonzero(reef_idx == 0)  # small-reef noise pinned to zero
        else:
            tau1_rows = np.arange(n)
    else:
        tau1_rows = np.arange(0)

    pop_params = _pop_params(config)

    node_ids: list[str] = []
    for ti, tid in enumerate(trip_ids):
        for ci, cam in enumerate(CAMERAS):
            if y_mask[ti, ci]:
                node_ids.append(f"y:{tid}:{cam}")
    node_ids.extend(f"N:{tid}" for tid in trip_ids)
    if config.include_markrecapture:
        node_ids.extend(f"mr:{trip_ids[i]}" for i in np.flatnonzero(mr_mask))
    node_ids.extend(f"trip:{tid}" for tid in trip_ids)
    node_ids.extend(f"prior:{p.name}" for p in pop_params)

    return ModelGraph(
        config=config,
        trip_ids=trip_ids,
        reef_types=tuple(t.reef_type for t in trips),
        boat_idx=boat_idx,
        reef_idx=reef_idx,
        y=y,
        y_mask=y_mask,
        N=N,
        Nmr=Nmr,
        mr_mask=mr_mask,
        log_r=log_r,
        pop_params=pop_params,
        tau1_rows=tau1_rows,
        node_ids=tuple(node_ids),
    )


def exchangeable_mvn_logdensity(residuals: Sequence[float], sigma: float, rho: float) -> float:
    """Log N(0, sigma^2 * P) with P having unit diagonal and constant off-diagonal rho.

    Uses the eigenvalue factorization of P: one eigenvalue 1+(d-1)rho and
    d-1 eigenvalues 1-rho, so no matrix decomposition is needed.
    """
    e = np.asarray(residuals, dtype=float)
    d = e.shape[-1]
    if d < 2:
        raise DomainError("exchangeable structure needs dimension >= 2")
    if not np.all(np.isfinite(e)):
        raise DomainError("residuals must be finite")
    if not sigma > 0:
        raise DomainError("sigma must be positive")
    lo = -1.0 / (d - 1)
    if not (lo < rho < 1.0):
        raise DomainError(f"rho={rho} outside positive-definite range ({lo}, 1)")
    lam1 = 1.0 + (d - 1) * rho
    lam2 = 1.0 - rho
    logdet = 2.0 * d * math.log(sigma) + math.log(lam1) + (d - 1) * math.log(lam2)
    a = 1.0 / lam2
    b = -rho / (lam2 * lam1)
    s = float(e.sum())
    quad = (a * float(e @ e) + b * s * s) / (sigma * sigma)
    return -0.5 * (d * LOG_2PI + logdet + quad)


class GraphEvaluator:
    """Vectorized density engine over a flat unconstrained parameter vector z.

    Layout: population scalars (sampling scale), then log phi (n), log mu
    (n x 4 row-major), then latent acoustic/mark-recapture log-means where the
    configuration carries them.  Component totals are split so samplers can
    recompute only the pieces a site touches.
    """

    COMPONENTS = ("y_pois", "N_pois", "mr_pois", "lvl21", "lvl22", "lvl3", "priors")

    def __init__(self, graph: ModelGraph):
        g = graph
        self.graph = g
        cfg = g.config
        n = g.n_trips
        self.n = n

        self.pop_names = [p.name for p in g.pop_params]
        self.pop_pos = {p.name: i for i, p in enumerate(g.pop_params)}
        self.P = len(g.pop_params)
        self.transforms = [p.transform for p in g.pop_params]
        self.prior_sd = np.array([p.prior_sd for p in g.pop_params])

        self.sl_pop = slice(0, self.P)
        self.sl_logphi = slice(self.P, self.P + n)
        self.sl_logmu = slice(self.P + n, self.P + n + 4 * n)
        off = self.P + 5 * n
        self.m_tau1 = len(g.tau1_rows)
        self.sl_tau1 = slice(off, off + self.m_tau1)
        off += self.m_tau1
        self.mr_rows = g.mr_rows
        self.m_tau2 = int(g.mr_mask.sum()) if cfg.include_markrecapture else 0
        self.sl_tau2 = slice(off, off + self.m_tau2)
        self.dim = off + self.m_tau2

        # Observed-data constants.
        self.yo_flat = np.flatnonzero(g.y_mask.ravel())
        self.yo_vals = g.y.ravel()[self.yo_flat]
        self.const_y = float(gammaln(self.yo_vals + 1.0).sum())
        self.const_N = float(gammaln(g.N + 1.0).sum())
        self.mr_vals = g.Nmr[g.mr_mask] if cfg.include_markrecapture else np.zeros(0)
        self.const_mr = float(gammaln(self.mr_vals + 1.0).sum()) if self.m_tau2 else 0.0

        # Slope-cell positions: (2, 4) matrix of pop indices, exp applied on use.
        cell_pos = np.zeros((2, 4), dtype=np.int64)
        for gi, group in enumerate(cfg.tie_groups):
            name = (
                f"beta1[{group[0][0]},{group[0][1]}]"
                if len(group) == 1
                else "beta1[" + "&".join(group) + "]"
            )
            pos = self.pop_pos[name]
            for cell in group:
                j = int(cell[0]) - 1
                ci = CAMERAS.index(cell[1])
                cell_pos[j, ci] = pos
        self.slope_cell_pos = cell_pos

        self.boat_sign = np.where(g.boat_idx == 0, 1.0, -1.0)
        self.reef_sign = np.where(g.reef_idx == 0, 1.0, -1.0)
        self.reef_idx = g.reef_idx
        self.cam_index = {cam: i for i, cam in enumerate(CAMERAS)}

        # In the reef-specific variant small-reef trips carry no latent noise:
        # their acoustic mean is a deterministic function of phi, the ratio and xi.
        self.tau1_det_rows = (
            np.flatnonzero(g.reef_idx == 1)
            if (cfg.include_markrecapture and cfg.reef_specific_sigma_x)
            else np.arange(0)
        )

        self.d_mvn = 3 if cfg.rov_separate else 4
        self.mvn_cols = np.arange(3) if cfg.rov_separate else np.arange(4)

        # Hot-path position arrays (fancy indexing beats per-call dict lookups).
        pos = self.pop_pos
        self.pos_beta0 = pos.get("beta0")
        self.pos_beta_y0 = (
            np.array([pos[f"beta_y0[{c}]"] for c in CAMERAS])
            if cfg.mu_intercepts != "none"
            else None
        )
        if cfg.mu_intercepts == "beta_plus_boat_plus_reef":
            self.pos_nu_y = np.array([pos[f"nu_y[1,{c}]"] for c in DST])
            self.pos_gamma_y = np.array([pos[f"gamma_y[1,{c}]"] for c in CAMERAS])
        else:
            self.pos_nu_y = None
            self.pos_gamma_y = None
        self.pos_beta1_mu = (
            np.array([pos[f"beta1_mu[{c}]"] for c in DST]) if cfg.rov_separate else None
        )
        self.pos_rho = pos.get("rho")
        self.pos_rho_free = (
            np.array([pos["rho[D,S]"], pos["rho[D,T]"], pos["rho[S,T]"]])
            if cfg.correlation == "free"
            else None
        )
        self.pos_sigma_y = pos["sigma_y"]
        self.pos_sigma_yR = pos.get("sigma_yR")
        self.pos_xi = pos.get("xi[1]")
        self.pos_sigma_x1 = pos.get("sigma_x[1]")
        self.pos_sigma_x2 = pos.get(
            "sigma_x[1]" if cfg.reef_specific_sigma_x else "sigma_x[2]"
        )
        if cfg.reef_specific_sigma_phi:
            self.pos_sigma_phi = np.array([pos["sigma_phi[1]"], pos["sigma_phi[2]"]])
        else:
            self.pos_sigma_phi = np.array([pos["sigma_phi"], pos["sigma_phi"]])
        self.pos_nu_x = pos["nu_x[1]"]
        self.pos_gamma_x = pos["gamma_x[1]"]

        # Per-trip constants for scalar likelihood lookups.
        self._trip_y_vals = [g.y[t][g.y_mask[t]] for t in range(n)]
        self._trip_y_cols = [np.flatnonzero(g.y_mask[t]) for t in range(n)]
        self._trip_y_const = [float(gammaln(v + 1.0).sum()) for v in self._trip_y_vals]
        self._gammaln_N = gammaln(g.N + 1.0)
        self._logr = g.log_r if g.log_r is not None else np.zeros(n)
        self._tau1_pos_of_trip = np.full(n, -1, dtype=np.int64)
        for j, t in enumerate(g.tau1_rows):
            self._tau1_pos_of_trip[t] = j
        self._mr_pos_of_trip = np.full(n, -1, dtype=np.int64)
        for j, t in enumerate(self.mr_rows):
            self._mr_pos_of_trip[t] = j
        self._det_set = set(int(t) for t in self.tau1_det_rows)

    # -- state <-> z ---------------------------------------------------------

    def z_from_state(self, state: ParameterState) -> np.ndarray:
        z = np.empty(self.dim)
        for i, p in enumerate(self.graph.pop_params):
            v = state.population[p.name]
            if p.transform == "identity":
                z[i] = v
            elif p.transform == "log":
                z[i] = math.log(v)
            else:
                z[i] = math.log(v / (1.0 - v))
        z[self.sl_logphi] = state.logphi
        z[self.sl_logmu] = state.logmu.ravel()
        if self.m_tau1:
            z[self.sl_tau1] = state.logtau1
        if self.m_tau2:
            z[self.sl_tau2] = state.logtau2
        return z

    def state_from_z(self, z: np.ndarray) -> ParameterState:
        pop = {}
        for i, p in enumerate(self.graph.pop_params):
            if p.transform == "identity":
                pop[p.name] = float(z[i])
            elif p.transform == "log":
                pop[p.name] = math.exp(z[i])
            else:
                pop[p.name] = 1.0 / (1.0 + math.exp(-z[i]))
        return ParameterState(
            population=pop,
            logphi=z[self.sl_logphi].copy(),
            logmu=z[self.sl_logmu].reshape(self.n, 4).copy(),
            logtau1=z[self.sl_tau1].copy() if self.m_tau1 else None,
            logtau2=z[self.sl_tau2].copy() if self.m_tau2 else None,
        )

    def _p(self, z: np.ndarray, name: str) -> float:
        return float(z[self.pop_pos[name]])

    def _pc(self, z: np.ndarray, name: str, default: float = 0.0) -> float:
        """Constrained value of a population parameter, 0 when absent."""
        pos = self.pop_pos.get(name)
        if pos is None:
            return default
        t = self.transforms[pos]
        v = float(z[pos])
        if t == "log":
            return math.exp(v)
        if t == "logit":
            return 1.0 / (1.0 + math.exp(-v))
        return v

    # -- component totals and per-row pieces ----------------------------------

    def comp_y_pois(self, z: np.ndarray) -> float:
        lm = z[self.sl_logmu][self.yo_flat]
        return float(np.dot(self.yo_vals, lm) - np.exp(lm).sum()) - self.const_y

    def y_pois_trip(self, z: np.ndarray, t: int) -> float:
        cols = self._trip_y_cols[t]
        if not len(cols):
            return 0.0
        lm = z[self.sl_logmu.start + 4 * t + cols]
        yv = self._trip_y_vals[t]
        return float(np.dot(yv, lm) - np.exp(lm).sum()) - self._trip_y_const[t]

    def _acoustic_logmean(self, z: np.ndarray) -> np.ndarray:
        cfg = self.graph.config
        logphi = z[self.sl_logphi]
        offset = self.graph.log_r if cfg.include_ratio_offset else None
        if not cfg.include_markrecapture:
            lt = logphi.copy()
            if offset is not None:
                lt = lt - offset
            return lt
        lt = np.empty(self.n)
        if self.m_tau1:
            lt[self.graph.tau1_rows] = z[self.sl_tau1]
        if len(self.tau1_det_rows):
            xi1 = float(z[self.pos_xi])
            det = logphi[self.tau1_det_rows] + xi1
            if offset is not None:
                det = det - offset[self.tau1_det_rows]
            lt[self.tau1_det_rows] = det
        return lt

    def comp_N_pois(self, z: np.ndarray) -> float:
        lt = self._acoustic_logmean(z)
        with np.errstate(over="ignore"):
            val = float(np.dot(self.graph.N, lt) - np.exp(lt).sum()) - self.const_N
        return val

    def N_pois_trip(self, z: np.ndarray, t: int) -> float:
        cfg = self.graph.config
        if not cfg.include_markrecapture:
            lt = z[self.sl_logphi.start + t]
            if cfg.include_ratio_offset:
                lt -= self._logr[t]
        elif t in self._det_set:
            lt = z[self.sl_logphi.start + t] + z[self.pos_xi]
            if cfg.include_ratio_offset:
                lt -= self._logr[t]
        else:
            lt = z[self.sl_tau1.start + self._tau1_pos_of_trip[t]]
        lt = float(lt)
        return self.graph.N[t] * lt - math.exp(min(lt, 700.0)) - self._gammaln_N[t]

    def comp_mr_pois(self, z: np.ndarray) -> float:
        if not self.m_tau2:
            return 0.0
        lt = z[self.sl_tau2]
        with np.errstate(over="ignore"):
            return float(np.dot(self.mr_vals, lt) - np.exp(lt).sum()) - self.const_mr

    def _phi_tilde(self, z: np.ndarray) -> np.ndarray:
        logphi = z[self.sl_logphi]
        if self.graph.config.center_logphi:
            return logphi - logphi.mean()
        return logphi

    def lvl21_residuals(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        """Residuals of the MaxN regressions: the MVN block (n, d) and the ROV row.

        Single source of truth for the regression predictions; both the row
        densities and the samplers' incremental updates derive from it.
        """
        cfg = self.graph.config
        logmu = z[self.sl_logmu].reshape(self.n, 4)
        phit = self._phi_tilde(z)
        B1 = np.exp(z[self.slope_cell_pos])  # (2,4) per-cell slopes
        slopes = B1[self.reef_idx]  # (n,4)

        pred = slopes * phit[:, None]
        if self.pos_beta_y0 is not None:
            pred += z[self.pos_beta_y0][None, :]
        if self.pos_nu_y is not None:
            pred[:, :3] += self.boat_sign[:, None] * z[self.pos_nu_y][None, :]
            pred += self.reef_sign[:, None] * z[self.pos_gamma_y][None, :]

        if not cfg.rov_separate:
            return logmu - pred, None

        E = logmu[:, :3] - pred[:, :3]
        mu_reg = logmu[:, :3]
        if cfg.center_logmu:
            mu_reg = mu_reg - mu_reg.mean(axis=0, keepdims=True)
        b1mu = np.exp(z[self.pos_beta1_mu])
        predR = slopes[:, 3] * phit + mu_reg @ b1mu
        if self.pos_beta_y0 is not None:
            predR = predR + z[self.pos_beta_y0[3]]
        if self.pos_gamma_y is not None:
            predR = predR + self.reef_sign * z[self.pos_gamma_y[3]]
        return E, logmu[:, 3] - predR

    def _lvl21_rows(self, z: np.ndarray) -> np.ndarray:
        """Per-trip MaxN regression log density (MVN block plus ROV row where split)."""
        cfg = self.graph.config
        E, resR = self.lvl21_residuals(z)
        sigma_y = math.exp(z[self.pos_sigma_y])
        if cfg.correlation == "exchangeable":
            rho = 1.0 / (1.0 + math.exp(-z[self.pos_rho]))
            rows = _exch_rows(E, sigma_y, rho)
        else:
            rf = 1.0 / (1.0 + np.exp(-z[self.pos_rho_free]))
            R = np.array([[1.0, rf[0], rf[1]], [rf[0], 1.0, rf[2]], [rf[1], rf[2], 1.0]])
            rows = _dense_mvn_rows(E, sigma_y, R)
        if resR is not None:
            log_syR = float(z[self.pos_sigma_yR])
            sigma_yR = math.exp(log_syR)
            rows = rows - 0.5 * (LOG_2PI + 2.0 * log_syR + (resR / sigma_yR) ** 2)
        return rows

    def comp_lvl21(self, z: np.ndarray) -> float:
        return float(self._lvl21_rows(z).sum())

    def _lvl22_rows(self, z: np.ndarray) -> np.ndarray:
        """Per-trip count-offset noise density (zero array when the level is collapsed)."""
        cfg = self.graph.config
        rows = np.zeros(self.n)
        if not cfg.include_markrecapture:
            return rows
        logphi = z[self.sl_logphi]
        xi1 = float(z[self.pos_xi])
        if self.m_tau1:
            tr = self.graph.tau1_rows
            zeta1 = z[self.sl_tau1] - logphi[tr] - xi1
            if cfg.include_ratio_offset:
                zeta1 = zeta1 + self.graph.log_r[tr]
            log_s1 = float(z[self.pos_sigma_x1])
            s1 = math.exp(log_s1)
            rows[tr] += -0.5 * (LOG_2PI + 2.0 * log_s1 + (zeta1 / s1) ** 2)
        if self.m_tau2:
            mrr = self.mr_rows
            # xi[2] = -xi[1] by the sum-to-zero reparameterization.
            zeta2 = z[self.sl_tau2] - logphi[mrr] + xi1
            log_s2 = float(z[self.pos_sigma_x2])
            s2 = math.exp(log_s2)
            rows[mrr] += -0.5 * (LOG_2PI + 2.0 * log_s2 + (zeta2 / s2) ** 2)
        return rows

    def lvl22_trip(self, z: np.ndarray, t: int) -> float:
        """Scalar count-offset noise terms for one trip."""
        cfg = self.graph.config
        if not cfg.include_markrecapture:
            return 0.0
        total = 0.0
        logphi_t = float(z[self.sl_logphi.start + t])
        xi1 = float(z[self.pos_xi])
        p1 = self._tau1_pos_of_trip[t]
        if p1 >= 0:
            zeta1 = float(z[self.sl_tau1.start + p1]) - logphi_t - xi1
            if cfg.include_ratio_offset:
                zeta1 += self._logr[t]
            log_s1 = float(z[self.pos_sigma_x1])
            total += -0.5 * (LOG_2PI + 2.0 * log_s1 + (zeta1 / math.exp(log_s1)) ** 2)
        p2 = self._mr_pos_of_trip[t]
        if p2 >= 0:
            zeta2 = float(z[self.sl_tau2.start + p2]) - logphi_t + xi1
            log_s2 = float(z[self.pos_sigma_x2])
            total += -0.5 * (LOG_2PI + 2.0 * log_s2 + (zeta2 / math.exp(log_s2)) ** 2)
        return total

    def comp_lvl22(self, z: np.ndarray) -> float:
        if not self.graph.config.include_markrecapture:
            return 0.0
        return float(self._lvl22_rows(z).sum())

    def _lvl3_rows(self, z: np.ndarray) -> np.ndarray:
        logphi = z[self.sl_logphi]
        mean = self.boat_sign * z[self.pos_nu_x] + self.reef_sign * z[self.pos_gamma_x]
        if self.pos_beta0 is not None:
            mean = mean + z[self.pos_beta0]
        delta = logphi - mean
        log_s = z[self.pos_sigma_phi][self.reef_idx]
        return -0.5 * (LOG_2PI + 2.0 * log_s + (delta * np.exp(-log_s)) ** 2)

    def lvl3_trip(self, z: np.ndarray, t: int) -> float:
        """Scalar abundance-regression term for one trip."""
        mean = self.boat_sign[t] * z[self.pos_nu_x] + self.reef_sign[t] * z[self.pos_gamma_x]
        if self.pos_beta0 is not None:
            mean += z[self.pos_beta0]
        delta = float(z[self.sl_logphi.start + t]) - mean
        log_s = float(z[self.pos_sigma_phi[self.reef_idx[t]]])
        return -0.5 * (LOG_2PI + 2.0 * log_s + (delta / math.exp(log_s)) ** 2)

    def comp_lvl3(self, z: np.ndarray) -> float:
        return float(self._lvl3_rows(z).sum())

    def comp_priors(self, z: np.ndarray) -> float:
        zp = z[self.sl_pop]
        return float(
            (-0.5 * LOG_2PI - np.log(self.prior_sd) - 0.5 * (zp / self.prior_sd) ** 2).sum()
        )

    def prior_term(self, pos: int, value: float) -> float:
        sd = self.prior_sd[pos]
        return -0.5 * LOG_2PI - math.log(sd) - 0.5 * (value / sd) ** 2

    def total(self, z: np.ndarray) -> float:
        return (
            self.comp_y_pois(z)
            + self.comp_N_pois(z)
            + self.comp_mr_pois(z)
            + self.comp_lvl21(z)
            + self.comp_lvl22(z)
            + self.comp_lvl3(z)
            + self.comp_priors(z)
        )

    # -- per-node reporting path ----------------------------------------------

    def node_values(self, z: np.ndarray) -> dict[str, float]:
        g = self.graph
        out: dict[str, float] = {}
        logmu = z[self.sl_logmu].reshape(self.n, 4)
        for ti, tid in enumerate(g.trip_ids):
            for ci, cam in enumerate(CAMERAS):
                if g.y_mask[ti, ci]:
                    lm = logmu[ti, ci]
                    yv = g.y[ti, ci]
                    out[f"y:{tid}:{cam}"] = float(
                        yv * lm - math.exp(min(lm, 700.0)) - gammaln(yv + 1.0)
                    )
        lt = self._acoustic_logmean(z)
        for ti, tid in enumerate(g.trip_ids):
            out[f"N:{tid}"] = float(
                g.N[ti] * lt[ti] - math.exp(min(lt[ti], 700.0)) - gammaln(g.N[ti] + 1.0)
            )
        if self.m_tau2:
            lt2 = z[self.sl_tau2]
            for pos, ti in enumerate(self.mr_rows):
                out[f"mr:{g.trip_ids[ti]}"] = float(
                    self.mr_vals[pos]
                    * lt2[pos]
                    - math.exp(min(lt2[pos], 700.0))
                    - gammaln(self.mr_vals[pos] + 1.0)
                )
        trip_rows = self._lvl21_rows(z) + self._lvl22_rows(z) + self._lvl3_rows(z)
        for ti, tid in enumerate(g.trip_ids):
            out[f"trip:{tid}"] = float(trip_rows[ti])
        for i, p in enumerate(g.pop_params):
            out[f"prior:{p.name}"] = self.prior_term(i, float(z[i]))
        return out


def _exch_rows(E: np.ndarray, sigma: float, rho: float) -> np.ndarray:
    """Vectorized exchangeable-MVN log density for each residual row of E."""
    d = E.shape[1]
    lam1 = 1.0 + (d - 1) * rho
    lam2 = 1.0 - rho
    if lam1 <= 0 or lam2 <= 0 or sigma <= 0:
        return np.full(E.shape[0], -np.inf)
    logdet = 2.0 * d * math.log(sigma) + math.log(lam1) + (d - 1) * math.log(lam2)
    a = 1.0 / lam2
    b = -rho / (lam2 * lam1)
    s = E.sum(axis=1)
    quad = (a * (E * E).sum(axis=1) + b * s * s) / (sigma * sigma)
    return -0.5 * (d * LOG_2PI + logdet + quad)


def _dense_mvn_rows(E: np.ndarray, sigma: float, R: np.ndarray) -> np.ndarray:
    """Row-wise zero-mean MVN log density with covariance sigma^2 R (free correlations)."""
    d = E.shape[1]
    sign, logdet_r = np.linalg.slogdet(R)
    if sign <= 0 or sigma <= 0:
        return np.full(E.shape[0], -np.inf)
    Rinv = np.linalg.inv(R)
    quad = np.einsum("ni,ij,nj->n", E, Rinv, E) / (sigma * sigma)
    logdet = 2.0 * d * math.log(sigma) + logdet_r
    return -0.5 * (d * LOG_2PI + logdet + quad)


def _validate_state(graph: ModelGraph, state: ParameterState) -> None:
    names = set(graph.param_names())
    got = set(state.population)
    if names != got:
        raise DomainError(f"state parameters {sorted(got)} != expected {sorted(names)}")
    for p in graph.pop_params:
        v = state.population[p.name]
        if not np.isfinite(v):
            raise DomainError(f"{p.name} is not finite")
        if p.transform == "log" and not v > 0:
            raise DomainError(f"{p.name}={v} must be positive")
        if p.transform == "logit" and not (0.0 < v < 1.0):
            raise DomainError(f"{p.name}={v} must lie strictly inside (0, 1)")
    n = graph.n_trips
    if state.logphi.shape != (n,) or not np.all(np.isfinite(state.logphi)):
        raise DomainError("logphi must be finite with one entry per trip")
    if state.logmu.shape != (n, 4) or not np.all(np.isfinite(state.logmu)):
        raise DomainError("logmu must be finite with shape (n_trips, 4)")
    ev = graph.evaluator()
    if ev.m_tau1:
        if state.logtau1 is None or state.logtau1.shape != (ev.m_tau1,):
            raise DomainError("logtau1 missing or mis-shaped for this configuration")
    if ev.m_tau2:
        if state.logtau2 is None or state.logtau2.shape != (ev.m_tau2,):
            raise DomainError("logtau2 missing or mis-shaped for this configuration")


def log_posterior(graph: ModelGraph, state: ParameterState) -> float:
    """Sum of all node log densities at a constrained-scale state.

    Raises DomainError on constraint violations; -inf is reserved for
    boundary evaluations reached through the sampler's unconstrained scale.
    """
    _validate_state(graph, state)
    ev = graph.evaluator()
    return ev.total(ev.z_from_state(state))


def sub_log_likelihood(graph: ModelGraph, state: ParameterState, node_set: Iterable[str]) -> float:
    """Partial sum of node log densities; a partition of nodes sums to log_posterior."""
    _validate_state(graph, state)
    ev = graph.evaluator()
    values = ev.node_values(ev.z_from_state(state))
    total = 0.0
    for node in node_set:
        if node not in values:
            raise KeyError(f"unknown node id {node!r}")
        total += values[node]
    return total


def full_effects(graph: ModelGraph, state: ParameterState) -> dict[str, float]:
    """Expand sum-to-zero effects to both components (exact by construction)."""
    out: dict[str, float] = {}
    pop = state.population
    out["nu_x[1]"] = pop["nu_x[1]"]
    out["nu_x[2]"] = -pop["nu_x[1]"]
    out["gamma_x[1]"] = pop["gamma_x[1]"]
    out["gamma_x[2]"] = -pop["gamma_x[1]"]
    if graph.config.include_markrecapture:
        out["xi[1]"] = pop["xi[1]"]
        out["xi[2]"] = -pop["xi[1]"]
    if graph.config.mu_intercepts == "beta_plus_boat_plus_reef":
        for cam in DST:
            out[f"nu_y[1,{cam}]"] = pop[f"nu_y[1,{cam}]"]
            out[f"nu_y[2,{cam}]"] = -pop[f"nu_y[1,{cam}]"]
        for cam in CAMERAS:
            out[f"gamma_y[1,{cam}]"] = pop[f"gamma_y[1,{cam}]"]
            out[f"gamma_y[2,{cam}]"] = -pop[f"gamma_y[1,{cam}]"]
    return out


def slope_cell_columns(config: ModelConfig) -> dict[str, str]:
    """Map per-cell column names beta1[j,cam] to their (possibly tied) parameter names."""
    mapping: dict[str, str] = {}
    for group in config.tie_groups:
        pname = (
            f"beta1[{group[0][0]},{group[0][1]}]"
            if len(group) == 1
            else "beta1[" + "&".join(group) + "]"
        )
        for cell in group:
            mapping[f"beta1[{cell[0]},{cell[1]}]"] = pname
    return mapping
