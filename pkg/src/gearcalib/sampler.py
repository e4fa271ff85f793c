"""Adaptive random-walk Metropolis-within-Gibbs over a flat parameter vector.

The engine is model-agnostic.  A site owns one or more coordinates of z and
supplies either `cond` (a conditional log density evaluated at the full
vector; the engine calls it at the current and proposed points) or `delta`
(the change in log density for a proposal, allowing callers to cache
expensive terms; `delta` may mutate z internally but must restore it before
returning).  Proposal scales adapt during burn-in toward standard acceptance
targets (0.44 scalar, 0.234 block) and are frozen afterwards, so the post
burn-in chain is a fixed-kernel Markov chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

TARGET_SCALAR = 0.44
TARGET_BLOCK = 0.234


@dataclass
class ScalarSite:
    name: str
    idx: int
    cond: Callable[[np.ndarray], float] | None = None
    delta: Callable[[np.ndarray, float], float] | None = None
    on_accept: Callable[[], None] | None = None
    target: float = TARGET_SCALAR
    init_scale: float = 0.5


@dataclass
class BlockSite:
    name: str
    idxs: np.ndarray
    cond: Callable[[np.ndarray], float] | None = None
    delta: Callable[[np.ndarray, np.ndarray], float] | None = None
    on_accept: Callable[[], None] | None = None
    target: float = TARGET_BLOCK
    init_scale: float = 0.3


@dataclass
class VectorSite:
    """Coordinates whose full conditionals are mutually independent given the rest.

    `delta(z, proposals)` returns the per-coordinate change in log density if
    coordinate k moved to proposals[k] with all other coordinates held at z.
    """

    name: str
    idxs: np.ndarray
    delta: Callable[[np.ndarray, np.ndarray], np.ndarray]
    on_accept: Callable[[np.ndarray], None] | None = None  # receives accept mask
    element_names: tuple[str, ...] = ()
    target: float = TARGET_SCALAR
    init_scale: float = 0.5


Site = ScalarSite | BlockSite | VectorSite


def _as_delta(d: float) -> float:
    return d if d == d else -math.inf  # NaN-safe


@dataclass
class _Adapt:
    log_scale: np.ndarray
    accepts: np.ndarray
    post_accepts: np.ndarray
    tries: int = 0
    batch: int = 0
    post_tries: int = 0


def run_chain(
    z0: np.ndarray,
    sites: Sequence[Site],
    n_iterations: int,
    burn_in: int,
    thin: int,
    rng: np.random.Generator,
    collect: Callable[[np.ndarray], np.ndarray],
    adapt_window: int = 50,
) -> tuple[np.ndarray, dict[str, float]]:
    """Run one chain; returns (stored draws, post burn-in acceptance ledger)."""
    z = np.array(z0, dtype=float, copy=True)
    adapts: list[_Adapt] = []
    for site in sites:
        shape = (len(site.idxs),) if isinstance(site, VectorSite) else ()
        adapts.append(
            _Adapt(
                log_scale=np.full(shape, math.log(site.init_scale)),
                accepts=np.zeros(shape),
                post_accepts=np.zeros(shape),
            )
        )

    # One bulk normal/uniform draw per iteration: fixed per-site slices keep
    # the stream layout (hence the chain) deterministic for a given seed.
    n_off = [0]
    u_off = [0]
    for site in sites:
        k = len(site.idxs) if not isinstance(site, ScalarSite) else 1
        n_off.append(n_off[-1] + k)
        u_off.append(u_off[-1] + (k if isinstance(site, VectorSite) else 1))
    total_normals = n_off[-1]
    total_uniforms = u_off[-1]

    first_row = collect(z)
    n_store = (n_iterations - burn_in) // thin
    stored = np.empty((n_store, first_row.shape[0]))
    row = 0

    for it in range(n_iterations):
        adapting = it < burn_in
        nbuf = rng.standard_normal(total_normals)
        with np.errstate(divide="ignore"):
            log_u = np.log(rng.random(total_uniforms))
        for si, (site, ad) in enumerate(zip(sites, adapts)):
            if isinstance(site, VectorSite):
                eps = nbuf[n_off[si] : n_off[si + 1]] * np.exp(ad.log_scale)
                proposals = z[site.idxs] + eps
                deltas = site.delta(z, proposals)
                deltas = np.where(np.isnan(deltas), -np.inf, deltas)
                accept_mask = deltas > log_u[u_off[si] : u_off[si + 1]]
                if accept_mask.any():
                    z[site.idxs[accept_mask]] = proposals[accept_mask]
                    if site.on_accept is not None:
                        site.on_accept(accept_mask)
                ad.accepts += accept_mask
                if not adapting:
                    ad.post_accepts += accept_mask
            else:
                scale = math.exp(float(ad.log_scale))
                lu = log_u[u_off[si]]
                if isinstance(site, ScalarSite):
                    prop = z[site.idx] + nbuf[n_off[si]] * scale
                    if site.delta is not None:
                        d = _as_delta(site.delta(z, prop))
                    else:
                        old_val = z[site.idx]
                        old_ld = _as_delta(site.cond(z))
                        z[site.idx] = prop
                        new_ld = _as_delta(site.cond(z))
                        z[site.idx] = old_val
                        d = new_ld - old_ld if new_ld > -math.inf else -math.inf
                    accept = d > lu
                    if accept:
                        z[site.idx] = prop
                        if site.on_accept is not None:
                            site.on_accept()
                else:
                    props = z[site.idxs] + nbuf[n_off[si] : n_off[si + 1]] * scale
                    if site.delta is not None:
                        d = _as_delta(site.delta(z, props))
                    else:
                        old_vals = z[site.idxs].copy()
                        old_ld = _as_delta(site.cond(z))
                        z[site.idxs] = props
                        new_ld = _as_delta(site.cond(z))
                        z[site.idxs] = old_vals
                        d = new_ld - old_ld if new_ld > -math.inf else -math.inf
                    accept = d > lu
                    if accept:
                        z[site.idxs] = props
                        if site.on_accept is not None:
                            site.on_accept()
                if accept:
                    ad.accepts += 1
                if not adapting:
                    ad.post_accepts += 1 if accept else 0

            ad.tries += 1
            if not adapting:
                ad.post_tries += 1
            if adapting and ad.tries % adapt_window == 0:
                ad.batch += 1
                rate = ad.accepts / adapt_window
                step = 1.5 / ad.batch**0.6
                ad.log_scale = np.clip(
                    ad.log_scale + step * (rate - site.target), -12.0, 6.0
                )
                ad.accepts = np.zeros_like(ad.accepts)

        if it >= burn_in and (it - burn_in + 1) % thin == 0:
            stored[row] = collect(z)
            row += 1

    acceptance: dict[str, float] = {}
    for site, ad in zip(sites, adapts):
        denom = max(ad.post_tries, 1)
        if isinstance(site, VectorSite):
            rates = ad.post_accepts / denom
            names = site.element_names or tuple(
                f"{site.name}[{k}]" for k in range(len(site.idxs))
            )
            for nm, r in zip(names, rates):
                acceptance[nm] = float(r)
        else:
            acceptance[site.name] = float(ad.post_accepts / denom)
    return stored, acceptance


def sites_for_dense_target(
    logpost: Callable[[np.ndarray], float], dim: int, names: Sequence[str] | None = None
) -> list[ScalarSite]:
    """One scalar site per coordinate, each conditioned on the full joint density."""
    names = list(names) if names is not None else [f"z[{i}]" for i in range(dim)]
    return [ScalarSite(name=names[i], idx=i, cond=logpost) for i in range(dim)]
