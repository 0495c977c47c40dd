"""Drift limits of the log-likelihood-ratio processes.

Conditioned on class ``i`` winning, each LLR process grows linearly; the
per-step drift ``l(i,j)`` combines the Kullback-Leibler divergence between
observation densities with the exponential tail rate of the conditional
absorption time.  Two model shapes admit exact limit tables (a shared
transient density, or per-class transient blocks); everything else is
covered by a Monte Carlo estimator of the same quantities.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components

from ._sim import class_mass_at_horizons, rng_stream
from .model import Categorical, ChainFacts, Gaussian, ModelSpec, chain_facts
from .posterior import ShapeMismatch, shared_transient_density, singleton_classes, transient_blocks


class LimitsError(Exception):
    pass


class UnsupportedPair(LimitsError):
    """KL between densities of different families is not defined here."""


class NoConvergence(LimitsError):
    """Tail-rate estimates still oscillating at the iteration cap."""


class InfiniteEverywhere(LimitsError):
    """Some pair has both an infinite KL and an infinite tail rate."""


class TooFewConditionalPaths(LimitsError):
    pass


def kl(density_a, density_b) -> float:
    """Exact Kullback-Leibler divergence of ``density_a`` from ``density_b``.

    Gaussian pairs use the closed form; categorical pairs the finite sum
    with the 0*log(0) = 0 convention, +inf when the support leaks.
    """
    if isinstance(density_a, Gaussian) and isinstance(density_b, Gaussian):
        va, vb = density_a.var, density_b.var
        return 0.5 * (va / vb + (density_a.mean - density_b.mean) ** 2 / vb - 1.0 + np.log(vb / va))
    if isinstance(density_a, Categorical) and isinstance(density_b, Categorical):
        pa = np.asarray(density_a.probs)
        pb = np.asarray(density_b.probs)
        if len(pa) != len(pb):
            raise UnsupportedPair("categorical alphabets differ")
        if np.any((pa > 0) & (pb == 0)):
            return np.inf
        mask = pa > 0
        return float(np.sum(pa[mask] * np.log(pa[mask] / pb[mask])))
    raise UnsupportedPair(f"no exact KL between {type(density_a).__name__} and {type(density_b).__name__}")


_VARRHO_TOL = 1e-9
_VARRHO_CAP = 10 ** 5


def varrho(model: ModelSpec, i: int, mode: str = "tail_estimate") -> float:
    """Exponential decay rate of the conditional absorption-time tail.

    ``tail_estimate`` iterates the tail ratio -log(P{theta > t+1 | i} /
    P{theta > t | i}) until consecutive estimates settle; the tails are
    computed by transient-mass propagation, which is cancellation-free.
    ``closed_form_geometric`` applies when the transient states feeding the
    class form a self-loop chain (no cycles besides self-loops): the rate
    is then set by the largest self-loop probability.
    """
    from .model import absorption_probabilities, absorption_vector

    trans_idx = model.transient
    if trans_idx.size == 0:
        return np.inf
    if mode == "closed_form_geometric":
        h = absorption_vector(model, i)
        feeding = trans_idx[h > 0]
        sub = model.trans[np.ix_(feeding, feeding)]
        hollow = sub.copy()
        np.fill_diagonal(hollow, 0.0)
        n_comp, _ = connected_components(hollow > 0, directed=True, connection="strong")
        if n_comp != feeding.size:
            raise LimitsError("closed_form_geometric needs a self-loop chain (acyclic off-diagonal structure)")
        smax = float(np.max(np.diag(sub)))
        return np.inf if smax == 0.0 else float(-np.log(smax))
    if mode != "tail_estimate":
        raise ValueError(f"unknown varrho mode {mode!r}")

    Q = model.trans[np.ix_(trans_idx, trans_idx)]
    h = absorption_vector(model, i)
    v = model.eta[trans_idx]
    prev_tail = float(v @ h)
    prev_rate = None
    for _ in range(_VARRHO_CAP):
        v = v @ Q
        tail = float(v @ h)
        if tail <= 0.0 or prev_tail <= 0.0:
            # a structural zero (bounded absorption time) hits 0 from a
            # healthy tail; hitting 0 from a denormal tail is underflow of
            # a still-unsettled estimate
            if prev_tail > 1e-250:
                return np.inf
            raise NoConvergence(f"tail for class {i} underflowed before the rate settled")
        rate = -np.log(tail / prev_tail)
        if prev_rate is not None and abs(rate - prev_rate) < _VARRHO_TOL:
            return float(rate)
        prev_rate = rate
        prev_tail = tail
    raise NoConvergence(f"tail rate for class {i} did not settle within {_VARRHO_CAP} steps")


@dataclass(frozen=True)
class LimitTable:
    """Drift limits and the quantities they are assembled from.

    ``q[i-1, j]`` is the KL divergence of class i's density from class j's
    (column 0: from the shared transient density; NaN when not applicable),
    ``q0[i-1, k-1]`` the divergence from block k's transient density (block
    models only), ``varrho`` the per-class tail rates, ``l[i-1, j]`` the
    drift of the (i, j) LLR, ``gamma`` the sets of alternatives whose pure
    KL branch is active, ``jstar`` all minimizing alternatives per class,
    and ``lstar`` the minimal drifts.  Monte Carlo tables carry standard
    errors and sample standard deviations instead of exact branch data.
    """

    l: np.ndarray
    lstar: np.ndarray
    jstar: tuple
    unique_jstar: tuple
    method: str
    q: np.ndarray | None = None
    q0: np.ndarray | None = None
    varrho: np.ndarray | None = None
    gamma: tuple | None = None
    se: np.ndarray | None = None
    sd: np.ndarray | None = None
    n_conditional: np.ndarray | None = None
    degenerate: bool = False

    @property
    def n_classes(self):
        return self.l.shape[0]


_TIE_RTOL = 1e-12


def _finish_table(l, method, **kw):
    M = l.shape[0]
    jstar = []
    unique = []
    lstar = np.empty(M)
    for i in range(1, M + 1):
        row = l[i - 1]
        choices = [j for j in range(M + 1) if j != i]
        vals = row[choices]
        best = np.min(vals)
        lstar[i - 1] = best
        slack = _TIE_RTOL * max(abs(best), 1.0)
        mins = [j for j, v in zip(choices, vals) if v == best or v <= best + slack]
        jstar.append(tuple(mins))
        unique.append(len(mins) == 1)
    return LimitTable(l=l, lstar=lstar, jstar=tuple(jstar), unique_jstar=tuple(unique), method=method, **kw)


def limits_example1(model: ModelSpec, facts: ChainFacts | None = None) -> LimitTable:
    """Exact limit table for the shared-transient-density shape."""
    f0 = shared_transient_density(model)
    if f0 is None or not singleton_classes(model):
        raise ShapeMismatch("exact limits need a shared transient density and singleton classes")
    M = model.n_classes
    class_states = [model.class_members(i)[0] for i in range(1, M + 1)]
    q = np.full((M, M + 1), np.nan)
    for i in range(1, M + 1):
        q[i - 1, 0] = kl(model.densities[class_states[i - 1]], f0)
        for j in range(1, M + 1):
            if j != i:
                q[i - 1, j] = kl(model.densities[class_states[i - 1]], model.densities[class_states[j - 1]])
    vr = np.array([varrho(model, i) for i in range(1, M + 1)])
    for i in range(1, M + 1):
        for j in range(1, M + 1):
            if j != i and not (min(vr[j - 1], q[i - 1, j]) < np.inf):
                raise InfiniteEverywhere(f"pair ({i},{j}): both q(i,j) and varrho(j) are infinite")
    l = np.full((M, M + 1), np.nan)
    gamma = []
    for i in range(1, M + 1):
        l[i - 1, 0] = q[i - 1, 0] + vr.min()
        g = set()
        for j in range(1, M + 1):
            if j == i:
                continue
            alt = q[i - 1, 0] + vr[j - 1]
            l[i - 1, j] = min(q[i - 1, j], alt)
            if q[i - 1, j] < alt:
                g.add(j)
        gamma.append(frozenset(g))
    return _finish_table(l, "example1", q=q, varrho=vr, gamma=tuple(gamma))


def limits_example2(model: ModelSpec, facts: ChainFacts | None = None) -> LimitTable:
    """Exact limit table for the per-class transient-block shape."""
    blocks = transient_blocks(model)
    if blocks is None or not singleton_classes(model):
        raise ShapeMismatch("exact limits need per-class transient blocks with block-constant densities")
    M = model.n_classes
    class_states = [model.class_members(i)[0] for i in range(1, M + 1)]
    block_density = [model.densities[blk[0]] for blk in blocks]
    q = np.full((M, M + 1), np.nan)
    q0 = np.empty((M, M))
    for i in range(1, M + 1):
        fi = model.densities[class_states[i - 1]]
        for j in range(1, M + 1):
            if j != i:
                q[i - 1, j] = kl(fi, model.densities[class_states[j - 1]])
            q0[i - 1, j - 1] = kl(fi, block_density[j - 1])
    vr = np.array([varrho(model, i) for i in range(1, M + 1)])
    for i in range(1, M + 1):
        for j in range(1, M + 1):
            if j != i and not (min(vr[j - 1], q[i - 1, j]) < np.inf):
                raise InfiniteEverywhere(f"pair ({i},{j}): both q(i,j) and varrho(j) are infinite")
    l = np.full((M, M + 1), np.nan)
    gamma = []
    for i in range(1, M + 1):
        l[i - 1, 0] = np.min(q0[i - 1] + vr)
        g = set()
        for j in range(1, M + 1):
            if j == i:
                continue
            alt = q0[i - 1, j - 1] + vr[j - 1]
            l[i - 1, j] = min(q[i - 1, j], alt)
            if q[i - 1, j] < alt:
                g.add(j)
        gamma.append(frozenset(g))
    return _finish_table(l, "example2", q=q, q0=q0, varrho=vr, gamma=tuple(gamma))


def exact_limits(model: ModelSpec, facts: ChainFacts | None = None) -> LimitTable:
    """Exact limits through whichever closed-form shape the model fits."""
    if shared_transient_density(model) is not None and singleton_classes(model):
        return limits_example1(model, facts)
    return limits_example2(model, facts)


def limits_mc(model: ModelSpec, n: int, paths: int, seed: int, min_conditional: int = 30) -> LimitTable:
    """Monte Carlo limit table: mean of Lambda_n(i,j)/n over paths that the
    class i absorbed, with standard errors.

    Conditioning is by partitioning unconditional simulations on the
    realized absorbing class, so the estimates are unbiased for the
    conditional laws.
    """
    stats = llr_convergence(model, [n], paths, seed, min_conditional=min_conditional)
    M = model.n_classes
    l = np.full((M, M + 1), np.nan)
    se = np.full((M, M + 1), np.nan)
    sd = np.full((M, M + 1), np.nan)
    counts = np.zeros(M, dtype=np.int64)
    for (i, j, h), (mean, sdev, cnt) in stats.items():
        l[i - 1, j] = mean
        sd[i - 1, j] = sdev
        se[i - 1, j] = sdev / np.sqrt(cnt)
        counts[i - 1] = cnt
    finite_sd = sd[np.isfinite(sd)]
    degenerate = bool(finite_sd.size and finite_sd.max() < 1e-14)
    return _finish_table(l, "mc", se=se, sd=sd, n_conditional=counts, degenerate=degenerate)


def llr_convergence(model: ModelSpec, horizons, paths: int, seed: int, min_conditional: int = 30):
    """Per-horizon statistics of Lambda_n(i,j)/n under each conditional law.

    Returns a dict mapping (i, j, horizon) to (mean, sd, count) over the
    simulated paths with realized absorbing class i.
    """
    horizons = sorted(int(h) for h in horizons)
    rng = rng_stream(seed, 0)
    snaps, mu, _theta = class_mass_at_horizons(model, horizons, paths, rng)
    M = model.n_classes
    out = {}
    for i in range(1, M + 1):
        sel = mu == i
        cnt = int(sel.sum())
        if cnt < min_conditional:
            raise TooFewConditionalPaths(
                f"only {cnt} of {paths} paths were absorbed by class {i} at horizon {horizons[-1]}"
            )
        for h_idx, h in enumerate(horizons):
            lac = snaps[h_idx][sel]
            for j in range(M + 1):
                if j == i:
                    continue
                vals = (lac[:, i] - lac[:, j]) / h
                out[(i, j, h)] = (float(vals.mean()), float(vals.std(ddof=1)), cnt)
    return out
