"""Stopping strategies and their threshold calibration.

Two rules are implemented.  The posterior-threshold rule stops once some
class posterior clears ``1/(1+A_i)`` and declares the posterior argmax;
equivalently its log-odds process crosses ``-log A_i``.  The LLR-threshold
rule stops once some class beats every alternative by the margins
``-log B_ij`` and declares the first class to manage it.  Threshold maps
turn cost parameters into ``A`` (minimizing the leading-order risk trade-
off) and error caps into ``B`` (guaranteeing feasibility).  The fine
constant ``sigma_i``, tied to the limiting threshold overshoot, can be
estimated either by crossing simulations or from the ladder-height
representation of the overshoot law.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from ._sim import HiddenSampler, llr_rule, pi_rule, rng_stream, run_batch
from .limits import LimitTable
from .model import ChainFacts, CostSpec, ModelSpec, chain_facts
from .posterior import (
    ShapeMismatch,
    init,
    llr_from_class_mass,
    shared_transient_density,
    singleton_classes,
    transient_blocks,
    update,
)


class StrategyError(Exception):
    pass


class BadLimit(StrategyError):
    """Threshold map needs a finite, positive drift limit."""


class NonUniqueJStar(StrategyError):
    """Overshoot analysis needs a unique slowest alternative."""


class FeasibilityWarning(UserWarning):
    pass


DEFAULT_MAX_HORIZON = 10 ** 6


@dataclass(frozen=True)
class StrategySpec:
    """A stopping rule: kind 'pi' with per-class thresholds ``A`` (> 0) or
    kind 'llr' with margin matrix ``B`` (entries in (0,1), indexed
    ``B[i-1, j]`` for class i against alternative j)."""

    kind: str
    A: np.ndarray | None = None
    B: np.ndarray | None = None
    max_horizon: int = DEFAULT_MAX_HORIZON

    def __post_init__(self):
        if self.kind == "pi":
            A = np.asarray(self.A, dtype=float)
            if np.any(A <= 0):
                raise StrategyError("pi-threshold strategy needs A_i > 0")
            object.__setattr__(self, "A", A)
        elif self.kind == "llr":
            B = np.asarray(self.B, dtype=float)
            off = ~np.eye(B.shape[0] + 1, dtype=bool)[1:, :]
            if B.shape[1] != B.shape[0] + 1 or np.any((B[off] <= 0) | (B[off] >= 1)):
                raise StrategyError("llr-threshold strategy needs 0 < B_ij < 1")
            object.__setattr__(self, "B", B)
        else:
            raise StrategyError(f"unknown strategy kind {self.kind!r}")
        if self.max_horizon < 1:
            raise StrategyError("max_horizon must be >= 1")

    def trigger(self):
        return pi_rule(self.A) if self.kind == "pi" else llr_rule(self.B)


@dataclass(frozen=True)
class Decision:
    """Outcome of running a strategy on one path."""

    tau: int
    d: int
    fired_by: int
    capped: bool
    phi: np.ndarray  # log-odds per class at tau
    lam: np.ndarray  # LLR matrix rows at tau
    overshoot: float | None = None  # Phi + log A of the firing class (pi rule)


class PathSource:
    """Lazily extended simulated path of hidden states and observations."""

    def __init__(self, model: ModelSpec, seed: int, stream=()):
        self.model = model
        self._sampler = HiddenSampler(model)
        self._rng = rng_stream(seed, *stream)
        y0 = int(self._sampler.initial(self._rng, 1)[0])
        self._y = [y0]
        self._x = []
        self.labels = np.asarray(model.classes)

    def observation(self, n):
        """The n-th observation (1-based), simulating forward as needed."""
        while len(self._x) < n:
            y = self._sampler.step(self._rng, np.array([self._y[-1]]))
            self._y.append(int(y[0]))
            self._x.append(self._sampler.observe(self._rng, y)[0])
        return self._x[n - 1]

    def state(self, t):
        while len(self._y) - 1 < t:
            self.observation(len(self._x) + 1)
        return self._y[t]

    @property
    def theta(self):
        """Absorption time among simulated steps so far (None if not yet)."""
        lab = self.labels[np.asarray(self._y)]
        hits = np.flatnonzero(lab > 0)
        return int(hits[0]) if hits.size else None

    @property
    def mu(self):
        t = self.theta
        return int(self.labels[self._y[t]]) if t is not None else None


def _as_observation_feed(path):
    if isinstance(path, PathSource):
        return path.observation
    seq = list(path)

    def feed(n):
        if n > len(seq):
            raise StrategyError("observation sequence exhausted before the rule fired")
        return seq[n - 1]

    return feed


def _run_single(model, path, spec: StrategySpec) -> Decision:
    feed = _as_observation_feed(path)
    trigger = spec.trigger()
    state = init(model)
    from .posterior import class_log_mass

    for n in range(1, spec.max_horizon + 1):
        x = feed(n)
        state = update(state, model, x)
        lac = state.log_alpha_class[None, :]
        fired, d, fired_by = trigger(lac)
        if fired[0]:
            view = llr_from_class_mass(lac[0], allow_zero_mass=True)
            over = None
            if spec.kind == "pi":
                k = int(fired_by[0])
                over = float(view.phi[k - 1] + np.log(spec.A[k - 1]))
            return Decision(tau=n, d=int(d[0]), fired_by=int(fired_by[0]), capped=False,
                            phi=view.phi, lam=view.lam, overshoot=over)
    view = llr_from_class_mass(state.log_alpha_class, allow_zero_mass=True)
    pis = state.pi_class[1:]
    return Decision(tau=spec.max_horizon, d=int(np.argmax(pis)) + 1, fired_by=0, capped=True,
                    phi=view.phi, lam=view.lam)


def run_pi_strategy(model: ModelSpec, path, A, max_horizon: int = DEFAULT_MAX_HORIZON) -> Decision:
    """Run the posterior-threshold rule on one path.

    ``path`` is a PathSource or a plain observation sequence.  Stops at the
    first n >= 1 where some class posterior exceeds 1/(1+A_i) and declares
    the posterior argmax (smallest index on ties); a capped decision
    carries the current argmax and ``capped=True``.
    """
    return _run_single(model, path, StrategySpec(kind="pi", A=np.asarray(A, dtype=float), max_horizon=max_horizon))


def run_llr_strategy(model: ModelSpec, path, B, max_horizon: int = DEFAULT_MAX_HORIZON) -> Decision:
    """Run the LLR-threshold rule on one path.

    Stops at the first n >= 1 where some class i satisfies
    ``Lambda_n(i,j) > -log B_ij`` for every alternative j (including the
    not-yet-absorbed alternative j = 0); ties go to the smallest index.
    """
    return _run_single(model, path, StrategySpec(kind="llr", B=np.asarray(B, dtype=float), max_horizon=max_horizon))


def _golden_min(fn, lo, hi, tol=1e-13, max_iter=500):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def risk_tradeoff(c_i, l_i, sigma_i, m):
    """The leading-order risk of threshold x: delay term plus error term."""

    def g(x):
        return c_i ** m * ((-np.log(x)) / l_i) ** m + sigma_i * x

    return g


def a_from_c(costs: CostSpec, limits: LimitTable, model: ModelSpec, sigma=None,
             facts: ChainFacts | None = None) -> np.ndarray:
    """Thresholds ``A_i`` minimizing the leading-order risk trade-off.

    For m = 1 the minimizer is the closed form ``c_i / (sigma_i l(i))``;
    for larger moment orders it is found by golden-section search over the
    log-threshold (the trade-off has a single interior minimum there).
    ``sigma`` defaults to the terminal weight of the slowest alternative,
    which corresponds to taking the overshoot factor as 1.
    """
    if facts is None:
        facts = chain_facts(model, costs)
    c_bar = facts.c_bar
    M = limits.n_classes
    lstar = limits.lstar
    if np.any(~np.isfinite(lstar)) or np.any(lstar <= 0):
        raise BadLimit(f"drift limits must be finite and positive, got {lstar}")
    if sigma is None:
        sigma = default_sigma(costs, limits, model)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise StrategyError("sigma must be positive")
    if np.any(c_bar <= 0):
        raise StrategyError("per-class stationary costs must be positive to calibrate A")
    m = costs.m_power
    if m == 1:
        return c_bar / (sigma * lstar)
    A = np.empty(M)
    for i in range(M):
        g = risk_tradeoff(c_bar[i], lstar[i], sigma[i], m)
        # search over u = -log x on (0, 690]; x in (1e-300, 1)
        u = _golden_min(lambda u: g(np.exp(-u)), 1e-12, 690.0)
        A[i] = np.exp(-u)
    return A


def default_sigma(costs: CostSpec, limits: LimitTable, model: ModelSpec) -> np.ndarray:
    """Per-class sigma when overshoot estimation is skipped: the terminal
    weight toward the slowest alternative (requires that weight to be
    unambiguous across tied alternatives)."""
    a = costs.terminal_weights(model)
    labels = np.asarray(model.classes)
    M = limits.n_classes
    out = np.empty(M)
    for i in range(1, M + 1):
        vals = set()
        for j in limits.jstar[i - 1]:
            if j == 0:
                v = np.unique(a[labels == 0, i - 1])
                if v.size != 1:
                    raise StrategyError("terminal weights differ across transient states: sigma default is ambiguous")
                vals.add(float(v[0]))
            else:
                vals.add(float(a[model.class_members(j)[0], i - 1]))
        if len(vals) != 1:
            raise StrategyError(f"tied slowest alternatives give different default sigmas for class {i}")
        out[i - 1] = vals.pop()
    return out


def b_from_rbar(costs: CostSpec, facts: ChainFacts, model: ModelSpec) -> np.ndarray:
    """Feasible LLR margins from per-state error caps.

    ``B[i-1, j] = min over class-j states of rbar[y, i] / nu_i``; running
    the LLR rule at these margins keeps every terminal loss within its cap.
    Values outside (0, 1) are kept but flagged with a FeasibilityWarning
    since the rule's error bound is vacuous there.
    """
    if costs.rbar is None:
        raise StrategyError("CostSpec.rbar is required to build B")
    rbar = costs.rbar
    M = model.n_classes
    labels = np.asarray(model.classes)
    B = np.full((M, M + 1), np.nan)
    for i in range(1, M + 1):
        for j in range(M + 1):
            if j == i:
                continue
            members = np.flatnonzero(labels == j)
            B[i - 1, j] = rbar[members, i - 1].min() / facts.nu[i - 1]
    off = [(i, j) for i in range(M) for j in range(M + 1) if j != i + 1]
    vals = np.array([B[i, j] for i, j in off])
    if np.any((vals <= 0) | (vals >= 1)):
        warnings.warn("some B_ij fall outside (0,1); error caps may be unenforceable", FeasibilityWarning)
    return B


@dataclass(frozen=True)
class SigmaEstimate:
    sigma: np.ndarray  # point estimate per requested class
    se: np.ndarray
    method: str
    detail: dict = field(default_factory=dict)


def _ladder_increment_fn(model: ModelSpec, limits: LimitTable, i: int):
    """The increment whose random walk drives class i's threshold crossing,
    together with the post-change sampling density (i.i.d. given class i)."""
    if limits.varrho is None:
        raise StrategyError("overshoot analysis needs an exact limit table, not a Monte Carlo one")
    if not singleton_classes(model):
        raise ShapeMismatch("overshoot analysis needs singleton classes")
    if not limits.unique_jstar[i - 1]:
        raise NonUniqueJStar(f"class {i} has tied slowest alternatives {limits.jstar[i - 1]}")
    j = limits.jstar[i - 1][0]
    fi = model.densities[model.class_members(i)[0]]
    f0 = shared_transient_density(model)
    if j != 0:
        fj = model.densities[model.class_members(j)[0]]

        def inc(x):
            return fi.log_pdf(x) - fj.log_pdf(x)

        return fi, inc
    if f0 is not None:
        rate = float(np.min(limits.varrho))

        def inc(x):
            return fi.log_pdf(x) - f0.log_pdf(x) + rate

        return fi, inc
    blocks = transient_blocks(model)
    if blocks is None:
        raise ShapeMismatch("overshoot analysis needs one of the closed-form shapes")
    fblk = model.densities[blocks[i - 1][0]]
    rate = float(limits.varrho[i - 1])

    def inc(x):
        return fi.log_pdf(x) - fblk.log_pdf(x) + rate

    return fi, inc


def estimate_sigma(model: ModelSpec, limits: LimitTable, costs: CostSpec, i: int, method: str,
                   seed: int, samples: int = 10 ** 5, a_small: float = 1e-3,
                   max_horizon: int = DEFAULT_MAX_HORIZON) -> SigmaEstimate:
    """Estimate ``sigma_i``, the limiting mean of ``a * exp(-overshoot)``.

    ``overshoot_mc`` runs the class-i posterior-threshold rule at a small
    threshold ``a_small`` on full simulated paths (restricted to those the
    class absorbed) and averages ``a * exp(-W)`` over the observed crossing
    overshoots ``W``.  ``renewal_mc`` samples the ascending ladder height S
    of the driving random walk under the post-change law and evaluates the
    stationary-overshoot functional ``a * E[1 - e^-S] / E[S]``; the lower
    integration limit of the overshoot law is taken at 0 for both kinds of
    slowest alternative.  Both estimators agree in the small-threshold
    limit; disagreement beyond joint noise flags a shape violation.
    """
    a_vec = default_sigma(costs, limits, model)
    a_i = a_vec[i - 1]
    if method == "renewal_mc":
        fi, inc = _ladder_increment_fn(model, limits, i)
        rng = rng_stream(seed, 7, i)
        heights = np.empty(samples)
        cap = 10 ** 6
        filled = 0
        walk = np.zeros(0)
        while filled < samples:
            batch = max(samples - filled, 1)
            s = np.zeros(batch)
            done = np.zeros(batch, dtype=bool)
            out = np.empty(batch)
            for _ in range(cap):
                x = fi.sample(rng, batch)
                s = s + np.asarray(inc(x))
                newly = (~done) & (s > 0)
                out[newly] = s[newly]
                done |= newly
                if done.all():
                    break
                # freeze finished walks so they stop accumulating
                s = np.where(done, 0.0, s)
            if not done.all():
                raise StrategyError("ladder time did not occur within the iteration cap")
            heights[filled:filled + batch] = out
            filled += batch
        u = 1.0 - np.exp(-heights)
        v = heights
        um, vm = u.mean(), v.mean()
        sigma = a_i * um / vm
        n = samples
        cov = np.cov(u, v, ddof=1)
        var_ratio = (cov[0, 0] / vm ** 2 + um ** 2 * cov[1, 1] / vm ** 4 - 2 * um * cov[0, 1] / vm ** 3) / n
        se = a_i * np.sqrt(max(var_ratio, 0.0))
        return SigmaEstimate(sigma=np.array([sigma]), se=np.array([se]), method=method,
                             detail={"mean_height": vm, "class": i})
    if method != "overshoot_mc":
        raise ValueError(f"unknown sigma method {method!r}")
    if not limits.unique_jstar[i - 1]:
        raise NonUniqueJStar(f"class {i} has tied slowest alternatives {limits.jstar[i - 1]}")
    M = model.n_classes
    others = [j for j in range(M + 1) if j != i]
    from .posterior import _logsumexp_rows

    # Paths absorbed elsewhere never cross class i's threshold; retire them
    # once the class-i log-odds are hopeless (recovery odds below e^-40).
    dead_level = -40.0

    def single_class_trigger(lac):
        phi_i = lac[:, i] - _logsumexp_rows(lac[:, others])
        crossed = phi_i > -np.log(a_small)
        dead = phi_i < dead_level
        fired = crossed | dead
        d = np.where(crossed, i, 0).astype(np.int64)
        return fired, d, d.copy()

    rng = rng_stream(seed, 8, i)
    out = run_batch(model, single_class_trigger, np.zeros(model.n_states), rng, samples, max_horizon)
    sel = (out.mu == i) & (out.d == i) & ~out.capped
    if sel.sum() < 30:
        raise StrategyError(f"too few class-{i} paths fired (got {int(sel.sum())})")
    lac = out.log_class_mass[sel]
    phi = lac[:, i] - _logsumexp_rows(lac[:, others])
    w = phi + np.log(a_small)
    vals = a_i * np.exp(-w)
    sigma = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(vals.size))
    return SigmaEstimate(sigma=np.array([sigma]), se=np.array([se]), method=method,
                         detail={"fired_fraction": float(sel.mean()), "class": i, "a_small": a_small})
