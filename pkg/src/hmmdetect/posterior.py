"""Log-space forward recursion for the posterior of the hidden chain.

The forward weights ``alpha_n(y)`` (joint density of the observations and
``Y_n = y``) are carried in log space up to a common additive constant,
re-centered every step so products over thousands of steps cannot
under/overflow.  Class aggregates, the pairwise log-likelihood-ratio
processes, the log-odds process, and their minima are all derived views of
the same vector.

The module also provides closed-form evaluations of the class weights for
two special model shapes (a shared transient density, or per-class
transient blocks with block-constant densities).  These reduce the full
forward recursion to one-dimensional accumulators over the absorption
time and serve as independent oracles for the generic recursion.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .model import Categorical, ChainFacts, ModelSpec, chain_facts, densities_equal


class PosteriorError(Exception):
    pass


class ZeroLikelihood(PosteriorError):
    """Every state assigns zero density to the observation."""


class DegenerateMass(PosteriorError):
    """Some class posterior mass is exactly zero, so its LLR is undefined."""


class ShapeMismatch(PosteriorError):
    """Model does not match the special shape a closed form requires."""


def _logsumexp_rows(a):
    """Row-wise logsumexp that maps all(-inf) rows to -inf without warnings."""
    m = np.max(a, axis=-1)
    finite = m > -np.inf
    out = np.full(m.shape, -np.inf)
    if np.any(finite):
        shifted = a[finite] - m[finite][..., None]
        out[finite] = m[finite] + np.log(np.exp(shifted).sum(axis=-1))
    return out


def log_transition(model: ModelSpec):
    with np.errstate(divide="ignore"):
        return np.log(model.trans)


def batch_init(model: ModelSpec, n_paths: int):
    """(B, n_states) log-alpha array at time 0 (all rows equal log eta)."""
    with np.errstate(divide="ignore"):
        row = np.log(model.eta)
    return np.tile(row, (n_paths, 1))


def batch_update(log_alpha, log_trans, log_obs):
    """One forward step on a batch of log-alpha rows.

    ``log_alpha`` is (B, S); ``log_trans`` (S, S); ``log_obs`` (B, S) the
    per-state log densities of each path's new observation.  Returns the
    re-centered (B, S) array for the next time index.
    """
    # element [b, y, y'] = log alpha[b, y'] + log P(y', y); reduce over y'
    new = _logsumexp_rows(log_alpha[:, None, :] + log_trans.T[None, :, :]) + log_obs
    shift = new.max(axis=1, keepdims=True)
    bad = ~np.isfinite(shift)
    if np.any(bad):
        raise ZeroLikelihood("an observation has zero density under every reachable state")
    return new - shift


def class_log_mass(log_alpha, model: ModelSpec):
    """(B, M+1) log of the per-class alpha sums, column ``i`` = class ``i``."""
    B = log_alpha.shape[0]
    out = np.empty((B, model.n_classes + 1))
    for i in range(model.n_classes + 1):
        out[:, i] = _logsumexp_rows(log_alpha[:, model.class_members(i)])
    return out


def class_posteriors(log_class_mass):
    """Normalize (B, M+1) log masses into posterior class probabilities."""
    shifted = log_class_mass - log_class_mass.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    return p / p.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class PosteriorState:
    """Posterior at time ``n``: log-alpha up to an additive constant."""

    log_alpha: np.ndarray
    n: int
    model: ModelSpec

    @property
    def log_alpha_class(self):
        return class_log_mass(self.log_alpha[None, :], self.model)[0]

    @property
    def pi(self):
        """Posterior distribution over states."""
        shifted = self.log_alpha - self.log_alpha.max()
        p = np.exp(shifted)
        return p / p.sum()

    @property
    def pi_class(self):
        """Posterior probability of each class, index 0 = still transient."""
        return class_posteriors(self.log_alpha_class[None, :])[0]


def init(model: ModelSpec) -> PosteriorState:
    """Posterior at time 0, which is the initial distribution."""
    return PosteriorState(log_alpha=batch_init(model, 1)[0], n=0, model=model)


def update(state: PosteriorState, model: ModelSpec, x) -> PosteriorState:
    """Fold one observation into the posterior."""
    la = batch_update(state.log_alpha[None, :], log_transition(model), model.log_obs([x]))
    return PosteriorState(log_alpha=la[0], n=state.n + 1, model=model)


@dataclass(frozen=True)
class LlrView:
    """Pairwise LLRs ``lam[i-1, j]`` = log mass(i) - log mass(j) for
    i in 1..M, j in 0..M (diagonal j = i is NaN), the log-odds vector
    ``phi`` and the row minima ``psi``."""

    lam: np.ndarray
    phi: np.ndarray
    psi: np.ndarray


def llr_from_class_mass(lac, allow_zero_mass=False):
    """Build the LLR view from a (M+1,) log class-mass vector."""
    if not allow_zero_mass and np.any(lac == -np.inf):
        raise DegenerateMass("a class posterior mass underflowed to zero")
    M = lac.shape[0] - 1
    lam = np.full((M, M + 1), np.nan)
    phi = np.empty(M)
    psi = np.empty(M)
    for i in range(1, M + 1):
        others = [j for j in range(M + 1) if j != i]
        with np.errstate(invalid="ignore"):
            lam[i - 1, others] = lac[i] - lac[others]
        if lac[i] == -np.inf:
            # zero own mass: the class cannot dominate anything
            lam[i - 1, others] = -np.inf
        phi[i - 1] = lac[i] - _logsumexp_rows(lac[None, others])[0]
        psi[i - 1] = lam[i - 1, others].min()
    return LlrView(lam=lam, phi=phi, psi=psi)


def llr(state: PosteriorState) -> LlrView:
    """LLR view of the posterior; requires every class mass positive."""
    if state.n < 1:
        raise PosteriorError("LLR processes start at n = 1")
    return llr_from_class_mass(state.log_alpha_class)


# ---------------------------------------------------------------------------
# Closed forms.  Both special shapes collapse the forward sum over hidden
# paths to a sum over the absorption time t: class i's weight becomes
#   nu_i * sum_t rho_t^{(i)} * prod_{l<t} f_pre(x_l) * prod_{m>=t} f_i(x_m)
# with f_pre the (shared or block) transient density, and the transient
# weight becomes the transient density product times the remaining tail
# mass.  The L accumulator below is the log of that t-sum with the
# post-change product factored out.
# ---------------------------------------------------------------------------


def shared_transient_density(model: ModelSpec):
    """The single transient density if all transient states share one."""
    idx = model.transient
    if idx.size == 0:
        return None
    first = model.densities[idx[0]]
    if all(densities_equal(model.densities[k], first) for k in idx[1:]):
        return first
    return None


def singleton_classes(model: ModelSpec):
    return all(model.class_members(i).size == 1 for i in range(1, model.n_classes + 1))


def transient_blocks(model: ModelSpec):
    """Partition of the transient set into per-class feeder blocks.

    Returns a list (indexed by class - 1) of transient state index arrays
    when every transient state can only be absorbed by a single class and
    each block shares one density; None when the model has no such shape.
    """
    trans_idx = model.transient
    if trans_idx.size == 0:
        return None
    reach = model.trans.astype(bool)
    # transitive closure over the transient set
    closure = reach.copy()
    for _ in range(model.n_states):
        nxt = closure | (closure @ reach)
        if np.array_equal(nxt, closure):
            break
        closure = nxt
    blocks = [[] for _ in range(model.n_classes)]
    labels = np.asarray(model.classes)
    for y in trans_idx:
        hit = {labels[z] for z in np.flatnonzero(closure[y]) if labels[z] > 0}
        if len(hit) != 1:
            return None
        blocks[hit.pop() - 1].append(y)
    out = []
    for i, blk in enumerate(blocks):
        if not blk:
            return None
        first = model.densities[blk[0]]
        if not all(densities_equal(model.densities[k], first) for k in blk[1:]):
            return None
        out.append(np.asarray(blk))
    return out


class ClosedFormLlrState:
    """Per-class accumulators of the collapsed forward sum.

    Tracks for each class j the running post/pre log-density sum and the
    ``L`` accumulator ``log(rho_0 + sum_k rho_k * prod_{l<k} f_pre/f_j)``;
    the ``K`` form re-expresses the same sum anchored at the current time.
    """

    def __init__(self, rho, log_ratio_pre_over_post):
        # rho: (M, n_max+1) conditional absorption-time table
        # log_ratio_pre_over_post: callable (x, j) -> log f_pre_j(x) - log f_j(x)
        self.rho = rho
        self._ratio = log_ratio_pre_over_post
        with np.errstate(divide="ignore"):
            self.log_rho = np.log(rho)
        self.n = 0
        M = rho.shape[0]
        self.cum_pre_over_post = np.zeros(M)  # sum_{l<=n} log(f_pre_j/f_j)(x_l)
        self.L = self.log_rho[:, 0].copy()

    def step(self, x):
        """Advance to time n+1 with observation x."""
        self.n += 1
        # L_{n} adds the term rho_n * prod_{l<n} f_pre/f_j; the product uses
        # observations strictly before the new one.
        term = self.log_rho[:, self.n] + self.cum_pre_over_post
        self.L = np.logaddexp(self.L, term)
        self.cum_pre_over_post += self._ratio(x, np.arange(len(self.L)))

    def K(self):
        """K accumulator at the current time (undefined at n = 0)."""
        return -self.log_rho[:, self.n] - self.cum_pre_over_post + self.L


def _example1_state(model, facts, n_max):
    f0 = shared_transient_density(model)
    if f0 is None or not singleton_classes(model):
        raise ShapeMismatch("closed form needs a shared transient density and singleton classes")
    if facts is None:
        facts = chain_facts(model, t_max=n_max)
    if facts.t_max < n_max:
        facts = chain_facts(model, t_max=n_max)
    class_states = [model.class_members(i)[0] for i in range(1, model.n_classes + 1)]

    def ratio(x, js):
        return np.array([float(f0.log_pdf(x) - model.densities[class_states[j]].log_pdf(x)) for j in js])

    return facts, class_states, f0, ClosedFormLlrState(facts.rho[:, : n_max + 1], ratio)


def closed_form_llr_example1(model: ModelSpec, xs, i: int, j: int, facts: ChainFacts | None = None):
    """LLR sequence ``Lambda_n(i,j)`` for a shared-transient-density model.

    ``xs`` is the observation path; returns the length-n array of values at
    n = 1..len(xs).  Exact reformulation of the generic recursion, used as
    an independent oracle for it (and vice versa).
    """
    n_max = len(xs)
    facts, class_states, f0, acc = _example1_state(model, facts, n_max)
    M = model.n_classes
    log_nu = np.log(facts.nu)
    out = np.empty(n_max)
    cum_post_over_pre = 0.0  # sum log(f_i/f_0)
    cum_i_over_j = 0.0  # sum log(f_i/f_j), j in M
    fi = model.densities[class_states[i - 1]]
    fj = model.densities[class_states[j - 1]] if j != 0 else None
    with np.errstate(invalid="ignore"):
        for n, x in enumerate(xs, start=1):
            acc.step(x)
            cum_post_over_pre += float(fi.log_pdf(x) - f0.log_pdf(x))
            if j == 0:
                # remaining transient weight: sum_j nu_j * P{theta > n | j}
                tail = facts.nu @ facts.rho_residual[:, n]
                out[n - 1] = cum_post_over_pre + acc.L[i - 1] - np.log(tail) + log_nu[i - 1]
            else:
                cum_i_over_j += float(fi.log_pdf(x) - fj.log_pdf(x))
                out[n - 1] = cum_i_over_j + acc.L[i - 1] - acc.L[j - 1] + log_nu[i - 1] - log_nu[j - 1]
    return out


def example1_log_class_mass(model: ModelSpec, xs, facts: ChainFacts | None = None):
    """(n, M+1) log class masses (common constant dropped) via the closed form."""
    n_max = len(xs)
    facts, class_states, f0, acc = _example1_state(model, facts, n_max)
    M = model.n_classes
    log_nu = np.log(facts.nu)
    out = np.empty((n_max, M + 1))
    cum_post = np.zeros(M)  # per class: sum log f_i
    cum_pre = 0.0  # sum log f_0
    for n, x in enumerate(xs, start=1):
        acc.step(x)
        for k in range(M):
            cum_post[k] += float(model.densities[class_states[k]].log_pdf(x))
        cum_pre += float(f0.log_pdf(x))
        tail = facts.nu @ facts.rho_residual[:, n]
        out[n - 1, 0] = cum_pre + np.log(tail)
        out[n - 1, 1:] = log_nu + acc.L + cum_post
    return out


def _example2_state(model, facts, n_max):
    blocks = transient_blocks(model)
    if blocks is None or not singleton_classes(model):
        raise ShapeMismatch("closed form needs per-class transient blocks with block-constant densities")
    if facts is None or facts.t_max < n_max:
        facts = chain_facts(model, t_max=n_max)
    class_states = [model.class_members(i)[0] for i in range(1, model.n_classes + 1)]
    block_density = [model.densities[blk[0]] for blk in blocks]

    def ratio(x, js):
        return np.array(
            [float(block_density[j].log_pdf(x) - model.densities[class_states[j]].log_pdf(x)) for j in js]
        )

    return facts, class_states, block_density, ClosedFormLlrState(facts.rho[:, : n_max + 1], ratio)


def closed_form_llr_example2(model: ModelSpec, xs, i: int, j: int, facts: ChainFacts | None = None):
    """LLR sequences for the per-class transient-block shape.

    Returns ``(lam, lam0)`` where ``lam`` is Lambda_n(i,j) for n = 1..len(xs)
    and ``lam0`` is the matrix of block LLRs Lambda^(0)_n(i, k) against each
    transient block k (needed to assemble Lambda_n(i,0) as a log-sum).
    """
    n_max = len(xs)
    facts, class_states, block_density, acc = _example2_state(model, facts, n_max)
    M = model.n_classes
    log_nu = np.log(facts.nu)
    fi = model.densities[class_states[i - 1]]
    lam0 = np.empty((n_max, M))
    lam = np.empty(n_max)
    cum_i_over_blk = np.zeros(M)  # sum log(f_i / f^{(0)}_k)
    cum_i_over_j = 0.0
    with np.errstate(invalid="ignore", divide="ignore"):
        for n, x in enumerate(xs, start=1):
            acc.step(x)
            for k in range(M):
                cum_i_over_blk[k] += float(fi.log_pdf(x) - block_density[k].log_pdf(x))
            lam0[n - 1] = (
                cum_i_over_blk
                + acc.L[i - 1]
                - np.log(facts.rho_residual[:, n])
                + log_nu[i - 1]
                - log_nu
            )
            if j == 0:
                lam[n - 1] = -_logsumexp_rows(-lam0[n - 1][None, :])[0]
            else:
                fj = model.densities[class_states[j - 1]]
                cum_i_over_j += float(fi.log_pdf(x) - fj.log_pdf(x))
                lam[n - 1] = cum_i_over_j + acc.L[i - 1] - acc.L[j - 1] + log_nu[i - 1] - log_nu[j - 1]
    return lam, lam0


def trajectory_rows(model: ModelSpec, xs):
    """Tabulate the posterior trajectory for an observation path.

    Yields one dict per time step with the class posteriors, all pairwise
    LLRs, the log-odds and the LLR minima; used by the CSV dump consumed by
    plotting scripts.
    """
    M = model.n_classes
    state = init(model)
    for n, x in enumerate(xs, start=1):
        state = update(state, model, x)
        lac = state.log_alpha_class
        view = llr_from_class_mass(lac, allow_zero_mass=True)
        row = {"n": n}
        pis = state.pi_class
        for i in range(M + 1):
            row[f"pi_{i}"] = pis[i]
        for i in range(1, M + 1):
            for j in range(M + 1):
                if j != i:
                    row[f"lambda_{i}_{j}"] = view.lam[i - 1, j]
        for i in range(1, M + 1):
            row[f"phi_{i}"] = view.phi[i - 1]
            row[f"psi_{i}"] = view.psi[i - 1]
        yield row


def dump_trajectory(model: ModelSpec, xs, path, header_comment=None):
    """Write the trajectory table as CSV (optionally with a # comment line)."""
    rows = list(trajectory_rows(model, xs))
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
