"""Value-iteration benchmark for the exact minimum Bayes risk.

For small models with finite observation alphabets (and first-moment
delay loss), the minimum Bayes risk solves an optimal-stopping problem on
the posterior simplex: at belief pi, stopping with declaration i costs the
pi-weighted terminal losses of i, while continuing costs one step of
expected delay plus the expected value at the Bayes-updated belief.  The
simplex is discretized into the lattice of integer compositions of the
resolution; off-lattice updated beliefs are evaluated by barycentric
interpolation on the Freudenthal triangulation of that lattice.  Value
iteration from zero is monotone and converges to the discretized value;
the induced stop/continue policy is then priced by fresh simulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ._sim import HiddenSampler, rng_stream
from .model import Categorical, CostSpec, ModelSpec
from .riskeval import RiskReport, _ci


class OptimalError(Exception):
    pass


class NotConverged(OptimalError):
    pass


class UnsupportedDensity(OptimalError):
    """The benchmark needs a finite observation alphabet."""


MAX_STATES = 5


def simplex_nodes(dim_states: int, resolution: int) -> np.ndarray:
    """All integer compositions of ``resolution`` into ``dim_states`` parts,
    in lexicographic order (first coordinate most significant)."""
    out = []

    def rec(prefix, remaining, parts):
        if parts == 1:
            out.append(prefix + [remaining])
            return
        for v in range(remaining + 1):
            rec(prefix + [v], remaining - v, parts - 1)

    rec([], resolution, dim_states)
    return np.array(out, dtype=np.int64)


def composition_rank(counts: np.ndarray, resolution: int) -> np.ndarray:
    """Lexicographic rank of composition rows; inverse of simplex_nodes order."""
    counts = np.asarray(counts, dtype=np.int64)
    n, S = counts.shape
    rank = np.zeros(n, dtype=np.int64)
    rem = np.full(n, resolution, dtype=np.int64)
    for k in range(S - 1):
        m = S - k - 1  # parts remaining after position k
        # ranks skipped by choosing values v < counts[:, k] at position k
        rank += _comb_cumulative(rem, m) - _comb_cumulative(rem - counts[:, k], m)
        rem = rem - counts[:, k]
    return rank


def _comb_cumulative(t, m):
    """Number of compositions into m parts of every total 0..t, summed: C(t+m, m)."""
    t = np.asarray(t)
    return _comb_vec(t + m, m)


def _comb_vec(n, k):
    n = np.asarray(n, dtype=np.int64)
    out = np.ones(n.shape, dtype=np.int64)
    for i in range(1, k + 1):
        out = out * (n - k + i) // i
    return out


def barycentric_weights(points: np.ndarray, resolution: int):
    """Freudenthal coordinates of simplex points on the composition lattice.

    Returns ``(vertices, weights)`` of shapes (N, S, S) and (N, S): each
    point is a convex combination of S lattice compositions (rows of the
    vertex array) with the given weights.
    """
    pts = np.asarray(points, dtype=float)
    N, S = pts.shape
    # staircase coordinates x_k = r * sum_{j >= k} p_j; x_0 = r exactly
    x = resolution * np.cumsum(pts[:, ::-1], axis=1)[:, ::-1]
    x[:, 0] = resolution
    x = np.clip(x, 0.0, resolution)
    base = np.floor(x).astype(np.int64)
    frac = x - base
    base[:, 0] = resolution
    frac[:, 0] = 0.0
    # visit coordinates 1..S-1 by decreasing fractional part (stable)
    order = np.argsort(-frac[:, 1:], axis=1, kind="stable") + 1
    verts_x = np.repeat(base[:, None, :], S, axis=1)  # (N, S vertices, S coords)
    rows = np.arange(N)[:, None]
    for m in range(1, S):
        # vertex m adds 1 to the m highest-fraction coordinates
        verts_x[rows, m, order[:, :m]] = verts_x[rows, m, order[:, :m]] + 1
    w = np.empty((N, S))
    f_sorted = np.take_along_axis(frac[:, 1:], order - 1, axis=1)
    w[:, 0] = 1.0 - (f_sorted[:, 0] if S > 1 else 0.0)
    for m in range(1, S - 1):
        w[:, m] = f_sorted[:, m - 1] - f_sorted[:, m]
    if S > 1:
        w[:, S - 1] = f_sorted[:, S - 2]
    # map staircase vertices back to compositions: n_j = x_j - x_{j+1}
    verts = verts_x.copy()
    verts[:, :, :-1] -= verts_x[:, :, 1:]
    # A coordinate whose staircase value sits exactly on the ceiling yields
    # an out-of-lattice vertex, but only ever with weight exactly 0; remap
    # those to the (always valid) base vertex so ranking stays in range.
    invalid = (verts < 0).any(axis=2)
    if np.any(invalid):
        if w[invalid].max() > 1e-9:
            raise ValueError("invalid simplex vertex carries positive weight")
        rows_i, cols_i = np.nonzero(invalid)
        verts[rows_i, cols_i] = verts[rows_i, 0]
    return verts, w


@dataclass
class SimplexGrid:
    """Discretized posterior simplex with converged values and policy."""

    resolution: int
    nodes: np.ndarray  # (N, S) integer compositions
    points: np.ndarray  # (N, S) beliefs
    value: np.ndarray  # (N,)
    stop_decision: np.ndarray  # (N,) declared class where stopping, else 0
    stop_cost: np.ndarray  # (N, M)
    sweeps: int
    sup_change: float

    def interpolate(self, V, points):
        verts, w = barycentric_weights(points, self.resolution)
        idx = composition_rank(verts.reshape(-1, verts.shape[-1]), self.resolution)
        return (V[idx].reshape(w.shape) * w).sum(axis=1)


def _check_model(model: ModelSpec, costs: CostSpec):
    if model.observation_family is not Categorical:
        raise UnsupportedDensity("the value-iteration benchmark needs categorical observations")
    if costs.m_power != 1:
        raise OptimalError("the dynamic program is valid for first-moment delay loss only")
    if model.n_states > MAX_STATES:
        raise OptimalError(f"resource guard: at most {MAX_STATES} states (got {model.n_states})")


@dataclass
class BellmanOperator:
    """Precomputed pieces of one Bellman sweep on the composition lattice."""

    resolution: int
    nodes: np.ndarray
    points: np.ndarray
    stop_cost: np.ndarray  # (N, M)
    sc_min: np.ndarray
    sc_arg: np.ndarray
    cont_base: np.ndarray
    px_all: np.ndarray  # (K, N)
    interp_ops: list

    def continuation(self, V):
        cont = self.cont_base.copy()
        for x in range(self.px_all.shape[0]):
            cont += self.px_all[x] * (self.interp_ops[x] @ V)
        return cont

    def sweep(self, V):
        return np.minimum(self.sc_min, self.continuation(V))


def bellman_operator(model: ModelSpec, costs: CostSpec, resolution: int) -> BellmanOperator:
    """Discretize the belief simplex and assemble the sweep operator."""
    _check_model(model, costs)
    a = costs.terminal_weights(model)
    S = model.n_states
    K = model.alphabet_size
    nodes = simplex_nodes(S, resolution)
    pts = nodes / float(resolution)
    N = nodes.shape[0]
    rank_check = composition_rank(nodes[:: max(N // 97, 1)], resolution)
    assert np.array_equal(rank_check, np.arange(N)[:: max(N // 97, 1)]), "composition ranking out of sync"

    stop_cost = pts @ a  # (N, M)
    f = np.array([d.probs for d in model.densities])  # (S, K)
    pred = pts @ model.trans  # (N, S)
    interp_ops = []
    px_all = np.empty((K, N))
    for x in range(K):
        u = pred * f[:, x][None, :]
        px = u.sum(axis=1)
        px_all[x] = px
        t = np.where(px[:, None] > 0, u / np.maximum(px[:, None], 1e-300), pts)
        verts, w = barycentric_weights(t, resolution)
        idx = composition_rank(verts.reshape(-1, S), resolution).reshape(N, S)
        rows = np.repeat(np.arange(N), S)
        interp_ops.append(sp.csr_matrix((w.ravel(), (rows, idx.ravel())), shape=(N, N)))
    return BellmanOperator(resolution=resolution, nodes=nodes, points=pts,
                           stop_cost=stop_cost, sc_min=stop_cost.min(axis=1),
                           sc_arg=stop_cost.argmin(axis=1) + 1,
                           cont_base=pts @ costs.c, px_all=px_all, interp_ops=interp_ops)


def value_iteration(model: ModelSpec, costs: CostSpec, resolution: int = 70,
                    tol: float = 1e-8, max_iters: int = 10 ** 5) -> SimplexGrid:
    """Solve the discretized optimal-stopping problem on the belief simplex.

    One Bellman sweep evaluates, per node, the best stopping cost
    ``min_i sum_{y not in class i} a[y,i] pi(y)`` against the continuation
    cost ``c . pi + sum_x p(x | pi) V(update(pi, x))``; iteration starts
    from zero (so sweeps increase monotonically) and stops when the sup
    change drops below ``tol``.
    """
    op = bellman_operator(model, costs, resolution)
    V = np.zeros(op.nodes.shape[0])
    change = np.inf
    for sweeps in range(1, max_iters + 1):
        cont = op.continuation(V)
        V_new = np.minimum(op.sc_min, cont)
        change = np.abs(V_new - V).max()
        V = V_new
        if change < tol:
            break
    else:
        raise NotConverged(f"sup-norm change {change:.3e} after {max_iters} sweeps (tol {tol})")
    stop_decision = np.where(op.sc_min <= cont, op.sc_arg, 0)
    return SimplexGrid(resolution=resolution, nodes=op.nodes, points=op.points, value=V,
                       stop_decision=stop_decision, stop_cost=op.stop_cost,
                       sweeps=sweeps, sup_change=float(change))


def policy_from_grid(model: ModelSpec, costs: CostSpec, grid: SimplexGrid):
    """One-step-lookahead stop/continue rule induced by the converged values.

    At an exact belief, stop when the best stopping cost is no worse than
    one step of delay plus the interpolated continuation value; declare the
    stopping-cost argmin.
    """
    a = costs.terminal_weights(model)
    f = np.array([d.probs for d in model.densities])
    K = f.shape[1]

    def decide(beliefs):
        beliefs = np.atleast_2d(beliefs)
        stop_cost = beliefs @ a
        best = stop_cost.min(axis=1)
        d = stop_cost.argmin(axis=1) + 1
        cont = beliefs @ costs.c
        pred = beliefs @ model.trans
        for x in range(K):
            u = pred * f[:, x][None, :]
            px = u.sum(axis=1)
            t = np.where(px[:, None] > 0, u / np.maximum(px[:, None], 1e-300), beliefs)
            cont += px * grid.interpolate(grid.value, t)
        return best <= cont, d

    return decide


def evaluate_policy(model: ModelSpec, costs: CostSpec, grid: SimplexGrid, n_paths: int, seed: int,
                    max_horizon: int = 10 ** 6, decide=None) -> RiskReport:
    """Simulate the grid policy on fresh paths (posterior updated exactly).

    Stopping is allowed at n = 0, where the rule sees the prior belief;
    the stopping-time definitions elsewhere start at n = 1, and the
    fraction of paths stopped at 0 is reported so the difference is
    visible rather than hidden.
    """
    _check_model(model, costs)
    if decide is None:
        decide = policy_from_grid(model, costs, grid)
    sampler = HiddenSampler(model)
    labels = np.asarray(model.classes)
    a = costs.terminal_weights(model)
    chunk = 16384
    delay_all = []
    term_all = []
    tau_all = []
    capped_all = []
    stop0_all = []
    k = 0
    done = 0
    while done < n_paths:
        b = min(chunk, n_paths - done)
        rng = rng_stream(seed, 3, k)
        res = _run_policy_chunk(model, costs, decide, sampler, labels, a, rng, b, max_horizon)
        delay_all.append(res[0]); term_all.append(res[1]); tau_all.append(res[2])
        capped_all.append(res[3]); stop0_all.append(res[4])
        done += b
        k += 1
    delay = np.concatenate(delay_all)
    term = np.concatenate(term_all)
    tau = np.concatenate(tau_all)
    capped = np.concatenate(capped_all)
    stop0 = float(np.concatenate(stop0_all).mean())
    per_path = delay + term
    edd, edd_ci, edd_se = _ci(delay)
    bayes, bayes_ci, bayes_se = _ci(per_path)
    return RiskReport(
        n_paths=n_paths, edd=edd, edd_ci=edd_ci, edd_se=edd_se,
        edd_conditional={}, tdl=np.full((model.n_states, model.n_classes), np.nan),
        tdl_se=np.full((model.n_states, model.n_classes), np.nan),
        tdl_class={}, r_i_a={},
        bayes=bayes, bayes_ci=bayes_ci, bayes_se=bayes_se, bayes_conditional={},
        capped_fraction=float(capped.mean()), mean_tau=float(tau.mean()),
        strategy_kind="grid_policy",
        extra={"stopped_at_zero_fraction": stop0},
    )


def _run_policy_chunk(model, costs, decide, sampler, labels, a, rng, n, max_horizon):
    from .posterior import batch_init, batch_update, log_transition

    y = sampler.initial(rng, n)
    la = batch_init(model, n)
    log_trans = log_transition(model)
    c = costs.c
    idx = np.arange(n)
    delay = np.zeros(n)
    term = np.zeros(n)
    tau = np.zeros(n, dtype=np.int64)
    capped = np.zeros(n, dtype=bool)
    cost_acc = np.zeros(n)
    stop0 = np.zeros(n, dtype=bool)

    def beliefs_of(la_rows):
        shifted = la_rows - la_rows.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        return p / p.sum(axis=1, keepdims=True)

    stop, d = decide(beliefs_of(la))
    if np.any(stop):
        hit = idx[stop]
        tau[hit] = 0
        stop0[hit] = True
        term[hit] = np.where(labels[y[stop]] != d[stop], a[y[stop], d[stop] - 1], 0.0)
        keep = ~stop
        idx, y, la, cost_acc = idx[keep], y[keep], la[keep], cost_acc[keep]
    for t in range(1, max_horizon + 1):
        if idx.size == 0:
            break
        cost_acc += c[y]
        y = sampler.step(rng, y)
        x = sampler.observe(rng, y)
        la = batch_update(la, log_trans, model.log_obs(x))
        stop, d = decide(beliefs_of(la))
        if np.any(stop):
            hit = idx[stop]
            tau[hit] = t
            delay[hit] = cost_acc[stop]
            term[hit] = np.where(labels[y[stop]] != d[stop], a[y[stop], d[stop] - 1], 0.0)
            keep = ~stop
            idx, y, la, cost_acc = idx[keep], y[keep], la[keep], cost_acc[keep]
    if idx.size:
        capped[idx] = True
        tau[idx] = max_horizon
        delay[idx] = cost_acc
    return delay ** costs.m_power, term, tau, capped, stop0
