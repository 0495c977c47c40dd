"""Vectorized path simulation and strategy-stepping kernels.

All Monte Carlo front-ends (risk evaluation, limit estimation, overshoot
sampling) drive the same batch engine: hidden states, observations and
log-space posteriors advance together across a shrinking set of live
paths.  Randomness comes from the counter-based Philox generator; named
sub-streams are derived from a master seed via SeedSequence spawn keys,
so splitting work into chunks never changes the draws a chunk sees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Categorical, Gaussian, ModelSpec
from .posterior import batch_init, batch_update, class_log_mass, class_posteriors, log_transition


def rng_stream(seed, *key):
    """Philox generator for the named sub-stream of a master seed."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


class HiddenSampler:
    """Samples hidden transitions and observations for batches of paths."""

    def __init__(self, model: ModelSpec):
        self.model = model
        self.cum_trans = np.cumsum(model.trans, axis=1)
        self.cum_trans[:, -1] = 1.0
        self.cum_eta = np.cumsum(model.eta)
        self.cum_eta[-1] = 1.0
        self.labels = np.asarray(model.classes)
        if model.observation_family is Categorical:
            obs = np.array([d.probs for d in model.densities], dtype=float)
            self.cum_obs = np.cumsum(obs, axis=1)
            self.cum_obs[:, -1] = 1.0
            self.obs_mean = self.obs_sd = None
        else:
            self.cum_obs = None
            self.obs_mean = np.array([d.mean for d in model.densities])
            self.obs_sd = np.array([np.sqrt(d.var) for d in model.densities])

    def initial(self, rng, n):
        u = rng.random(n)
        return np.searchsorted(self.cum_eta, u, side="right").clip(max=len(self.cum_eta) - 1)

    def step(self, rng, y):
        u = rng.random(y.shape[0])
        rows = self.cum_trans[y]
        return (u[:, None] >= rows).sum(axis=1).clip(max=rows.shape[1] - 1)

    def observe(self, rng, y):
        if self.cum_obs is not None:
            u = rng.random(y.shape[0])
            rows = self.cum_obs[y]
            return (u[:, None] >= rows).sum(axis=1).clip(max=rows.shape[1] - 1)
        z = rng.standard_normal(y.shape[0])
        return self.obs_mean[y] + self.obs_sd[y] * z


@dataclass
class BatchOutcome:
    """Per-path results of a stopped batch run (arrays of length n_paths)."""

    tau: np.ndarray  # stopping time, max_horizon for capped paths
    d: np.ndarray  # declared class (1..M); argmax class posterior if capped
    fired_by: np.ndarray  # class whose rule triggered (0 when capped)
    y_tau: np.ndarray  # hidden state at the stopping time
    theta: np.ndarray  # true absorption time (may exceed tau)
    mu: np.ndarray  # true absorbing class
    delay_sum: np.ndarray  # sum of c(Y_t) for t < tau
    log_class_mass: np.ndarray  # (n_paths, M+1) log class masses at tau
    capped: np.ndarray  # bool


def _neg_inf_safe_diff(a, b):
    """a - b with the convention -inf - -inf = -inf (zero own mass loses)."""
    with np.errstate(invalid="ignore"):
        out = a - b
    out[np.isnan(out)] = -np.inf
    return out


def pi_rule(A):
    """Trigger: some class posterior exceeds 1/(1+A_i); declare argmax."""
    A = np.asarray(A, dtype=float)
    thresholds = 1.0 / (1.0 + A)

    def trigger(lac):
        pis = class_posteriors(lac)[:, 1:]
        crossed = pis > thresholds[None, :]
        fired = crossed.any(axis=1)
        d = np.argmax(pis, axis=1) + 1
        fired_by = np.argmax(crossed, axis=1) + 1
        return fired, d, fired_by

    return trigger


def llr_rule(B):
    """Trigger: class i's LLR clears -log B_ij against every alternative."""
    B = np.asarray(B, dtype=float)
    M = B.shape[0]
    log_b = np.log(B)

    def trigger(lac):
        n = lac.shape[0]
        ok = np.ones((n, M), dtype=bool)
        for i in range(1, M + 1):
            own = lac[:, i]
            for j in range(M + 1):
                if j == i:
                    continue
                diff = _neg_inf_safe_diff(own, lac[:, j])
                ok[:, i - 1] &= diff > -log_b[i - 1, j]
        fired = ok.any(axis=1)
        d = np.argmax(ok, axis=1) + 1
        return fired, d, d.copy()

    return trigger


def run_batch(model: ModelSpec, trigger, c, rng, n_paths, max_horizon) -> BatchOutcome:
    """Run a stopping rule over a batch of freshly simulated paths.

    ``trigger(lac)`` inspects the (A, M+1) log class masses of the live
    paths after each observation and returns (fired, d, fired_by) arrays.
    ``c`` is the per-state delay cost accumulated at times t < tau.
    """
    sampler = HiddenSampler(model)
    labels = sampler.labels
    c = np.asarray(c, dtype=float)
    M = model.n_classes

    tau = np.full(n_paths, max_horizon, dtype=np.int64)
    d_out = np.zeros(n_paths, dtype=np.int64)
    fired_by_out = np.zeros(n_paths, dtype=np.int64)
    y_tau = np.zeros(n_paths, dtype=np.int64)
    theta = np.full(n_paths, -1, dtype=np.int64)
    mu = np.zeros(n_paths, dtype=np.int64)
    delay = np.zeros(n_paths)
    lac_out = np.zeros((n_paths, M + 1))
    capped = np.zeros(n_paths, dtype=bool)

    idx = np.arange(n_paths)
    y = sampler.initial(rng, n_paths)
    absorbed0 = labels[y] > 0
    theta[absorbed0] = 0
    mu[absorbed0] = labels[y[absorbed0]]
    la = batch_init(model, n_paths)
    log_trans = log_transition(model)
    cost_acc = np.zeros(n_paths)
    th = theta.copy()
    mu_live = mu.copy()

    for n in range(1, max_horizon + 1):
        cost_acc += c[y]
        y = sampler.step(rng, y)
        newly = (th < 0) & (labels[y] > 0)
        th[newly] = n
        mu_live[newly] = labels[y[newly]]
        x = sampler.observe(rng, y)
        la = batch_update(la, log_trans, model.log_obs(x))
        lac = class_log_mass(la, model)
        fired, d, fired_by = trigger(lac)
        if np.any(fired):
            hit = idx[fired]
            tau[hit] = n
            d_out[hit] = d[fired]
            fired_by_out[hit] = fired_by[fired]
            y_tau[hit] = y[fired]
            theta[hit] = th[fired]
            mu[hit] = mu_live[fired]
            delay[hit] = cost_acc[fired]
            lac_out[hit] = lac[fired]
            keep = ~fired
            idx, y, la, cost_acc = idx[keep], y[keep], la[keep], cost_acc[keep]
            th, mu_live = th[keep], mu_live[keep]
            lac = lac[keep]
        if idx.size == 0:
            break
    if idx.size:
        capped[idx] = True
        tau[idx] = max_horizon
        pis = class_posteriors(lac)[:, 1:]
        d_out[idx] = np.argmax(pis, axis=1) + 1
        y_tau[idx] = y
        theta[idx] = th
        mu[idx] = mu_live
        delay[idx] = cost_acc
        lac_out[idx] = lac

    # Paths stopped before absorption: keep stepping the hidden chain so
    # theta and mu always hold the true absorption outcome (needed for
    # conditional reports and the change-of-measure identity).
    pending = np.flatnonzero(theta < 0)
    if pending.size:
        yc = y_tau[pending].copy()
        base = tau[pending].astype(np.int64)
        k = 0
        while pending.size:
            k += 1
            if k > 10 ** 6:
                raise RuntimeError("hidden chain failed to absorb within 1e6 extra steps")
            yc = sampler.step(rng, yc)
            hit = labels[yc] > 0
            if np.any(hit):
                done = pending[hit]
                theta[done] = base[hit] + k
                mu[done] = labels[yc[hit]]
                pending, yc, base = pending[~hit], yc[~hit], base[~hit]

    return BatchOutcome(
        tau=tau, d=d_out, fired_by=fired_by_out, y_tau=y_tau, theta=theta, mu=mu,
        delay_sum=delay, log_class_mass=lac_out, capped=capped,
    )


def run_batch_chunked(model, trigger, c, seed, n_paths, max_horizon, chunk=32768, stream=0):
    """Deterministic chunked batch run: chunk k draws from sub-stream
    (stream, k), so results do not depend on how chunks are scheduled."""
    outs = []
    start = 0
    k = 0
    while start < n_paths:
        b = min(chunk, n_paths - start)
        rng = rng_stream(seed, stream, k)
        outs.append(run_batch(model, trigger, c, rng, b, max_horizon))
        start += b
        k += 1
    return BatchOutcome(**{
        name: np.concatenate([getattr(o, name) for o in outs])
        for name in ("tau", "d", "fired_by", "y_tau", "theta", "mu", "delay_sum", "log_class_mass", "capped")
    })


def class_mass_at_horizons(model: ModelSpec, horizons, n_paths, rng):
    """Simulate to a fixed horizon and snapshot log class masses.

    Returns ``(snaps, mu, theta)`` where ``snaps[h]`` is the (n_paths, M+1)
    log class-mass array at ``horizons[h]``; ``mu`` is 0 for paths not yet
    absorbed at the final horizon.
    """
    horizons = sorted(int(h) for h in horizons)
    n_max = horizons[-1]
    sampler = HiddenSampler(model)
    labels = sampler.labels
    y = sampler.initial(rng, n_paths)
    theta = np.where(labels[y] > 0, 0, -1).astype(np.int64)
    mu = np.where(labels[y] > 0, labels[y], 0).astype(np.int64)
    la = batch_init(model, n_paths)
    log_trans = log_transition(model)
    snaps = np.empty((len(horizons), n_paths, model.n_classes + 1))
    pos = 0
    for n in range(1, n_max + 1):
        y = sampler.step(rng, y)
        newly = (theta < 0) & (labels[y] > 0)
        theta[newly] = n
        mu[newly] = labels[y[newly]]
        x = sampler.observe(rng, y)
        la = batch_update(la, log_trans, model.log_obs(x))
        if n == horizons[pos]:
            snaps[pos] = class_log_mass(la, model)
            pos += 1
            if pos == len(horizons):
                break
    return snaps, mu, theta


def simulate_hidden_batch(model: ModelSpec, rng, n_paths, n_steps):
    """Hidden chain only: (n_paths, n_steps+1) state array plus theta, mu."""
    sampler = HiddenSampler(model)
    labels = sampler.labels
    y = sampler.initial(rng, n_paths)
    ys = np.empty((n_paths, n_steps + 1), dtype=np.int64)
    ys[:, 0] = y
    for t in range(1, n_steps + 1):
        y = sampler.step(rng, y)
        ys[:, t] = y
    lab = labels[ys]
    absorbed = lab > 0
    theta = np.where(absorbed.any(axis=1), absorbed.argmax(axis=1), -1)
    mu = np.where(theta >= 0, lab[np.arange(n_paths), np.maximum(theta, 0)], 0)
    return ys, theta, mu
