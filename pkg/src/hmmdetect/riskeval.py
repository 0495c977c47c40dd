"""Monte Carlo evaluation of detection strategies.

Simulates (hidden state, observation) paths, runs a stopping rule on each
and aggregates every loss the Bayes risk combines: the m-th moment of the
accumulated delay cost, the per-(state, declaration) terminal losses, the
per-class aggregates and the total risk, all with normal 95% confidence
intervals.  Paths split into fixed-size chunks with Philox sub-streams,
so a report depends only on (model, strategy, seed, n_paths).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._sim import BatchOutcome, rng_stream, run_batch_chunked, simulate_hidden_batch
from .model import ChainFacts, CostSpec, ModelSpec, chain_facts
from .strategy import StrategySpec

Z95 = 1.959963984540054


class RiskEvalError(Exception):
    pass


class AllCapped(RiskEvalError):
    """Every simulated path hit the horizon cap; the report is unusable."""


@dataclass(frozen=True)
class SimPath:
    """One simulated trajectory of the hidden chain and its observations."""

    y: np.ndarray
    x: np.ndarray
    theta: int
    mu: int
    seed: int


def simulate_path(model: ModelSpec, seed: int, horizon: int) -> SimPath:
    """Simulate a single path to a fixed horizon.

    ``y`` has length horizon+1 (including time 0), ``x`` length horizon;
    ``theta`` is -1 when the chain is still transient at the horizon.
    """
    rng = rng_stream(seed, 0)
    ys, theta, mu = simulate_hidden_batch(model, rng, 1, horizon)
    from ._sim import HiddenSampler

    sampler = HiddenSampler(model)
    xs = np.array([sampler.observe(rng, ys[:, t])[0] for t in range(1, horizon + 1)])
    return SimPath(y=ys[0], x=xs, theta=int(theta[0]), mu=int(mu[0]), seed=seed)


def _ci(values, scale=1.0):
    values = np.asarray(values, dtype=float)
    m = values.mean() * scale
    se = values.std(ddof=1) / np.sqrt(values.size) * scale if values.size > 1 else np.nan
    return float(m), (float(m - Z95 * se), float(m + Z95 * se)), float(se)


@dataclass(frozen=True)
class RiskReport:
    """Estimated losses of a strategy with 95% confidence intervals.

    ``edd`` is the m-th moment of the accumulated delay cost, ``tdl`` the
    matrix of terminal losses P{declare i, hidden state y} for y outside
    class i, ``tdl_class`` its per-class aggregation, ``r_i_a`` the
    weighted per-class error losses scaled by 1/nu_i, and ``bayes`` the total.
    Capped paths contribute delay cost but no terminal loss and are
    reported via ``capped_fraction``.
    """

    n_paths: int
    edd: float
    edd_ci: tuple
    edd_se: float
    edd_conditional: dict
    tdl: np.ndarray
    tdl_se: np.ndarray
    tdl_class: dict
    r_i_a: dict
    bayes: float
    bayes_ci: tuple
    bayes_se: float
    bayes_conditional: dict
    capped_fraction: float
    mean_tau: float
    strategy_kind: str
    extra: dict | None = None

    def rows(self):
        """Long-format rows for the CSV serialization."""
        rows = [
            ("summary", "bayes_risk", self.bayes, self.bayes_ci[0], self.bayes_ci[1]),
            ("summary", "edd", self.edd, self.edd_ci[0], self.edd_ci[1]),
            ("summary", "mean_tau", self.mean_tau, "", ""),
            ("summary", "capped_fraction", self.capped_fraction, "", ""),
            ("summary", "n_paths", self.n_paths, "", ""),
        ]
        for i, (v, ci, _) in sorted(self.edd_conditional.items()):
            rows.append(("edd_conditional", f"class_{i}", v, ci[0], ci[1]))
        for i, (v, ci, _) in sorted(self.bayes_conditional.items()):
            rows.append(("bayes_conditional", f"class_{i}", v, ci[0], ci[1]))
        for (j, i), (v, se) in sorted(self.tdl_class.items()):
            rows.append(("tdl_class", f"R~_{j}{i}", v, v - Z95 * se, v + Z95 * se))
        for i, (v, se) in sorted(self.r_i_a.items()):
            rows.append(("r_i_a", f"class_{i}", v, v - Z95 * se, v + Z95 * se))
        ny, nm = self.tdl.shape
        for y in range(ny):
            for i in range(nm):
                if not np.isnan(self.tdl[y, i]):
                    rows.append(("tdl", f"R_y{y}_d{i + 1}", self.tdl[y, i], "", ""))
        return rows


def write_report_csv(report: RiskReport, path, header_comment=None):
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        w = csv.writer(fh)
        w.writerow(["section", "name", "value", "ci_lo", "ci_hi"])
        w.writerows(report.rows())


def format_report(report: RiskReport) -> str:
    lines = [f"{'section':<18} {'name':<14} {'value':>12} {'ci_lo':>12} {'ci_hi':>12}"]
    for sec, name, v, lo, hi in report.rows():
        fv = f"{v:.6g}" if isinstance(v, float) else str(v)
        fl = f"{lo:.6g}" if isinstance(lo, float) else str(lo)
        fh = f"{hi:.6g}" if isinstance(hi, float) else str(hi)
        lines.append(f"{sec:<18} {name:<14} {fv:>12} {fl:>12} {fh:>12}")
    return "\n".join(lines)


def run_strategy_batch(model: ModelSpec, strategy: StrategySpec, costs: CostSpec,
                       n_paths: int, seed: int) -> BatchOutcome:
    return run_batch_chunked(model, strategy.trigger(), costs.c, seed, n_paths, strategy.max_horizon)


def evaluate(model: ModelSpec, costs: CostSpec, strategy: StrategySpec, n_paths: int, seed: int,
             facts: ChainFacts | None = None) -> RiskReport:
    """Estimate every loss functional of a strategy by simulation."""
    if facts is None:
        facts = chain_facts(model, costs)
    out = run_strategy_batch(model, strategy, costs, n_paths, seed)
    if out.capped.all():
        raise AllCapped("every path hit max_horizon; raise the cap or loosen thresholds")
    a = costs.terminal_weights(model)
    labels = np.asarray(model.classes)
    M = model.n_classes
    S = model.n_states

    delay_loss = out.delay_sum ** costs.m_power
    wrong = (~out.capped) & (labels[out.y_tau] != out.d)
    term_loss = np.where(wrong, a[out.y_tau, out.d - 1], 0.0)
    per_path = delay_loss + term_loss

    edd, edd_ci, edd_se = _ci(delay_loss)
    bayes, bayes_ci, bayes_se = _ci(per_path)

    tdl = np.full((S, M), np.nan)
    tdl_se = np.full((S, M), np.nan)
    tdl_class = {}
    r_i_a = {}
    for i in range(1, M + 1):
        sel_d = (out.d == i) & ~out.capped
        for y in range(S):
            if labels[y] == i:
                continue
            ind = (sel_d & (out.y_tau == y)).astype(float)
            tdl[y, i - 1] = ind.mean()
            tdl_se[y, i - 1] = ind.std(ddof=1) / np.sqrt(n_paths)
        for j in range(M + 1):
            if j == i:
                continue
            ind = (sel_d & (labels[out.y_tau] == j)).astype(float)
            tdl_class[(j, i)] = (float(ind.mean()), float(ind.std(ddof=1) / np.sqrt(n_paths)))
        weighted = np.where(sel_d & (labels[out.y_tau] != i), a[out.y_tau, i - 1], 0.0) / facts.nu[i - 1]
        r_i_a[i] = (float(weighted.mean()), float(weighted.std(ddof=1) / np.sqrt(n_paths)))

    edd_cond = {}
    bayes_cond = {}
    for i in range(1, M + 1):
        sel = out.mu == i
        if sel.sum() >= 2:
            edd_cond[i] = _ci(delay_loss[sel])
            bayes_cond[i] = _ci(per_path[sel])

    return RiskReport(
        n_paths=n_paths,
        edd=edd, edd_ci=edd_ci, edd_se=edd_se, edd_conditional=edd_cond,
        tdl=tdl, tdl_se=tdl_se, tdl_class=tdl_class, r_i_a=r_i_a,
        bayes=bayes, bayes_ci=bayes_ci, bayes_se=bayes_se, bayes_conditional=bayes_cond,
        capped_fraction=float(out.capped.mean()),
        mean_tau=float(out.tau.mean()),
        strategy_kind=strategy.kind,
    )


@dataclass(frozen=True)
class MeasureChangeCheck:
    """Both sides of the terminal-loss identity per (alternative j, decision i):
    the direct frequency of {d=i, class-j loss event} versus the absorbed-
    paths expectation of exp(-Lambda_tau(i,j)) scaled by nu_i."""

    direct: dict
    weighted: dict
    se_direct: dict
    se_weighted: dict

    def max_discrepancy_sigmas(self):
        worst = 0.0
        for key in self.direct:
            se = np.hypot(self.se_direct[key], self.se_weighted[key])
            if se == 0:
                continue
            worst = max(worst, abs(self.direct[key] - self.weighted[key]) / se)
        return worst


def measure_change_check(model: ModelSpec, strategy: StrategySpec, n_paths: int, seed: int,
                         costs: CostSpec | None = None, facts: ChainFacts | None = None) -> MeasureChangeCheck:
    """Estimate both sides of the change-of-measure identity.

    Left: counting frequencies of the terminal-loss events under the
    unconditional law.  Right: nu_i times the conditional (on class i
    winning) mean of ``1{d=i, theta <= tau} exp(-Lambda_tau(i,j))``.
    The identity is exact, so the two sides must agree within Monte Carlo
    noise for every pair.
    """
    if costs is None:
        costs = CostSpec(c=np.zeros(model.n_states))
    if facts is None:
        facts = chain_facts(model, costs)
    out = run_strategy_batch(model, strategy, costs, n_paths, seed)
    labels = np.asarray(model.classes)
    M = model.n_classes
    direct, weighted, se_d, se_w = {}, {}, {}, {}
    decided = ~out.capped
    absorbed_by_tau = (out.theta >= 0) & (out.theta <= out.tau)
    for i in range(1, M + 1):
        cond = out.mu == i
        n_i = int(cond.sum())
        lam_cols = out.log_class_mass[:, i][:, None] - out.log_class_mass
        for j in range(M + 1):
            if j == i:
                continue
            if j == 0:
                ind = decided & (out.d == i) & ~absorbed_by_tau
            else:
                ind = decided & (out.d == i) & absorbed_by_tau & (out.mu == j)
            vals = ind.astype(float)
            direct[(j, i)] = float(vals.mean())
            se_d[(j, i)] = float(vals.std(ddof=1) / np.sqrt(n_paths))
            sel = cond & decided & (out.d == i) & absorbed_by_tau
            wv = np.zeros(n_i)
            wv[sel[cond]] = np.exp(-lam_cols[sel, j])
            weighted[(j, i)] = float(facts.nu[i - 1] * wv.mean())
            se_w[(j, i)] = float(facts.nu[i - 1] * wv.std(ddof=1) / np.sqrt(n_i))
    return MeasureChangeCheck(direct=direct, weighted=weighted, se_direct=se_d, se_weighted=se_w)
