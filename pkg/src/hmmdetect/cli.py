"""Experiment driver.

Subcommands load a model file, run one stage of the pipeline and write
CSV.  Every stochastic command requires an explicit ``--seed``; outputs
embed the seed plus a hash of the effective configuration in a leading
comment line, so identical invocations produce byte-identical files.

Exit codes: 0 success, 2 configuration/validation error, 3 numerical
failure (no convergence, all paths capped, and similar).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys

import numpy as np

from . import limits as limits_mod
from . import model as model_mod
from . import optimal as optimal_mod
from . import posterior as posterior_mod
from . import riskeval as riskeval_mod
from . import strategy as strategy_mod

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(Exception):
    pass


def _config_header(args, command):
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",) and v is not None}
    cfg["command"] = command
    blob = json.dumps(cfg, sort_keys=True, default=str)
    digest = hashlib.sha256(blob.encode()).hexdigest()[:12]
    return f"config_hash={digest} config={blob}"


def _load(args):
    try:
        return model_mod.load_model(args.model)
    except FileNotFoundError as e:
        raise ConfigError(f"model file not found: {e}") from e
    except model_mod.ModelError as e:
        raise ConfigError(f"invalid model: {e}") from e


def _float_list(text):
    return [float(v) for v in text.split(",") if v != ""]


def _open_out(args):
    if args.out == "-":
        return sys.stdout, False
    return open(args.out, "w", newline=""), True


def _write_csv(args, command, header, rows):
    fh, close = _open_out(args)
    try:
        fh.write(f"# {_config_header(args, command)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    finally:
        if close:
            fh.close()


def cmd_validate(args):
    try:
        model = model_mod.load_model(args.model)
    except FileNotFoundError:
        print(f"error: model file {args.model!r} not found", file=sys.stderr)
        return EXIT_CONFIG
    except model_mod.ModelError as e:
        print(f"INVALID: {e}", file=sys.stderr)
        return EXIT_CONFIG
    report = model_mod.validate(model)
    print(report)
    return EXIT_OK if report.ok else EXIT_CONFIG


def cmd_limits(args):
    model = _load(args)
    if args.method == "mc":
        if args.seed is None:
            raise ConfigError("--seed is required for the Monte Carlo method")
        table = limits_mod.limits_mc(model, n=args.horizon, paths=args.paths, seed=args.seed)
    elif args.method == "example1":
        table = limits_mod.limits_example1(model)
    elif args.method == "example2":
        table = limits_mod.limits_example2(model)
    else:
        table = limits_mod.exact_limits(model)
    M = table.n_classes

    def fmt(v):
        return "" if (isinstance(v, float) and np.isnan(v)) else v

    rows = []
    for i in range(1, M + 1):
        for j in range(M + 1):
            if j == i:
                continue
            q = fmt(table.q[i - 1, j]) if table.q is not None else ""
            q0 = fmt(table.q0[i - 1, j - 1]) if (table.q0 is not None and j >= 1) else ""
            vr = fmt(table.varrho[j - 1]) if (table.varrho is not None and j >= 1) else ""
            in_gamma = (j in table.gamma[i - 1]) if table.gamma is not None else ""
            se = fmt(table.se[i - 1, j]) if table.se is not None else ""
            rows.append([i, j, q, q0, vr, fmt(table.l[i - 1, j]), in_gamma,
                         j in table.jstar[i - 1], se])
    _write_csv(args, "limits", ["i", "j", "q", "q0", "varrho_j", "l", "in_gamma", "is_jstar", "se"], rows)
    return EXIT_OK


def cmd_llr_convergence(args):
    model = _load(args)
    horizons = [int(h) for h in args.horizons.split(",")]
    stats = limits_mod.llr_convergence(model, horizons, args.paths, args.seed)
    theory = None
    try:
        theory = limits_mod.exact_limits(model)
    except (posterior_mod.ShapeMismatch, limits_mod.LimitsError):
        pass
    rows = []
    for (i, j, h) in sorted(stats):
        mean, sd, cnt = stats[(i, j, h)]
        tv = theory.l[i - 1, j] if theory is not None else ""
        rows.append([i, j, h, mean, sd, cnt, tv])
    _write_csv(args, "llr-convergence",
               ["i", "j", "horizon", "mean", "sd", "n_conditional", "theoretical"], rows)
    return EXIT_OK


def _build_costs(args, model):
    if getattr(args, "costs", None):
        with open(args.costs) as fh:
            doc = json.load(fh)
        return model_mod.CostSpec(
            c=doc["c"], m_power=doc.get("m_power", 1),
            a=doc.get("a"), rbar=doc.get("rbar"),
        )
    return model_mod.CostSpec.uniform(model, args.cbar)


def _build_strategy(args, model, costs):
    M = model.n_classes
    if args.strategy == "pi":
        if args.A:
            A = np.asarray(_float_list(args.A))
        elif args.from_costs:
            table = limits_mod.exact_limits(model)
            sigma = None
            if args.sigma == "estimate":
                sigma = np.array([
                    strategy_mod.estimate_sigma(model, table, costs, i, "renewal_mc",
                                                seed=args.seed, samples=args.sigma_samples).sigma[0]
                    for i in range(1, M + 1)
                ])
            A = strategy_mod.a_from_c(costs, table, model, sigma=sigma)
        else:
            raise ConfigError("pi strategy needs --A or --from-costs")
        return strategy_mod.StrategySpec(kind="pi", A=A, max_horizon=args.max_horizon)
    if args.B:
        vals = _float_list(args.B)
        if len(vals) == 1:
            B = np.full((M, M + 1), vals[0])
        else:
            B = np.asarray(vals).reshape(M, M + 1)
    elif args.from_costs:
        if costs.rbar is None:
            raise ConfigError("--from-costs for the llr strategy needs rbar in the costs file")
        facts = model_mod.chain_facts(model, costs)
        B = strategy_mod.b_from_rbar(costs, facts, model)
    else:
        raise ConfigError("llr strategy needs --B or --from-costs")
    return strategy_mod.StrategySpec(kind="llr", B=B, max_horizon=args.max_horizon)


def cmd_run_strategy(args):
    model = _load(args)
    costs = _build_costs(args, model)
    spec = _build_strategy(args, model, costs)
    source = strategy_mod.PathSource(model, seed=args.seed)
    if spec.kind == "pi":
        decision = strategy_mod.run_pi_strategy(model, source, spec.A, max_horizon=args.max_horizon)
    else:
        decision = strategy_mod.run_llr_strategy(model, source, spec.B, max_horizon=args.max_horizon)
    xs = [source.observation(n) for n in range(1, decision.tau + 1)]
    if args.dump_trajectory:
        posterior_mod.dump_trajectory(model, xs, args.dump_trajectory,
                                      header_comment=_config_header(args, "run-strategy"))
    theta = source.theta
    print(f"tau={decision.tau} d={decision.d} fired_by={decision.fired_by} "
          f"capped={decision.capped} theta={theta} mu={source.mu}")
    if decision.overshoot is not None:
        print(f"overshoot={decision.overshoot:.6f}")
    return EXIT_OK


def cmd_evaluate(args):
    model = _load(args)
    costs = _build_costs(args, model)
    spec = _build_strategy(args, model, costs)
    try:
        report = riskeval_mod.evaluate(model, costs, spec, args.paths, args.seed)
    except riskeval_mod.AllCapped as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    if args.out:
        riskeval_mod.write_report_csv(report, args.out,
                                      header_comment=_config_header(args, "evaluate"))
    text = riskeval_mod.format_report(report)
    if not args.report_conditionals:
        text = "\n".join(ln for ln in text.splitlines() if "conditional" not in ln)
    print(text)
    return EXIT_OK


def cmd_estimate_sigma(args):
    model = _load(args)
    costs = _build_costs(args, model)
    table = limits_mod.exact_limits(model)
    try:
        est = strategy_mod.estimate_sigma(model, table, costs, args.class_index, args.method,
                                          seed=args.seed, samples=args.samples, a_small=args.a_small)
    except (strategy_mod.NonUniqueJStar, posterior_mod.ShapeMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"sigma[{args.class_index}] = {est.sigma[0]:.6f} (se {est.se[0]:.2g}, method {est.method})")
    return EXIT_OK


def cmd_optimal(args):
    model = _load(args)
    costs = _build_costs(args, model)
    try:
        grid = optimal_mod.value_iteration(model, costs, resolution=args.resolution,
                                           tol=args.tol, max_iters=args.max_iters)
        report = optimal_mod.evaluate_policy(model, costs, grid, args.paths, args.seed)
    except (optimal_mod.NotConverged, optimal_mod.OptimalError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    if args.dump_region:
        rows = [list(grid.nodes[k]) + [grid.stop_decision[k], grid.value[k]]
                for k in range(len(grid.nodes))]
        hdr = [f"n_{s}" for s in model.states] + ["stop_decision", "value"]
        out_args = argparse.Namespace(**{**vars(args), "out": args.dump_region})
        _write_csv(out_args, "optimal-region", hdr, rows)
    v_eta = float(grid.interpolate(grid.value, model.eta[None, :])[0])
    print(f"sweeps={grid.sweeps} sup_change={grid.sup_change:.3e} V(eta)={v_eta:.6f}")
    print(f"policy_risk={report.bayes:.6f} ci=({report.bayes_ci[0]:.6f},{report.bayes_ci[1]:.6f}) "
          f"mean_tau={report.mean_tau:.2f}")
    return EXIT_OK


def cmd_compare_optimal(args):
    model = _load(args)
    sweep = _float_list(args.cbar_sweep)
    if not sweep:
        raise ConfigError("empty cbar sweep")
    table = limits_mod.exact_limits(model)
    rows = []
    for cbar in sweep:
        costs = model_mod.CostSpec.uniform(model, cbar)
        facts = model_mod.chain_facts(model, costs)
        A = strategy_mod.a_from_c(costs, table, model, facts=facts)
        spec = strategy_mod.StrategySpec(kind="pi", A=A)
        rep_a = riskeval_mod.evaluate(model, costs, spec, args.paths_asymptotic, args.seed, facts=facts)
        try:
            grid = optimal_mod.value_iteration(model, costs, resolution=args.resolution, tol=args.tol)
        except optimal_mod.NotConverged as e:
            print(f"numerical failure: {e}", file=sys.stderr)
            return EXIT_NUMERICAL
        rep_o = optimal_mod.evaluate_policy(model, costs, grid, args.paths_optimal, args.seed)
        rows.append([cbar,
                     rep_a.bayes, rep_a.bayes_ci[0], rep_a.bayes_ci[1],
                     rep_o.bayes, rep_o.bayes_ci[0], rep_o.bayes_ci[1],
                     rep_a.bayes / rep_o.bayes])
    _write_csv(args, "compare-optimal",
               ["cbar", "asymptotic", "asym_lo", "asym_hi", "optimal", "opt_lo", "opt_hi", "ratio"],
               rows)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="hmmdetect", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, **kw):
        sp = sub.add_parser(name, **kw)
        sp.set_defaults(func=fn)
        sp.add_argument("model", help="model JSON file")
        return sp

    add("validate", cmd_validate, help="check a model file against every structural invariant")

    sp = add("limits", cmd_limits, help="emit the LLR drift-limit table as CSV")
    sp.add_argument("--method", choices=["auto", "example1", "example2", "mc"], default="auto")
    sp.add_argument("--horizon", type=int, default=1500)
    sp.add_argument("--paths", type=int, default=1000)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", default="-")

    sp = add("llr-convergence", cmd_llr_convergence, help="per-horizon LLR/n statistics vs theory")
    sp.add_argument("--horizons", default="500,1000,1500")
    sp.add_argument("--paths", type=int, default=1000)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", default="-")

    def strategy_flags(sp, with_paths):
        sp.add_argument("--strategy", choices=["pi", "llr"], required=True)
        sp.add_argument("--A", help="comma-separated per-class thresholds")
        sp.add_argument("--B", help="uniform value or comma-separated M x (M+1) matrix")
        sp.add_argument("--from-costs", action="store_true")
        sp.add_argument("--cbar", type=float, default=0.01)
        sp.add_argument("--costs", help="JSON cost file (c, m_power, a, rbar)")
        sp.add_argument("--sigma", choices=["default", "estimate"], default="default")
        sp.add_argument("--sigma-samples", type=int, default=100_000)
        sp.add_argument("--max-horizon", type=int, default=strategy_mod.DEFAULT_MAX_HORIZON)
        sp.add_argument("--seed", type=int, required=True)
        if with_paths:
            sp.add_argument("--paths", type=int, default=10_000)

    sp = add("run-strategy", cmd_run_strategy, help="run a strategy on one simulated path")
    strategy_flags(sp, with_paths=False)
    sp.add_argument("--dump-trajectory", help="write the posterior/LLR trajectory CSV here")

    sp = add("evaluate", cmd_evaluate, help="Monte Carlo risk report for a strategy")
    strategy_flags(sp, with_paths=True)
    sp.add_argument("--report-conditionals", action="store_true")
    sp.add_argument("--out", help="also write the report as CSV")

    sp = add("estimate-sigma", cmd_estimate_sigma, help="estimate the overshoot constant sigma_i")
    sp.add_argument("--class-index", type=int, required=True)
    sp.add_argument("--method", choices=["overshoot_mc", "renewal_mc"], default="renewal_mc")
    sp.add_argument("--samples", type=int, default=100_000)
    sp.add_argument("--a-small", type=float, default=1e-3)
    sp.add_argument("--cbar", type=float, default=0.01)
    sp.add_argument("--costs")
    sp.add_argument("--seed", type=int, required=True)

    sp = add("optimal", cmd_optimal, help="value-iteration benchmark and policy risk")
    sp.add_argument("--resolution", type=int, default=70)
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.add_argument("--max-iters", type=int, default=100_000)
    sp.add_argument("--paths", type=int, default=10_000)
    sp.add_argument("--cbar", type=float, default=0.01)
    sp.add_argument("--costs")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--dump-region", help="write per-node stop/continue decisions here")

    sp = add("compare-optimal", cmd_compare_optimal,
             help="asymptotic strategy vs value-iteration benchmark over a cost sweep")
    sp.add_argument("--cbar-sweep", default=".5,.1,.05,.01,.005")
    sp.add_argument("--resolution", type=int, default=70)
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.add_argument("--paths-asymptotic", type=int, default=100_000)
    sp.add_argument("--paths-optimal", type=int, default=10_000)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", default="-")
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (limits_mod.NoConvergence, limits_mod.TooFewConditionalPaths,
            optimal_mod.NotConverged, riskeval_mod.AllCapped) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
