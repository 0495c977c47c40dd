"""Sequential detection and identification of absorption in hidden Markov models.

The hidden chain starts in a transient set and is eventually absorbed by
one of several closed classes; observations are emitted by the current
state.  The package computes the posterior over classes, runs threshold
stopping rules that detect the absorption and identify the class,
calibrates their thresholds from cost/error targets via exact LLR drift
limits, prices any rule by Monte Carlo, and solves small finite-alphabet
instances exactly by value iteration on the belief simplex.
"""

from .model import (
    Categorical,
    ChainFacts,
    CostSpec,
    Gaussian,
    ModelSpec,
    absorption_probabilities,
    chain_facts,
    load_model,
    rho_table,
    save_model,
    stationary_costs,
    validate,
)
from .posterior import (
    LlrView,
    PosteriorState,
    closed_form_llr_example1,
    closed_form_llr_example2,
    dump_trajectory,
    init,
    llr,
    update,
)
from .limits import LimitTable, exact_limits, kl, limits_example1, limits_example2, limits_mc, varrho
from .strategy import (
    Decision,
    PathSource,
    SigmaEstimate,
    StrategySpec,
    a_from_c,
    b_from_rbar,
    estimate_sigma,
    run_llr_strategy,
    run_pi_strategy,
)
from .riskeval import RiskReport, SimPath, evaluate, measure_change_check, simulate_path
from .optimal import SimplexGrid, evaluate_policy, value_iteration

__version__ = "0.1.0"

__all__ = [
    "Categorical", "ChainFacts", "CostSpec", "Gaussian", "ModelSpec",
    "absorption_probabilities", "chain_facts", "load_model", "rho_table",
    "save_model", "stationary_costs", "validate",
    "LlrView", "PosteriorState", "closed_form_llr_example1",
    "closed_form_llr_example2", "dump_trajectory", "init", "llr", "update",
    "LimitTable", "exact_limits", "kl", "limits_example1", "limits_example2",
    "limits_mc", "varrho",
    "Decision", "PathSource", "SigmaEstimate", "StrategySpec", "a_from_c",
    "b_from_rbar", "estimate_sigma", "run_llr_strategy", "run_pi_strategy",
    "RiskReport", "SimPath", "evaluate", "measure_change_check", "simulate_path",
    "SimplexGrid", "evaluate_policy", "value_iteration",
]
