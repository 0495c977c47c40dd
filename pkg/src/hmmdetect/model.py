"""Hidden Markov model specification with an absorbing class structure.

The state space is partitioned into a transient set (class label 0) and
``M >= 1`` closed classes (labels ``1..M``).  The chain starts in the
transient set (or directly in a closed class), eventually gets absorbed
into one of the closed classes, and each state emits observations from a
per-state density.  This module holds the declarative model description,
its validation, and the exact chain-level quantities that everything else
builds on: absorption probabilities, conditional absorption-time tables,
and per-class stationary costs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.sparse.csgraph import connected_components


class ModelError(Exception):
    """Base class for model construction/validation failures."""


class NonStochasticRow(ModelError):
    pass


class OpenClass(ModelError):
    pass


class RecurrentTransientSet(ModelError):
    pass


class EmptyClass(ModelError):
    pass


class SingularSystem(ModelError):
    pass


class ZeroNu(ModelError):
    pass


class NonUniqueStationary(ModelError):
    pass


class UnsupportedDensity(ModelError):
    pass


@dataclass(frozen=True)
class Gaussian:
    """Normal observation density with mean ``mean`` and variance ``var``."""

    mean: float
    var: float = 1.0

    def __post_init__(self):
        if self.var <= 0:
            raise UnsupportedDensity(f"gaussian variance must be positive, got {self.var}")

    def log_pdf(self, x):
        x = np.asarray(x, dtype=float)
        return -0.5 * (x - self.mean) ** 2 / self.var - 0.5 * np.log(2.0 * np.pi * self.var)

    def sample(self, rng, size):
        return rng.normal(self.mean, np.sqrt(self.var), size=size)

    def to_json(self):
        return {"type": "gaussian", "mean": self.mean, "var": self.var}


@dataclass(frozen=True)
class Categorical:
    """Finite-alphabet density; observation values are indices ``0..K-1``."""

    probs: tuple

    def __init__(self, probs):
        probs = tuple(float(p) for p in probs)
        if len(probs) < 2 or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-12:
            raise UnsupportedDensity(f"categorical probabilities must be >= 0 and sum to 1, got {probs}")
        object.__setattr__(self, "probs", probs)

    def log_pdf(self, x):
        x = np.asarray(x)
        if np.any((x < 0) | (x >= len(self.probs)) | (x != np.floor(x))):
            raise ValueError("categorical observation outside alphabet")
        with np.errstate(divide="ignore"):
            return np.log(np.asarray(self.probs))[x.astype(int)]

    def sample(self, rng, size):
        return rng.choice(len(self.probs), size=size, p=np.asarray(self.probs))

    def to_json(self):
        return {"type": "categorical", "probs": list(self.probs)}


def _density_from_json(d):
    kind = d.get("type")
    if kind == "gaussian":
        return Gaussian(float(d["mean"]), float(d.get("var", 1.0)))
    if kind == "categorical":
        return Categorical(d["probs"])
    raise UnsupportedDensity(f"unknown density type {kind!r}")


def densities_equal(a, b, tol=1e-12):
    if type(a) is not type(b):
        return False
    if isinstance(a, Gaussian):
        return abs(a.mean - b.mean) <= tol and abs(a.var - b.var) <= tol
    return len(a.probs) == len(b.probs) and max(abs(p - q) for p, q in zip(a.probs, b.probs)) <= tol


@dataclass(frozen=True)
class ModelSpec:
    """Hidden chain plus per-state observation densities.

    Parameters
    ----------
    states : sequence of str
        State labels; all matrices and vectors are indexed in this order.
    eta : array_like
        Initial distribution over states.
    trans : array_like
        Row-stochastic one-step transition matrix.
    classes : sequence of int
        Per-state class label: 0 marks the transient set, ``1..M`` the
        closed classes.
    densities : sequence of Gaussian | Categorical
        Per-state observation density.  All states must use the same
        family so the densities share a dominating measure.
    """

    states: tuple
    eta: np.ndarray
    trans: np.ndarray
    classes: tuple
    densities: tuple

    def __init__(self, states, eta, trans, classes, densities):
        object.__setattr__(self, "states", tuple(str(s) for s in states))
        object.__setattr__(self, "eta", np.array(eta, dtype=float))
        object.__setattr__(self, "trans", np.array(trans, dtype=float))
        object.__setattr__(self, "classes", tuple(int(c) for c in classes))
        object.__setattr__(self, "densities", tuple(densities))
        self.eta.setflags(write=False)
        self.trans.setflags(write=False)

    @property
    def n_states(self):
        return len(self.states)

    @property
    def n_classes(self):
        """Number of closed classes M."""
        return max(self.classes)

    def class_members(self, i):
        """Indices of the states carrying class label ``i`` (0 = transient)."""
        return np.flatnonzero(np.asarray(self.classes) == i)

    @property
    def transient(self):
        return self.class_members(0)

    def class_mask(self, i):
        return np.asarray(self.classes) == i

    @property
    def observation_family(self):
        return type(self.densities[0])

    @property
    def alphabet_size(self):
        """Alphabet size for categorical models, else None."""
        if self.observation_family is Categorical:
            return len(self.densities[0].probs)
        return None

    def log_density_matrix(self):
        """(n_states, K) matrix of log emission probabilities (categorical only)."""
        if self.observation_family is not Categorical:
            raise UnsupportedDensity("log_density_matrix requires categorical observations")
        with np.errstate(divide="ignore"):
            return np.log(np.array([d.probs for d in self.densities], dtype=float))

    def log_obs(self, x):
        """Per-state log densities of a batch of observations.

        Parameters
        ----------
        x : array_like, shape (B,)

        Returns
        -------
        ndarray, shape (B, n_states)
        """
        x = np.asarray(x)
        return np.stack([d.log_pdf(x) for d in self.densities], axis=-1)

    def sample_obs(self, rng, y):
        """Draw one observation for each hidden state in ``y`` (vectorized)."""
        y = np.asarray(y)
        x = np.empty(y.shape, dtype=float)
        for s, dens in enumerate(self.densities):
            mask = y == s
            cnt = int(mask.sum())
            if cnt:
                x[mask] = dens.sample(rng, cnt)
        if self.observation_family is Categorical:
            return x.astype(int)
        return x

    def to_json(self):
        return {
            "states": list(self.states),
            "classes": list(self.classes),
            "eta": self.eta.tolist(),
            "trans": self.trans.tolist(),
            "densities": [d.to_json() for d in self.densities],
        }


@dataclass(frozen=True)
class CostSpec:
    """Delay and terminal-loss parameters of the Bayes risk.

    ``c`` is the nonnegative per-state delay cost, ``m_power`` the moment
    order of the accumulated delay loss, ``a`` the (n_states, M) matrix of
    misdiagnosis weights (zero on each class's own states), and ``rbar``
    an optional matrix of error caps used by the fixed-error formulation.
    """

    c: np.ndarray
    m_power: int = 1
    a: np.ndarray | None = None
    rbar: np.ndarray | None = None

    def __init__(self, c, m_power=1, a=None, rbar=None):
        object.__setattr__(self, "c", np.array(c, dtype=float))
        object.__setattr__(self, "m_power", int(m_power))
        object.__setattr__(self, "a", None if a is None else np.array(a, dtype=float))
        object.__setattr__(self, "rbar", None if rbar is None else np.array(rbar, dtype=float))
        if np.any(self.c < 0):
            raise ValueError("delay costs must be nonnegative")
        if self.m_power < 1:
            raise ValueError("m_power must be >= 1")

    @staticmethod
    def uniform(model, cbar, m_power=1):
        """Costs used throughout the benchmarks: delay cost ``cbar`` on closed
        classes only, unit misdiagnosis weights."""
        labels = np.asarray(model.classes)
        c = np.where(labels > 0, float(cbar), 0.0)
        M = model.n_classes
        a = np.zeros((model.n_states, M))
        for i in range(1, M + 1):
            a[:, i - 1] = np.where(labels == i, 0.0, 1.0)
        return CostSpec(c=c, m_power=m_power, a=a)

    def terminal_weights(self, model):
        """The ``a`` matrix, defaulting to unit weights off each class."""
        if self.a is not None:
            a = self.a
        else:
            a = CostSpec.uniform(model, 0.0, self.m_power).a
        labels = np.asarray(model.classes)
        for i in range(1, model.n_classes + 1):
            if np.any(a[labels == i, i - 1] != 0.0):
                raise ValueError("terminal weights must vanish on the class's own states")
        return a

    def abar(self, model):
        """Per-class maxima of the terminal weights over foreign states."""
        a = self.terminal_weights(model)
        labels = np.asarray(model.classes)
        M = model.n_classes
        return np.array([a[labels != i, i - 1].max() for i in range(1, M + 1)])


@dataclass(frozen=True)
class ValidationIssue:
    code: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    issues: tuple

    @property
    def ok(self):
        return not self.issues

    def raise_if_failed(self):
        if self.issues:
            first = self.issues[0]
            exc = {
                "NonStochasticRow": NonStochasticRow,
                "OpenClass": OpenClass,
                "RecurrentTransientSet": RecurrentTransientSet,
                "EmptyClass": EmptyClass,
            }.get(first.code, ModelError)
            raise exc("; ".join(f"{i.code}: {i.message}" for i in self.issues))

    def __str__(self):
        if self.ok:
            return "OK"
        return "\n".join(f"{i.code}: {i.message}" for i in self.issues)


_ROW_TOL = 1e-12
_TRANSIENT_TOL = 1e-10
_TRANSIENT_MAX_ITER = 10 ** 5


def validate(model: ModelSpec) -> ValidationReport:
    """Check every structural invariant of a model.

    Returns a report listing the violated invariants (empty when the model
    is valid).  Closedness of each class and transience of the label-0 set
    are checked explicitly; transience via power iteration on the restricted
    sub-stochastic matrix rather than a dense eigensolver.
    """
    issues = []
    n = model.n_states
    labels = np.asarray(model.classes)

    if model.trans.shape != (n, n):
        issues.append(ValidationIssue("NonStochasticRow", f"transition matrix shape {model.trans.shape} != ({n},{n})"))
        return ValidationReport(tuple(issues))
    if model.eta.shape != (n,):
        issues.append(ValidationIssue("NonStochasticRow", "eta length mismatch"))
        return ValidationReport(tuple(issues))

    if np.any(model.trans < 0):
        issues.append(ValidationIssue("NonStochasticRow", "negative transition probability"))
    bad = np.flatnonzero(np.abs(model.trans.sum(axis=1) - 1.0) > _ROW_TOL)
    for r in bad:
        issues.append(ValidationIssue("NonStochasticRow", f"row {model.states[r]!r} sums to {model.trans[r].sum():.15g}"))

    if np.any(model.eta < 0) or abs(model.eta.sum() - 1.0) > _ROW_TOL:
        issues.append(ValidationIssue("NonStochasticRow", f"eta sums to {model.eta.sum():.15g} or has negative mass"))

    M = model.n_classes
    if M < 1:
        issues.append(ValidationIssue("EmptyClass", "no closed class declared"))
    if min(model.classes) < 0 or set(range(1, M + 1)) - set(model.classes):
        missing = sorted(set(range(1, M + 1)) - set(model.classes))
        issues.append(ValidationIssue("EmptyClass", f"class labels {missing} have no states"))

    for i in range(1, M + 1):
        members = model.class_members(i)
        if members.size == 0:
            continue
        leak = model.trans[np.ix_(members, np.flatnonzero(labels != i))]
        if np.any(leak != 0.0):
            issues.append(ValidationIssue("OpenClass", f"class {i} has positive exit probability"))

    trans_idx = model.transient
    if trans_idx.size:
        Q = model.trans[np.ix_(trans_idx, trans_idx)]
        # Power iteration: the transient mass eta0^T Q^t must vanish; for a
        # sub-stochastic Q this decays geometrically iff spectral radius < 1.
        v = np.ones(trans_idx.size)
        decayed = False
        for _ in range(_TRANSIENT_MAX_ITER):
            v = Q @ v
            if v.max() < _TRANSIENT_TOL:
                decayed = True
                break
        if not decayed:
            issues.append(ValidationIssue("RecurrentTransientSet", "transient set holds mass forever (spectral radius >= 1)"))

    families = {type(d) for d in model.densities}
    if len(families) > 1:
        issues.append(ValidationIssue("NonStochasticRow", "mixed observation families are not supported"))
    if model.observation_family is Categorical:
        sizes = {len(d.probs) for d in model.densities}
        if len(sizes) > 1:
            issues.append(ValidationIssue("NonStochasticRow", "categorical alphabets differ across states"))

    return ValidationReport(tuple(issues))


def absorption_probabilities(model: ModelSpec) -> np.ndarray:
    """Probability that the chain is absorbed by each closed class.

    Solves the first-step system on the transient set: ``h_i(y) = sum_y'
    P(y,y') h_i(y')`` with boundary 1 on class ``i`` and 0 on the others,
    then weights by the initial distribution.
    """
    M = model.n_classes
    trans_idx = model.transient
    nu = np.empty(M)
    labels = np.asarray(model.classes)
    if trans_idx.size == 0:
        for i in range(1, M + 1):
            nu[i - 1] = model.eta[labels == i].sum()
        return nu
    Q = model.trans[np.ix_(trans_idx, trans_idx)]
    eta0 = model.eta[trans_idx]
    A = np.eye(trans_idx.size) - Q
    for i in range(1, M + 1):
        r = model.trans[np.ix_(trans_idx, model.class_members(i))].sum(axis=1)
        try:
            h = np.linalg.solve(A, r)
        except np.linalg.LinAlgError as e:
            raise SingularSystem(f"absorption system singular for class {i}: {e}") from e
        nu[i - 1] = model.eta[labels == i].sum() + eta0 @ h
    return nu


def absorption_vector(model: ModelSpec, i: int) -> np.ndarray:
    """Per-transient-state probability of eventually entering class ``i``."""
    trans_idx = model.transient
    Q = model.trans[np.ix_(trans_idx, trans_idx)]
    r = model.trans[np.ix_(trans_idx, model.class_members(i))].sum(axis=1)
    try:
        return np.linalg.solve(np.eye(trans_idx.size) - Q, r)
    except np.linalg.LinAlgError as e:
        raise SingularSystem(str(e)) from e


def rho_table(model: ModelSpec, i: int, t_max: int) -> np.ndarray:
    """Conditional absorption-time distribution pieces for class ``i``.

    Entry ``t`` is the probability that absorption happens exactly at time
    ``t`` given that class ``i`` wins.  Entry 0 is the initial mass of the
    class scaled by its absorption probability; later entries propagate the
    initial transient mass through the restricted matrix.
    """
    nu = absorption_probabilities(model)[i - 1]
    if nu <= 0.0:
        raise ZeroNu(f"class {i} is unreachable (nu = {nu})")
    labels = np.asarray(model.classes)
    trans_idx = model.transient
    Q = model.trans[np.ix_(trans_idx, trans_idx)]
    r = model.trans[np.ix_(trans_idx, model.class_members(i))].sum(axis=1)
    out = np.zeros(t_max + 1)
    out[0] = model.eta[labels == i].sum() / nu
    v = model.eta[trans_idx]
    for t in range(1, t_max + 1):
        out[t] = (v @ r) / nu
        v = v @ Q
    return out


def rho_residuals(model: ModelSpec, i: int, t_max: int) -> np.ndarray:
    """Upper tails ``P{theta > t | winner = i}`` for ``t = 0..t_max``.

    Computed as iterated transient-mass products, so the values stay
    accurate down to the underflow threshold instead of losing precision
    to the cancellation in ``1 - cumsum(rho)``.
    """
    nu = absorption_probabilities(model)[i - 1]
    if nu <= 0.0:
        raise ZeroNu(f"class {i} is unreachable (nu = {nu})")
    trans_idx = model.transient
    Q = model.trans[np.ix_(trans_idx, trans_idx)]
    h = absorption_vector(model, i)
    out = np.empty(t_max + 1)
    v = model.eta[trans_idx]
    for t in range(t_max + 1):
        out[t] = (v @ h) / nu
        v = v @ Q
    return out


def stationary_costs(model: ModelSpec, costs: CostSpec):
    """Per-class stationary distributions and long-run delay costs.

    Returns ``(w, c_bar)`` where ``w`` is a list of stationary distributions
    (one per closed class, over that class's states) and ``c_bar`` the vector
    of stationary mean delay costs.  Raises NonUniqueStationary when a class
    contains more than one recurrent sub-class; the time-average limit then
    depends on the entry point and no single answer is correct.
    """
    M = model.n_classes
    w_list = []
    c_bar = np.empty(M)
    for i in range(1, M + 1):
        members = model.class_members(i)
        block = model.trans[np.ix_(members, members)]
        k = members.size
        if k == 1:
            w = np.ones(1)
        else:
            n_comp, comp = connected_components(block > 0, directed=True, connection="strong")
            closed = []
            for cidx in range(n_comp):
                inside = comp == cidx
                if np.all(block[np.ix_(inside, ~inside)] == 0.0):
                    closed.append(cidx)
            if len(closed) != 1:
                raise NonUniqueStationary(
                    f"class {i} has {len(closed)} recurrent sub-classes; stationary distribution is not unique"
                )
            A = np.vstack([block.T - np.eye(k), np.ones((1, k))])
            b = np.zeros(k + 1)
            b[-1] = 1.0
            w, *_ = np.linalg.lstsq(A, b, rcond=None)
            w = np.clip(w, 0.0, None)
            w = w / w.sum()
        w_list.append(w)
        c_bar[i - 1] = float(costs.c[members] @ w)
    return w_list, c_bar


@dataclass(frozen=True)
class ChainFacts:
    """Exact chain-level quantities: absorption probabilities ``nu``,
    stationary distributions ``w`` and long-run costs ``c_bar`` per class,
    the conditional absorption-time table ``rho`` (classes x horizon+1),
    upper tails ``rho_residual``, and the joint table ``theta_dist`` with
    ``theta_dist[i-1, t] = P{theta = t, winner = i}``."""

    nu: np.ndarray
    w: tuple
    c_bar: np.ndarray
    rho: np.ndarray
    rho_residual: np.ndarray
    theta_dist: np.ndarray

    @property
    def t_max(self):
        return self.rho.shape[1] - 1


_RESIDUAL_TOL = 1e-12
_T_MAX_CAP = 10 ** 6


def chain_facts(model: ModelSpec, costs: CostSpec | None = None, t_max: int | None = None) -> ChainFacts:
    """Assemble ChainFacts; the horizon defaults to the first time the
    remaining transient mass drops below 1e-12 (capped at 1e6)."""
    nu = absorption_probabilities(model)
    if t_max is None:
        trans_idx = model.transient
        Q = model.trans[np.ix_(trans_idx, trans_idx)]
        v = model.eta[trans_idx]
        t_max = 0
        while v.sum() > _RESIDUAL_TOL and t_max < _T_MAX_CAP:
            v = v @ Q
            t_max += 1
    if costs is None:
        costs = CostSpec(c=np.zeros(model.n_states))
    w, c_bar = stationary_costs(model, costs)
    M = model.n_classes
    rho = np.stack([rho_table(model, i, t_max) for i in range(1, M + 1)])
    resid = np.stack([rho_residuals(model, i, t_max) for i in range(1, M + 1)])
    theta_dist = rho * nu[:, None]
    return ChainFacts(nu=nu, w=tuple(w), c_bar=c_bar, rho=rho, rho_residual=resid, theta_dist=theta_dist)


def load_model(path) -> ModelSpec:
    """Load a model from its JSON document and reject invalid ones."""
    with open(path) as fh:
        doc = json.load(fh)
    return model_from_json(doc)


def model_from_json(doc) -> ModelSpec:
    try:
        model = ModelSpec(
            states=doc["states"],
            eta=doc["eta"],
            trans=doc["trans"],
            classes=doc["classes"],
            densities=[_density_from_json(d) for d in doc["densities"]],
        )
    except KeyError as e:
        raise ModelError(f"model document missing section {e}") from e
    report = validate(model)
    report.raise_if_failed()
    return model


def save_model(model: ModelSpec, path):
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh, indent=2)
        fh.write("\n")
