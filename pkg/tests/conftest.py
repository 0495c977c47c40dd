import numpy as np
import pytest

from hmmdetect import presets
from hmmdetect.model import Categorical, Gaussian, ModelSpec


@pytest.fixture(scope="session")
def gaussian_blocks():
    return presets.gaussian_blocks()


@pytest.fixture(scope="session")
def categorical_parallel():
    return presets.categorical_parallel()


@pytest.fixture(scope="session")
def categorical_serial():
    return presets.categorical_serial()


@pytest.fixture(scope="session")
def multistate_acyclic():
    return presets.multistate_acyclic()


@pytest.fixture(scope="session")
def multistate_cyclic():
    return presets.multistate_cyclic()


def random_model(seed, max_states=8, family="categorical"):
    """Random valid model: dirichlet transient rows guarantee positive exit
    mass (hence transience); closed classes get their own random blocks."""
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, 4))
    n_trans = int(rng.integers(1, max(2, max_states - M)))
    sizes = [n_trans] + [1] * M
    while sum(sizes) < max_states and rng.random() < 0.3:
        sizes[1 + int(rng.integers(M))] += 1
    S = sum(sizes)
    classes = []
    for label, size in enumerate(sizes):
        classes += [label] * size
    classes = np.array(classes)
    P = np.zeros((S, S))
    for y in range(S):
        if classes[y] == 0:
            P[y] = rng.dirichlet(np.ones(S))
        else:
            members = np.flatnonzero(classes == classes[y])
            P[y, members] = rng.dirichlet(np.ones(members.size))
    eta = np.zeros(S)
    trans_idx = np.flatnonzero(classes == 0)
    eta[trans_idx] = rng.dirichlet(np.ones(trans_idx.size))
    if family == "categorical":
        K = int(rng.integers(3, 6))
        dens = [Categorical(rng.dirichlet(np.ones(K)) * 0.9 + 0.1 / K) for _ in range(S)]
    else:
        dens = [Gaussian(float(rng.normal(0, 1))) for _ in range(S)]
    return ModelSpec(states=[f"s{k}" for k in range(S)], eta=eta, trans=P,
                     classes=classes, densities=dens)


def assert_llr_close(a, b, rtol=1e-8, atol=1e-8):
    """Compare LLR sequences treating matching non-finite patterns as equal."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    assert a.shape == b.shape
    nan_a, nan_b = np.isnan(a), np.isnan(b)
    assert np.array_equal(nan_a, nan_b), "NaN patterns differ"
    inf_a, inf_b = np.isinf(a), np.isinf(b)
    assert np.array_equal(inf_a, inf_b), "infinity patterns differ"
    if np.any(inf_a):
        assert np.array_equal(np.sign(a[inf_a]), np.sign(b[inf_b]))
    fin = ~(nan_a | inf_a)
    np.testing.assert_allclose(a[fin], b[fin], rtol=rtol, atol=atol)


def generic_llr_sequence(model, xs, i, j):
    """Reference LLR path via the forward recursion (the generic side of
    the oracle-equivalence checks)."""
    from hmmdetect import posterior as post

    state = post.init(model)
    out = np.empty(len(xs))
    with np.errstate(invalid="ignore"):
        for n, x in enumerate(xs):
            state = post.update(state, model, x)
            lac = state.log_alpha_class
            out[n] = lac[i] - lac[j]
    return out
