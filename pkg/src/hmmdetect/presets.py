"""Ready-made benchmark models used by the tests, demos and CLI examples.

Names describe the transient structure:

* ``gaussian_blocks`` — two per-class transient blocks of two states each,
  Gaussian observations whose mean shifts on absorption.
* ``categorical_parallel`` — two self-looping transient states feeding one
  class each, four-letter categorical observations, uniform before
  absorption.
* ``categorical_serial`` — a serial transient chain (absorption time is a
  sum of two geometric waits), same observation densities.
* ``multistate_acyclic`` / ``multistate_cyclic`` — closed classes with
  several internal states (mixing resp. deterministically cycling),
  Gaussian observations; no closed-form limit table exists for these.
"""

from __future__ import annotations

from .model import Categorical, Gaussian, ModelSpec

_CAT_F0 = Categorical([0.25, 0.25, 0.25, 0.25])
_CAT_F1 = Categorical([0.4, 0.3, 0.2, 0.1])
_CAT_F2 = Categorical([0.1, 0.2, 0.3, 0.4])


def gaussian_blocks() -> ModelSpec:
    return ModelSpec(
        states=["(1,1)", "(1,2)", "1", "(2,1)", "(2,2)", "2"],
        classes=[0, 0, 1, 0, 0, 2],
        eta=[0.25, 0.25, 0.0, 0.25, 0.25, 0.0],
        trans=[
            [0.85, 0.15, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.9, 0.1, 0.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.8, 0.0, 0.2],
            [0.0, 0.0, 0.0, 0.0, 0.95, 0.05],
            [0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
        ],
        densities=[
            Gaussian(0.1), Gaussian(0.1), Gaussian(0.7),
            Gaussian(0.0), Gaussian(0.0), Gaussian(0.2),
        ],
    )


def categorical_parallel() -> ModelSpec:
    return ModelSpec(
        states=["(0,1)", "(0,2)", "1", "2"],
        classes=[0, 0, 1, 2],
        eta=[0.5, 0.5, 0.0, 0.0],
        trans=[
            [0.95, 0.0, 0.05, 0.0],
            [0.0, 0.85, 0.0, 0.15],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
        densities=[_CAT_F0, _CAT_F0, _CAT_F1, _CAT_F2],
    )


def categorical_serial() -> ModelSpec:
    return ModelSpec(
        states=["(0,1)", "(0,2)", "1", "2"],
        classes=[0, 0, 1, 2],
        eta=[1.0, 0.0, 0.0, 0.0],
        trans=[
            [0.95, 0.05, 0.0, 0.0],
            [0.0, 0.85, 0.05, 0.1],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ],
        densities=[_CAT_F0, _CAT_F0, _CAT_F1, _CAT_F2],
    )


_MULTI_MEANS = [0.0, 0.2, 0.4, 0.6, -0.2, -0.4]


def multistate_acyclic() -> ModelSpec:
    return ModelSpec(
        states=["0", "(1,1)", "(1,2)", "(1,3)", "(2,1)", "(2,2)"],
        classes=[0, 1, 1, 1, 2, 2],
        eta=[1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        trans=[
            [0.75, 0.05, 0.05, 0.05, 0.05, 0.05],
            [0.0, 0.5, 0.2, 0.3, 0.0, 0.0],
            [0.0, 0.3, 0.5, 0.2, 0.0, 0.0],
            [0.0, 0.3, 0.2, 0.5, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.7, 0.3],
            [0.0, 0.0, 0.0, 0.0, 0.2, 0.8],
        ],
        densities=[Gaussian(m) for m in _MULTI_MEANS],
    )


def multistate_cyclic() -> ModelSpec:
    return ModelSpec(
        states=["0", "(1,1)", "(1,2)", "(1,3)", "(2,1)", "(2,2)"],
        classes=[0, 1, 1, 1, 2, 2],
        eta=[1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        trans=[
            [0.75, 0.05, 0.05, 0.05, 0.05, 0.05],
            [0.0, 0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        ],
        densities=[Gaussian(m) for m in _MULTI_MEANS],
    )


ALL = {
    "gaussian_blocks": gaussian_blocks,
    "categorical_parallel": categorical_parallel,
    "categorical_serial": categorical_serial,
    "multistate_acyclic": multistate_acyclic,
    "multistate_cyclic": multistate_cyclic,
}
