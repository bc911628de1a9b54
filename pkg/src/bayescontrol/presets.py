"""Parameter sets of the worked examples and numerical studies."""

import math
from typing import Sequence

from .model import ModelSpec

_S2 = math.sqrt(2.0)


def figure1_spec() -> ModelSpec:
    """Two causes, shifts of -1 and +2 standard deviations, variance 2."""
    return ModelSpec.from_shifts(rates=(0.01, 0.02), oc_costs=(10, 20),
                                 term_costs=(50, 60, 100), reward_rate=5,
                                 sample_cost=0, interval=1, deltas=(-1, 2), sigma=_S2)


def figure2_spec(oc_costs: Sequence[float] = (10, 15, 20),
                 deltas: Sequence[float] = (-1, 1.5, 3)) -> ModelSpec:
    """Three causes, variance 2."""
    return ModelSpec.from_shifts(rates=(0.01, 0.02, 0.03), oc_costs=oc_costs,
                                 term_costs=(50, 60, 70, 80), reward_rate=5,
                                 sample_cost=0, interval=1, deltas=deltas, sigma=_S2)


def figure3_spec(sample_cost: float = 0.0, interval: float = 1.0) -> ModelSpec:
    """Sampling-interval study.

    Observation densities are not part of that study's parameter list; the
    two-cause example's densities are reused.
    """
    return ModelSpec.from_shifts(rates=(0.01, 0.02), oc_costs=(1, 2),
                                 term_costs=(5, 6, 10), reward_rate=0.5,
                                 sample_cost=sample_cost, interval=interval,
                                 deltas=(-1, 2), sigma=_S2)


def mismatch_spec(rates=(0.01, 0.02), oc_costs=(10, 15), deltas=(-1, 2)) -> ModelSpec:
    """Base process of the misspecification studies (r=5, T=(10,20,30), d=0, h=1)."""
    return ModelSpec.from_shifts(rates=rates, oc_costs=oc_costs, term_costs=(10, 20, 30),
                                 reward_rate=5, sample_cost=0, interval=1,
                                 deltas=deltas, mu=0.0, sigma=1.0)
