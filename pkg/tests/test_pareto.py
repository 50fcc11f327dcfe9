import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualassign.pareto import (
    ObjectivePoint,
    ParetoError,
    argmin_weighted,
    dominates,
    is_pareto_optimal,
    pareto_front,
    utopia_point,
    weighted_sum,
)
from oracles import check_pareto_against_oracles, random_objective_set

TRIAD = [(1, 3), (2, 2), (3, 1)]
QUAD = TRIAD + [(3, 3)]


def test_utopia_examples():
    assert utopia_point(TRIAD) == (1.0, 1.0)
    assert utopia_point([(4, 5)]) == (4.0, 5.0)


def test_optimality_examples():
    assert is_pareto_optimal((2, 2), QUAD)
    assert not is_pareto_optimal((3, 3), QUAD)
    assert is_pareto_optimal((7, 7), [(7, 7)])


def test_front_examples():
    assert pareto_front(QUAD) == TRIAD
    chain = [(3, 3), (1, 1), (2, 2)]
    assert pareto_front(chain) == [(1, 1)]
    assert pareto_front([(1, 1), (1, 1), (2, 2)]) == [(1, 1), (1, 1)]


def test_weighted_sum_examples():
    assert weighted_sum((2, 3), (1, 1)) == 5.0
    assert weighted_sum((2, 3), (1, 0)) == 2.0


def test_argmin_examples():
    assert argmin_weighted(TRIAD, (1, 1)) == (1, 3)
    assert argmin_weighted(TRIAD, (10, 1)) == (1, 3)
    assert argmin_weighted(TRIAD, (1, 10)) == (3, 1)


def test_payloads_travel_with_points():
    pts = [ObjectivePoint((1, 3), "a"), ObjectivePoint((3, 3), "b"), ObjectivePoint((3, 1), "c")]
    assert [p.payload for p in pareto_front(pts)] == ["a", "c"]
    assert argmin_weighted(pts, (1, 2)).payload == "c"


@pytest.mark.parametrize(
    "call",
    [
        lambda: utopia_point([]),
        lambda: pareto_front([]),
        lambda: argmin_weighted([], (1, 1)),
        lambda: is_pareto_optimal((9, 9), QUAD),
        lambda: weighted_sum((1, 2), (1, 1, 1)),
        lambda: weighted_sum((1, 2), (1, -1)),
        lambda: argmin_weighted(TRIAD, (1, 0)),
        lambda: utopia_point([(1, 2), (1, 2, 3)]),
        lambda: dominates((1, 2), (1, 2, 3)),
        lambda: ObjectivePoint((1.0, float("nan"))),
    ],
)
def test_errors(call):
    with pytest.raises(ParetoError):
        call()


def test_random_sets_against_exhaustive_oracles():
    rng = np.random.default_rng(11)
    for _ in range(300):
        check_pareto_against_oracles(random_objective_set(rng), rng)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=1, max_size=40))
def test_front_properties_on_real_valued_sets(points):
    front = pareto_front(points)
    assert front and pareto_front(front) == front
    assert utopia_point(front) == utopia_point(points)
    best = argmin_weighted(points, (0.3, 1.7, 2.9))
    assert best in front
    assert is_pareto_optimal(best, points)
