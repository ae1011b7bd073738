from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metanas.enumeration import brute_force_front
from metanas.moea import (
    INF,
    Candidate,
    ObjectiveVector,
    crowding_distance,
    dominates,
    environmental_selection,
    fast_nondominated_sort,
    hypervolume,
    rank_population,
    read_front_csv,
    write_front_csv,
)

points = st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=1, max_size=25)


def _vectors(pairs):
    return [ObjectiveVector(float(a), float(b)) for a, b in pairs]


def test_dominance_is_strict():
    a, b = ObjectiveVector(1, 2), ObjectiveVector(1, 3)
    assert dominates(a, b) and not dominates(b, a)
    assert not dominates(a, a)


@given(points)
def test_first_front_matches_pairwise_check(pairs):
    vs = _vectors(pairs)
    fronts = fast_nondominated_sort(vs)
    mask = brute_force_front(np.array(pairs, dtype=float))
    assert fronts[0] == [i for i in range(len(vs)) if mask[i]]
    assert sorted(i for f in fronts for i in f) == list(range(len(vs)))


@given(points)
def test_later_fronts_are_dominated_by_earlier(pairs):
    vs = _vectors(pairs)
    fronts = fast_nondominated_sort(vs)
    for k in range(1, len(fronts)):
        for j in fronts[k]:
            assert any(dominates(vs[i], vs[j]) for i in fronts[k - 1])
            assert not any(dominates(vs[i], vs[j]) for i in fronts[k])


def test_crowding_distance_hand_example():
    front = _vectors([(0, 4), (1, 2), (3, 1), (4, 0)])
    d = crowding_distance(front)
    assert d[0] == INF and d[3] == INF
    # f1 span 4, f2 span 4
    assert d[1] == pytest.approx((3 - 0) / 4 + (4 - 1) / 4)
    assert d[2] == pytest.approx((4 - 1) / 4 + (2 - 0) / 4)


def test_crowding_small_fronts_and_ties():
    assert crowding_distance(_vectors([(1, 1)])) == [INF]
    d = crowding_distance(_vectors([(1, 1), (1, 1), (1, 1)]))
    assert d.count(INF) == 2
    with pytest.raises(ValueError):
        crowding_distance([])


def test_selection_truncates_by_crowding_then_id():
    pool = [Candidate(i, v) for i, v in enumerate(_vectors([(0, 4), (1, 3), (2, 2), (3, 1),
                                                            (4, 0), (5, 5)]))]
    chosen = environmental_selection(pool[:3], pool[3:], 3)
    # front 0 has five members; interior crowding is 1.0 for ids 1..3, so the
    # tie goes to the smallest id
    assert {r.id for r in chosen} == {0, 4, 1}


def test_selection_needs_enough_candidates():
    with pytest.raises(ValueError):
        environmental_selection([Candidate(0, ObjectiveVector(0, 0))], [], 2)


def test_rank_population_keeps_order():
    members = [Candidate(7, ObjectiveVector(1, 1)), Candidate(3, ObjectiveVector(0, 0))]
    ranked = rank_population(members)
    assert [r.id for r in ranked] == [7, 3]
    assert [r.front for r in ranked] == [1, 0]


def test_hypervolume_hand_example():
    front = _vectors([(1, 3), (2, 2), (3, 1)])
    # column-wise below the reference (4, 4): widths 1, heights 1, 2, 3
    assert hypervolume(front, ObjectiveVector(4, 4)) == pytest.approx(1 + 2 + 3)


@given(points)
def test_hypervolume_matches_grid_count(pairs):
    ref = ObjectiveVector(7, 7)
    vs = _vectors(pairs)
    # unit cells [x, x+1) x [y, y+1) dominated by some point
    covered = sum(1 for x in range(7) for y in range(7)
                  if any(p.f1 <= x and p.f2 <= y for p in vs))
    assert hypervolume(vs, ref) == covered


def test_hypervolume_rejects_points_past_reference():
    with pytest.raises(ValueError):
        hypervolume([ObjectiveVector(2, 0)], ObjectiveVector(1, 1))


def test_front_csv_round_trip(tmp_path):
    ranked = rank_population([Candidate(i, ObjectiveVector(0.1 * i, 10 - i)) for i in range(4)])
    write_front_csv(tmp_path / "front.csv", ranked)
    back = read_front_csv(tmp_path / "front.csv")
    assert [(r.id, r.objectives, r.front) for r in back] == \
        [(r.id, r.objectives, r.front) for r in ranked]
    assert all(math.isinf(r.crowding) for r in back[:1])
