from __future__ import annotations

import itertools

import numpy as np
import pytest

from metanas.enumeration import (
    RESTRICTED_MACRO,
    RESTRICTED_SPACE,
    SpaceTooLargeError,
    brute_force_front,
    cell_count,
    enumerate_cells,
    fixture_json,
    ground_truth_front,
    load_fixture,
    space_size,
)
from metanas.genotype import CellKind, SearchSpace, deserialize, validate

from conftest import FIXTURES


def test_cell_counts_by_hand():
    # one node: 3 non-zero link patterns x 3 ops; two nodes add 7 x 3 more choices
    assert cell_count(RESTRICTED_SPACE, CellKind.REDUCTION) == 9
    assert cell_count(RESTRICTED_SPACE, CellKind.NORMAL) == 9 + 9 * 21 + 9 * 21 * 45
    assert space_size(RESTRICTED_SPACE) == 9 * (9 + 189 + 8505)


def test_enumeration_matches_count_and_is_unique():
    space = SearchSpace(min_nodes=1, max_nodes=2, ops=(1, 3))
    cells = list(enumerate_cells(space, CellKind.NORMAL))
    assert len(cells) == cell_count(space, CellKind.NORMAL)
    assert len(set(cells)) == len(cells)


def test_brute_force_front():
    pts = np.array([[0, 3], [1, 1], [2, 2], [1, 1], [3, 0]], dtype=float)
    assert brute_force_front(pts).tolist() == [True, True, False, True, True]


def test_bound_is_enforced():
    with pytest.raises(SpaceTooLargeError):
        ground_truth_front(SearchSpace(), RESTRICTED_MACRO, 100)


def test_small_space_front_is_exact():
    space = SearchSpace(min_nodes=1, max_nodes=2, ops=(1, 3), reduction_nodes=(1, 1))
    truth = ground_truth_front(space, RESTRICTED_MACRO, 100)
    from metanas.evaluator import oracle_accuracy
    from metanas.genotype import Individual, count_parameters

    vectors = set()
    reductions = list(enumerate_cells(space, CellKind.REDUCTION))
    for n, r in itertools.product(enumerate_cells(space, CellKind.NORMAL), reductions):
        ind = Individual(0, n, r)
        vectors.add((1 - oracle_accuracy(ind, 100), count_parameters(ind, RESTRICTED_MACRO)))
    expected = {v for v in vectors
                if not any(o[0] <= v[0] and o[1] <= v[1] and o != v for o in vectors)}
    assert truth.vectors() == expected


def test_frozen_fixture_matches_fresh_enumeration():
    frozen = load_fixture(FIXTURES / "restricted_front.json")
    assert frozen.size == 78_327
    assert len(frozen.front) == 3
    for p in frozen.front:
        ind = deserialize(p.example)
        assert validate(ind, RESTRICTED_SPACE).ok
    text = (FIXTURES / "restricted_front.json").read_text()
    truth = ground_truth_front(RESTRICTED_SPACE, RESTRICTED_MACRO, frozen.epochs)
    assert fixture_json(truth, RESTRICTED_SPACE, RESTRICTED_MACRO) == text


def test_fixture_version_check(tmp_path):
    (tmp_path / "f.json").write_text('{"oracle_version": -1}')
    with pytest.raises(ValueError):
        load_fixture(tmp_path / "f.json")
