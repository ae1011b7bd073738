from __future__ import annotations

from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metanas.genetic import (
    RATE_CEIL,
    RATE_FLOOR,
    Contender,
    MutationConfig,
    MutationRates,
    binary_tournament,
    cell_gene_lengths,
    counter,
    crossover_point,
    in_window,
    inter_crossover,
    intra_crossover,
    mutate_cell,
    mutation_rates,
    period_mutation,
    remove_node,
)
from metanas.genotype import CellKind, InitConfig, SearchSpace, random_cell, random_individual, validate

from helpers import cell

SPACE = SearchSpace(min_nodes=1, max_nodes=8)


def _cells(seed: int, kind=CellKind.NORMAL):
    rng = np.random.default_rng(seed)
    cfg = InitConfig(space=SPACE)
    return random_cell(kind, cfg, rng), random_cell(kind, cfg, rng)


def _pair(r: MutationRates) -> tuple[float, float]:
    return (r.m_link, r.m_op)


def test_window_membership():
    hits = [i for i in range(20) if in_window(i, 4, 1)]
    assert hits == [4, 8, 12, 16]
    assert [i for i in range(12) if in_window(i, 4, 2)] == [4, 5, 8, 9]


def test_rates_default_and_literal_modes():
    # l_v=12, l_o=9: base (1/3, 1/9), elevated (2/3, 8/9)
    default = MutationConfig()
    literal = MutationConfig(literal_eq8=True)
    assert _pair(mutation_rates(12, 9, 1, default)) == pytest.approx((1 / 3, 1 / 9))
    assert _pair(mutation_rates(12, 9, 4, default)) == pytest.approx((2 / 3, 8 / 9))
    assert _pair(mutation_rates(12, 9, 1, literal)) == pytest.approx((2 / 3, 8 / 9))
    assert _pair(mutation_rates(12, 9, 4, literal)) == pytest.approx((1 / 3, 1 / 9))
    off = MutationConfig(periodic=False)
    assert mutation_rates(12, 9, 4, off) == mutation_rates(12, 9, 1, default)


@given(st.integers(2, 200), st.integers(1, 60), st.integers(0, 50), st.booleans())
def test_rates_are_clamped(l_v, l_o, index, literal):
    r = mutation_rates(l_v, l_o, index, MutationConfig(literal_eq8=literal))
    for p in (r.m_link, r.m_op):
        assert RATE_FLOOR <= p <= RATE_CEIL


def test_rates_reject_bad_lengths():
    with pytest.raises(ValueError):
        mutation_rates(1, 1, 0, MutationConfig())
    with pytest.raises(ValueError):
        mutation_rates(5, 0, 0, MutationConfig())


def test_gene_lengths():
    c = cell(CellKind.NORMAL, ("10", 1), ("011", 2), ("0001", 3))
    assert cell_gene_lengths(c) == (9 + 3, 3)


def test_crossover_point_in_range(rng):
    for _ in range(200):
        p = crossover_point(3, 7, rng)
        assert 0 <= p < 3


@given(st.integers(0, 10_000))
def test_intra_crossover_keeps_node_counts_and_validity(seed):
    a, b = _cells(seed)
    x, y = intra_crossover(a, b, np.random.default_rng(seed))
    assert (len(x), len(y)) == (len(a), len(b))
    assert all(any(n.links) for n in x.nodes + y.nodes)
    assert all(len(n.links) == j + 2 for c in (x, y) for j, n in enumerate(c.nodes))


def test_intra_crossover_rejects_mixed_kinds(rng):
    a, _ = _cells(0)
    b, _ = _cells(0, CellKind.REDUCTION)
    with pytest.raises(ValueError):
        intra_crossover(a, b, rng)


@given(st.integers(0, 10_000))
def test_inter_crossover_conserves_cells(seed):
    rng = np.random.default_rng(seed)
    cfg = InitConfig(space=SPACE)
    p1, p2 = random_individual(cfg, rng, id=0), random_individual(cfg, rng, id=1)
    ids = counter(10)
    o1, o2 = inter_crossover(p1, p2, rng, next_id=ids)
    before = Counter([p1.normal, p1.reduction, p2.normal, p2.reduction])
    after = Counter([o1.normal, o1.reduction, o2.normal, o2.reduction])
    assert before == after
    assert (o1.id, o2.id) == (10, 11)


def test_tournament_prefers_lower_front_then_crowding(rng):
    cfg = InitConfig(space=SPACE)
    inds = [random_individual(cfg, rng, id=i) for i in range(3)]
    pop = [Contender(inds[0], 1, 5.0), Contender(inds[1], 0, 0.1), Contender(inds[2], 0, 2.0)]
    wins = Counter(a.id for pair in binary_tournament(pop, 3000, rng) for a in pair)
    # inds[0] only wins when drawn against itself: 1/9 of tournaments
    assert wins[0] / 6000 == pytest.approx(1 / 9, abs=0.02)
    assert wins[2] > wins[1]


def test_remove_node_drops_matching_link_bit():
    c = cell(CellKind.NORMAL, ("10", 1), ("011", 2), ("0011", 3))
    out = remove_node(c, 0)
    assert [n.links for n in out.nodes] == [(0, 1), (0, 0, 1)]


@given(st.integers(0, 10_000), st.integers(0, 40))
def test_mutation_output_is_valid(seed, index):
    rng = np.random.default_rng(seed)
    space = SearchSpace(min_nodes=2, max_nodes=5, ops=(1, 3, 7))
    ind = random_individual(InitConfig(space=space), rng)
    child = period_mutation(ind, index, MutationConfig(node_add_remove_prob=0.5), rng,
                            space=space, next_id=counter(99))
    assert validate(child, space).ok
    assert child.id == 99


def test_zero_rates_are_identity(rng):
    ind = random_individual(InitConfig(space=SPACE), rng)
    cfg = MutationConfig(fixed_rates=(0.0, 0.0), node_add_remove_prob=0.0)
    child = period_mutation(ind, 4, cfg, rng, space=SPACE, next_id=counter(1))
    assert child.same_genotype(ind)


def test_add_remove_respects_bounds(rng):
    space = SearchSpace(min_nodes=2, max_nodes=2)
    c = random_cell(CellKind.NORMAL, InitConfig(space=space), rng)
    for _ in range(50):
        out = mutate_cell(c, MutationRates(0.0, 0.0), space, rng, add_remove_prob=1.0)
        assert len(out) == 2


def test_fixed_rates_validation():
    with pytest.raises(ValueError):
        MutationConfig(fixed_rates=(0.5, 1.5))
    with pytest.raises(ValueError):
        MutationConfig(period_N_l=2, window_N_h=3)
