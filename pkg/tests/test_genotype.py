from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metanas.enumeration import RESTRICTED_MACRO
from metanas.genotype import (
    ALL_OPS,
    CellKind,
    DecodeError,
    InitConfig,
    InvalidConfigError,
    MacroConfig,
    NodeGene,
    OperationKind,
    SearchSpace,
    count_parameters,
    decode,
    deserialize,
    random_individual,
    repair_node,
    serialize,
    validate,
)

from helpers import individual


@st.composite
def individuals(draw, max_nodes: int = 6):
    seed = draw(st.integers(0, 2**32 - 1))
    lo = draw(st.integers(1, max_nodes))
    hi = draw(st.integers(lo, max_nodes))
    space = SearchSpace(min_nodes=lo, max_nodes=hi)
    return random_individual(InitConfig(space=space), np.random.default_rng(seed))


def test_operation_labels_round_trip():
    for op in ALL_OPS:
        assert OperationKind.from_label(op.label) is op
    assert [int(o) for o in ALL_OPS] == list(range(1, 13))


def test_repair_sets_first_input_only_on_inputless_nodes():
    assert repair_node(NodeGene((0, 0, 0), 3)) == NodeGene((1, 0, 0), 3)
    untouched = NodeGene((0, 0, 1), 3)
    assert repair_node(untouched) is untouched


@given(individuals())
def test_random_individuals_are_valid(ind):
    assert validate(ind).ok


@given(individuals())
def test_serialize_round_trip(ind):
    text = serialize(ind)
    back = deserialize(text, id=ind.id)
    assert back == ind
    assert serialize(back) == text


def test_validate_reports_every_violation():
    ind = individual([("00", 1), ("011", 13)], [("1", 2)])
    report = validate(ind)
    assert not report
    text = " | ".join(report.violations)
    assert "inputless" in text
    assert "op index 13" in text
    assert "link length 1" in text


def test_validate_against_space_checks_ops_and_counts():
    space = SearchSpace(min_nodes=2, max_nodes=3, ops=(1, 3))
    ind = individual([("01", 2)], [("10", 1), ("110", 3)])
    violations = validate(ind, space).violations
    assert any("node count 1" in v for v in violations)
    assert any("not in search space" in v for v in violations)


def test_search_space_rejects_bad_ranges():
    with pytest.raises(InvalidConfigError):
        SearchSpace(min_nodes=0, max_nodes=3)
    with pytest.raises(InvalidConfigError):
        SearchSpace(min_nodes=4, max_nodes=3)
    with pytest.raises(InvalidConfigError):
        SearchSpace(min_nodes=1, max_nodes=13)
    with pytest.raises(InvalidConfigError):
        SearchSpace(ops=(1, 1))


def test_default_reduction_positions():
    assert MacroConfig(num_cells=20).reduction_positions == (6, 13)
    assert MacroConfig(num_cells=6).reduction_positions == (2, 4)
    with pytest.raises(InvalidConfigError):
        MacroConfig(num_cells=2, reduction_positions=(2,))


def test_leaves_are_unconsumed_nodes():
    ind = individual([("10", 1), ("011", 3), ("1000", 7)], [("11", 1)])
    assert ind.normal.leaves() == (1, 2)


# Parameter counts below are worked out by hand for the two-cell restricted
# macro (C=4, 8x8x1 input, 2 classes, cell 1 reducing):
#   stem 3*3*1*4+4 = 40, head 8*2+2 = 18
#   normal conv3x3 = 9*4*4+4 = 148, normal projection of one leaf = 4*4+4 = 20
#   reduction input alignment 4->8 = 4*8+8 = 40, projection of one leaf = 8*8+8 = 72
HAND_COUNTS = [
    (([("01", 1)], [("01", 1)]), 40 + 20 + 40 + 72 + 18),
    (([("01", 3)], [("01", 1)]), 40 + 148 + 20 + 40 + 72 + 18),
    (([("01", 3), ("001", 3)], [("01", 1)]), 40 + 2 * 148 + 20 + 40 + 72 + 18),
]


@pytest.mark.parametrize("cells,expected", HAND_COUNTS)
def test_parameter_count_matches_hand_derivation(cells, expected):
    assert count_parameters(individual(*cells), RESTRICTED_MACRO) == expected


def test_parameter_count_two_leaves_and_both_slots():
    # normal: two independent conv1x1 nodes on in0 and in1 -> projection 8->4
    # reduction: SE on both slots; both slots need 4->8 alignment
    ind = individual([("10", 2), ("010", 2)], [("11", 12)])
    stem, head = 40, 18
    normal = 2 * (4 * 4 + 4) + (8 * 4 + 4)
    reduction = 2 * (4 * 8 + 8) + 2 * 8 * 1 + (8 * 8 + 8)
    assert count_parameters(ind, RESTRICTED_MACRO) == stem + normal + reduction + head


def test_decode_shapes_and_alignment():
    macro = MacroConfig(num_cells=3, channels=4, input_shape=(8, 8, 1), num_classes=2,
                        reduction_positions=(1,))
    ind = individual([("11", 3)], [("11", 1)])
    graph = decode(ind, macro)
    c0, c1, c2 = graph.cells
    assert (c0.channels, c0.hw_out) == (4, (8, 8))
    assert (c1.channels, c1.hw_in, c1.hw_out) == (8, (8, 8), (4, 4))
    assert [s.align for s in c1.slots] == [True, True]
    # cell 2 reads cell 0 (4ch, 8x8) and cell 1 (8ch, 4x4)
    assert c2.slots[0].align and c2.slots[0].stride == 2
    assert not c2.slots[1].align
    assert graph.output_channels == 8
    json.loads(graph.to_json())
    assert graph.to_dot().startswith("digraph")


def test_decode_rejects_invalid_individual():
    with pytest.raises(DecodeError):
        decode(individual([("00", 1)], [("01", 1)]), RESTRICTED_MACRO)


@given(individuals(max_nodes=4))
def test_unused_slot_never_aligns(ind):
    graph = decode(ind, RESTRICTED_MACRO)
    for c in graph.cells:
        for s in c.slots:
            assert s.align <= s.used
    assert graph.cells[1].kind is CellKind.REDUCTION
