"""Cell-based architecture encoding.

An individual holds two cells (normal and reduction).  Each cell is an
ordered list of nodes; node ``j`` carries ``j + 2`` link bits
``(l_in0, l_in1, l_0, ..., l_{j-1})`` and one operation index from the
12-entry vocabulary in :class:`OperationKind`.

Text format (one line per cell, normal first)::

    normal;11:3;101:7;0011:1
    reduction;10:2;011:12

where each node is ``bits:opIndex``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

HARD_MIN_NODES = 1
HARD_MAX_NODES = 12
SE_REDUCTION = 16


class InvalidConfigError(ValueError):
    pass


class DecodeError(ValueError):
    pass


class OperationKind(enum.IntEnum):
    IDENTITY = 1
    CONV_1X1 = 2
    CONV_3X3 = 3
    CONV_1X3_3X1 = 4
    CONV_1X7_7X1 = 5
    MAX_POOL_2 = 6
    MAX_POOL_3 = 7
    MAX_POOL_5 = 8
    AVG_POOL_2 = 9
    AVG_POOL_3 = 10
    AVG_POOL_5 = 11
    SE_LAYER = 12

    @property
    def label(self) -> str:
        return _LABELS[self]

    @classmethod
    def from_label(cls, label: str) -> "OperationKind":
        for op, name in _LABELS.items():
            if name == label:
                return op
        raise KeyError(label)

    @property
    def is_conv(self) -> bool:
        return self in CONV_KERNELS

    @property
    def pool(self) -> tuple[str, int] | None:
        return POOLS.get(self)


_LABELS = {
    OperationKind.IDENTITY: "Identity",
    OperationKind.CONV_1X1: "Conv1x1",
    OperationKind.CONV_3X3: "Conv3x3",
    OperationKind.CONV_1X3_3X1: "Conv1x3_3x1",
    OperationKind.CONV_1X7_7X1: "Conv1x7_7x1",
    OperationKind.MAX_POOL_2: "MaxPool2",
    OperationKind.MAX_POOL_3: "MaxPool3",
    OperationKind.MAX_POOL_5: "MaxPool5",
    OperationKind.AVG_POOL_2: "AvgPool2",
    OperationKind.AVG_POOL_3: "AvgPool3",
    OperationKind.AVG_POOL_5: "AvgPool5",
    OperationKind.SE_LAYER: "SELayer",
}

# (kh, kw) of each convolution in application order
CONV_KERNELS: dict[OperationKind, tuple[tuple[int, int], ...]] = {
    OperationKind.CONV_1X1: ((1, 1),),
    OperationKind.CONV_3X3: ((3, 3),),
    OperationKind.CONV_1X3_3X1: ((1, 3), (3, 1)),
    OperationKind.CONV_1X7_7X1: ((1, 7), (7, 1)),
}

POOLS: dict[OperationKind, tuple[str, int]] = {
    OperationKind.MAX_POOL_2: ("max", 2),
    OperationKind.MAX_POOL_3: ("max", 3),
    OperationKind.MAX_POOL_5: ("max", 5),
    OperationKind.AVG_POOL_2: ("avg", 2),
    OperationKind.AVG_POOL_3: ("avg", 3),
    OperationKind.AVG_POOL_5: ("avg", 5),
}

ALL_OPS: tuple[OperationKind, ...] = tuple(OperationKind)


class CellKind(str, enum.Enum):
    NORMAL = "normal"
    REDUCTION = "reduction"


# --------------------------------------------------------------------------
# Genotype value objects
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NodeGene:
    links: tuple[int, ...]
    op: int

    @property
    def operation(self) -> OperationKind:
        return OperationKind(self.op)

    def bits(self) -> str:
        return "".join(str(b) for b in self.links)


@dataclass(frozen=True)
class CellGenotype:
    nodes: tuple[NodeGene, ...]
    kind: CellKind

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def num_link_bits(self) -> int:
        return sum(len(n.links) for n in self.nodes)

    @property
    def link_density(self) -> float:
        total = self.num_link_bits
        return sum(sum(n.links) for n in self.nodes) / total if total else 0.0

    def op_histogram(self) -> np.ndarray:
        """Counts per operation, index 0 holds op 1."""
        hist = np.zeros(len(OperationKind), dtype=np.int64)
        for node in self.nodes:
            hist[int(node.op) - 1] += 1
        return hist

    def leaves(self) -> tuple[int, ...]:
        consumed = set()
        for node in self.nodes:
            consumed.update(t for t, bit in enumerate(node.links[2:]) if bit)
        return tuple(j for j in range(len(self.nodes)) if j not in consumed)

    def to_text(self) -> str:
        parts = [self.kind.value] + [f"{n.bits()}:{int(n.op)}" for n in self.nodes]
        return ";".join(parts)


@dataclass(frozen=True)
class Individual:
    id: int
    normal: CellGenotype
    reduction: CellGenotype
    birth_generation: int = 0

    def cell(self, kind: CellKind) -> CellGenotype:
        return self.normal if kind is CellKind.NORMAL else self.reduction

    def same_genotype(self, other: "Individual") -> bool:
        return self.normal == other.normal and self.reduction == other.reduction

    def with_cells(self, normal: CellGenotype, reduction: CellGenotype, *, id: int,
                   birth_generation: int | None = None) -> "Individual":
        gen = self.birth_generation if birth_generation is None else birth_generation
        return Individual(id=id, normal=normal, reduction=reduction, birth_generation=gen)


# --------------------------------------------------------------------------
# Search space and initialization
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    """Admissible node counts and operation subset.

    ``reduction_nodes`` overrides the node range of the reduction cell; the
    default applies ``(min_nodes, max_nodes)`` to both cells.
    """

    min_nodes: int = 5
    max_nodes: int = 12
    ops: tuple[OperationKind, ...] = ALL_OPS
    reduction_nodes: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "ops", tuple(OperationKind(o) for o in self.ops))
        if self.reduction_nodes is not None:
            object.__setattr__(self, "reduction_nodes", tuple(self.reduction_nodes))
        for lo, hi in (self.node_range(CellKind.NORMAL), self.node_range(CellKind.REDUCTION)):
            if not HARD_MIN_NODES <= lo <= hi <= HARD_MAX_NODES:
                raise InvalidConfigError(
                    f"node range [{lo}, {hi}] outside [{HARD_MIN_NODES}, {HARD_MAX_NODES}]")
        if not self.ops or len(set(self.ops)) != len(self.ops):
            raise InvalidConfigError("ops must be a non-empty set of operation indices")

    def node_range(self, kind: CellKind) -> tuple[int, int]:
        if kind is CellKind.REDUCTION and self.reduction_nodes is not None:
            return self.reduction_nodes
        return (self.min_nodes, self.max_nodes)


@dataclass(frozen=True)
class InitConfig:
    space: SearchSpace = field(default_factory=SearchSpace)
    p_hi: float = 0.9

    def __post_init__(self) -> None:
        if not 0.0 < self.p_hi <= 1.0:
            raise InvalidConfigError(f"p_hi must lie in (0, 1], got {self.p_hi}")


def repair_node(node: NodeGene) -> NodeGene:
    """Force ``l_in0 = 1`` on a node without any input link."""
    if any(node.links):
        return node
    return NodeGene(links=(1,) + node.links[1:], op=node.op)


def repair_cell(cell: CellGenotype) -> CellGenotype:
    nodes = tuple(repair_node(n) for n in cell.nodes)
    if nodes == cell.nodes:
        return cell
    return CellGenotype(nodes=nodes, kind=cell.kind)


def random_node(position: int, ops: Sequence[OperationKind], p_hi: float,
                rng: np.random.Generator) -> NodeGene:
    head = (rng.random(2) < p_hi).astype(int)
    tail = rng.integers(0, 2, size=position)
    op = ops[int(rng.integers(len(ops)))]
    return repair_node(NodeGene(links=tuple(int(b) for b in np.concatenate([head, tail])),
                                op=op))


def random_cell(kind: CellKind, cfg: InitConfig, rng: np.random.Generator) -> CellGenotype:
    lo, hi = cfg.space.node_range(kind)
    n = int(rng.integers(lo, hi + 1))
    nodes = tuple(random_node(j, cfg.space.ops, cfg.p_hi, rng) for j in range(n))
    return CellGenotype(nodes=nodes, kind=kind)


def random_individual(cfg: InitConfig, rng: np.random.Generator, *, id: int = 0,
                      birth_generation: int = 0) -> Individual:
    """Sample an Inception-like individual.

    The two input-link bits of every node are set with probability
    ``cfg.p_hi``; all other link bits are fair coin flips and operations are
    uniform over ``cfg.space.ops``.
    """
    normal = random_cell(CellKind.NORMAL, cfg, rng)
    reduction = random_cell(CellKind.REDUCTION, cfg, rng)
    return Individual(id=id, normal=normal, reduction=reduction,
                      birth_generation=birth_generation)


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _cell_violations(cell: CellGenotype, expected: CellKind,
                     space: SearchSpace | None) -> list[str]:
    out = []
    tag = expected.value
    if cell.kind is not expected:
        out.append(f"{tag}: kind mismatch ({cell.kind!r})")
    lo, hi = space.node_range(expected) if space else (HARD_MIN_NODES, HARD_MAX_NODES)
    if not lo <= len(cell.nodes) <= hi:
        out.append(f"{tag}: node count {len(cell.nodes)} outside [{lo}, {hi}]")
    allowed = set(space.ops) if space else set(ALL_OPS)
    for j, node in enumerate(cell.nodes):
        if len(node.links) != j + 2:
            out.append(f"{tag} node {j}: link length {len(node.links)} (expected {j + 2})")
        if any(b not in (0, 1) for b in node.links):
            out.append(f"{tag} node {j}: link bits must be 0/1")
        if not any(node.links):
            out.append(f"{tag} node {j}: inputless node")
        if not 1 <= int(node.op) <= 12:
            out.append(f"{tag} node {j}: op index {node.op} out of range")
        elif int(node.op) not in allowed:
            out.append(f"{tag} node {j}: op index {node.op} not in search space")
    return out


def validate(ind: Individual, space: SearchSpace | None = None) -> ValidationReport:
    """Collect every invariant violation of ``ind``.

    Without ``space`` only the hard bounds (1..12 nodes, ops 1..12) apply.
    """
    violations = _cell_violations(ind.normal, CellKind.NORMAL, space)
    violations += _cell_violations(ind.reduction, CellKind.REDUCTION, space)
    return ValidationReport(tuple(violations))


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def serialize(ind: Individual) -> str:
    return ind.normal.to_text() + "\n" + ind.reduction.to_text() + "\n"


def parse_cell(line: str) -> CellGenotype:
    kind_text, *node_texts = line.strip().split(";")
    nodes = []
    for text in node_texts:
        bits, op = text.split(":")
        nodes.append(NodeGene(links=tuple(int(b) for b in bits), op=int(op)))
    return CellGenotype(nodes=tuple(nodes), kind=CellKind(kind_text))


def deserialize(text: str, *, id: int = 0, birth_generation: int = 0) -> Individual:
    cells = {c.kind: c for c in (parse_cell(line) for line in text.splitlines() if line.strip())}
    if set(cells) != {CellKind.NORMAL, CellKind.REDUCTION}:
        raise ValueError("genotype text needs exactly one normal and one reduction line")
    return Individual(id=id, normal=cells[CellKind.NORMAL], reduction=cells[CellKind.REDUCTION],
                      birth_generation=birth_generation)


# --------------------------------------------------------------------------
# Macro network and decoding
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MacroConfig:
    num_cells: int = 20
    channels: int = 40
    input_shape: tuple[int, int, int] = (32, 32, 3)
    num_classes: int = 10
    reduction_positions: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if self.num_cells < 1 or self.channels < 1 or self.num_classes < 1:
            raise InvalidConfigError("num_cells, channels and num_classes must be >= 1")
        if self.reduction_positions is None:
            n = self.num_cells
            positions = tuple(sorted({n // 3, (2 * n) // 3}))
        else:
            positions = tuple(sorted(set(self.reduction_positions)))
        if any(not 0 <= p < self.num_cells for p in positions):
            raise InvalidConfigError(f"reduction positions {positions} outside [0, {self.num_cells})")
        object.__setattr__(self, "reduction_positions", positions)


Source = Union[str, int]  # "in0" / "in1" or an intra-cell node index


@dataclass(frozen=True)
class SlotBinding:
    """One of the two cell input slots.

    ``source`` is the producing cell index, or -1 for the stem.  ``align`` is
    true when the slot is consumed and its tensor shape differs from the
    cell's working shape, in which case a 1x1 convolution (strided when the
    resolution differs) maps it onto ``channels`` x ``hw_out``.
    """

    slot: int
    source: int
    c_in: int
    channels: int
    hw_in: tuple[int, int]
    hw_out: tuple[int, int]
    stride: int
    used: bool

    @property
    def align(self) -> bool:
        return self.used and (self.c_in != self.channels or self.hw_in != self.hw_out)


@dataclass(frozen=True)
class OpNode:
    """A hidden node: its linked sources are summed, then ``op`` applied.

    In a reduction cell ``stride`` is 2 and applies to the cell-input
    contributions; intra-cell contributions are already at the reduced
    resolution and go through the same weights with stride 1.
    """

    index: int
    op: OperationKind
    sources: tuple[Source, ...]
    stride: int
    channels: int


@dataclass(frozen=True)
class CellGraph:
    index: int
    kind: CellKind
    channels: int
    hw_in: tuple[int, int]
    hw_out: tuple[int, int]
    slots: tuple[SlotBinding, SlotBinding]
    nodes: tuple[OpNode, ...]
    leaves: tuple[int, ...]

    @property
    def projection_in(self) -> int:
        return len(self.leaves) * self.channels


@dataclass(frozen=True)
class ArchitectureGraph:
    input_shape: tuple[int, int, int]
    stem_channels: int
    cells: tuple[CellGraph, ...]
    num_classes: int

    @property
    def output_channels(self) -> int:
        return self.cells[-1].channels if self.cells else self.stem_channels

    def to_json(self) -> str:
        def enc(o):
            if isinstance(o, enum.Enum):
                return o.value if isinstance(o, CellKind) else int(o)
            raise TypeError(type(o))

        payload = {
            "input_shape": self.input_shape,
            "stem_channels": self.stem_channels,
            "num_classes": self.num_classes,
            "cells": [
                {
                    "index": c.index, "kind": c.kind, "channels": c.channels,
                    "hw_in": c.hw_in, "hw_out": c.hw_out,
                    "slots": [s.__dict__ for s in c.slots],
                    "nodes": [{"index": n.index, "op": n.op, "sources": n.sources,
                               "stride": n.stride, "channels": n.channels} for n in c.nodes],
                    "leaves": c.leaves,
                }
                for c in self.cells
            ],
        }
        return json.dumps(payload, default=enc, sort_keys=True)

    def to_dot(self) -> str:
        lines = ["digraph architecture {", '  stem [label="stem"];']
        prev, prev_prev = "stem", "stem"
        for cell in self.cells:
            c = f"c{cell.index}"
            lines.append(f"  subgraph cluster_{c} {{")
            lines.append(f'    label="cell {cell.index} ({cell.kind.value})";')
            for slot, src in zip(cell.slots, (prev_prev, prev)):
                lines.append(f'    {c}_in{slot.slot} [label="in{slot.slot}"];')
            for node in cell.nodes:
                lines.append(f'    {c}_n{node.index} [label="{node.op.label}"];')
            lines.append(f'    {c}_out [label="concat+1x1"];')
            lines.append("  }")
            lines.append(f"  {prev_prev} -> {c}_in0;")
            lines.append(f"  {prev} -> {c}_in1;")
            for node in cell.nodes:
                for s in node.sources:
                    src = f"{c}_{s}" if isinstance(s, str) else f"{c}_n{s}"
                    lines.append(f"  {src} -> {c}_n{node.index};")
            for leaf in cell.leaves:
                lines.append(f"  {c}_n{leaf} -> {c}_out;")
            prev_prev, prev = prev, f"{c}_out"
        lines.append('  head [label="gap+linear"];')
        lines.append(f"  {prev} -> head;")
        lines.append("}")
        return "\n".join(lines) + "\n"


def _half(hw: tuple[int, int]) -> tuple[int, int]:
    return ((hw[0] + 1) // 2, (hw[1] + 1) // 2)


def _align_stride(hw_in: tuple[int, int], hw_out: tuple[int, int]) -> int:
    for s in range(1, max(hw_in) + 1):
        if all(-(-a // s) == b for a, b in zip(hw_in, hw_out)):
            return s
    raise DecodeError(f"cannot align resolution {hw_in} onto {hw_out}")


def _node_sources(node: NodeGene) -> tuple[Source, ...]:
    out: list[Source] = []
    if node.links[0]:
        out.append("in0")
    if node.links[1]:
        out.append("in1")
    out.extend(t for t, bit in enumerate(node.links[2:]) if bit)
    return tuple(out)


def decode(ind: Individual, macro: MacroConfig) -> ArchitectureGraph:
    """Expand ``ind`` into the stacked-cell network described by ``macro``.

    Cell ``k`` reads the outputs of cells ``k-2`` and ``k-1`` (the stem
    stands in for missing predecessors).  Reduction cells double the channel
    count and halve the resolution.
    """
    report = validate(ind)
    if not report.ok:
        raise DecodeError("; ".join(report.violations))
    h, w, _ = macro.input_shape
    stem_shape = (macro.channels, (h, w))
    outputs = [stem_shape, stem_shape]  # (channels, hw) of the two most recent producers
    producers = [-1, -1]
    cells = []
    channels = macro.channels
    for k in range(macro.num_cells):
        reduction = k in macro.reduction_positions
        genotype = ind.reduction if reduction else ind.normal
        if reduction:
            channels *= 2
        hw_in = outputs[1][1]
        hw_out = _half(hw_in) if reduction else hw_in
        used = [any(n.links[s] for n in genotype.nodes) for s in (0, 1)]
        slots = tuple(
            SlotBinding(slot=s, source=producers[s], c_in=outputs[s][0], channels=channels,
                        hw_in=outputs[s][1], hw_out=hw_in,
                        stride=_align_stride(outputs[s][1], hw_in), used=used[s])
            for s in (0, 1)
        )
        nodes = tuple(
            OpNode(index=j, op=OperationKind(n.op), sources=_node_sources(n),
                   stride=2 if reduction else 1, channels=channels)
            for j, n in enumerate(genotype.nodes)
        )
        cells.append(CellGraph(index=k, kind=genotype.kind, channels=channels, hw_in=hw_in,
                               hw_out=hw_out, slots=slots, nodes=nodes,
                               leaves=genotype.leaves()))
        outputs = [outputs[1], (channels, hw_out)]
        producers = [producers[1], k]
    return ArchitectureGraph(input_shape=tuple(macro.input_shape), stem_channels=macro.channels,
                             cells=tuple(cells), num_classes=macro.num_classes)


# --------------------------------------------------------------------------
# Parameter counting
# --------------------------------------------------------------------------


def conv_params(kh: int, kw: int, c_in: int, c_out: int) -> int:
    return kh * kw * c_in * c_out + c_out


def se_hidden(channels: int) -> int:
    return math.ceil(channels / SE_REDUCTION)


def op_params(op: OperationKind, channels: int) -> int:
    if op in CONV_KERNELS:
        return sum(conv_params(kh, kw, channels, channels) for kh, kw in CONV_KERNELS[op])
    if op is OperationKind.SE_LAYER:
        return 2 * channels * se_hidden(channels)
    return 0


def cell_params(cell: CellGraph) -> int:
    total = sum(conv_params(1, 1, s.c_in, s.channels) for s in cell.slots if s.align)
    total += sum(op_params(n.op, n.channels) for n in cell.nodes)
    total += conv_params(1, 1, cell.projection_in, cell.channels)
    return total


def graph_params(graph: ArchitectureGraph) -> int:
    stem = conv_params(3, 3, graph.input_shape[2], graph.stem_channels)
    head = graph.output_channels * graph.num_classes + graph.num_classes
    return stem + sum(cell_params(c) for c in graph.cells) + head


def count_parameters(ind: Individual, macro: MacroConfig) -> int:
    """Learnable parameters of the decoded network (convs carry biases, no BN)."""
    return graph_params(decode(ind, macro))


def iter_cells(ind: Individual) -> Iterable[CellGenotype]:
    yield ind.normal
    yield ind.reduction
