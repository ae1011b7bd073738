"""Mating selection, two-level crossover and period mutation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .genotype import (
    CellGenotype,
    Individual,
    NodeGene,
    OperationKind,
    SearchSpace,
    random_node,
    repair_cell,
)

RATE_FLOOR = 0.01
RATE_CEIL = 0.99


@dataclass(frozen=True)
class MutationConfig:
    """Period-mutation settings.

    ``periodic=False`` disables the window and always returns the base rates
    (the "no period mutation" ablation).  ``fixed_rates`` bypasses the rate
    schedule (and its clamping) with a constant ``(m_link, m_op)`` pair.
    """

    period_N_l: int = 4
    window_N_h: int = 1
    literal_eq8: bool = False
    node_add_remove_prob: float = 0.05
    periodic: bool = True
    p_hi: float = 0.9
    fixed_rates: tuple[float, float] | None = None

    def __post_init__(self) -> None:
        if self.fixed_rates is not None:
            object.__setattr__(self, "fixed_rates", tuple(float(r) for r in self.fixed_rates))
            if len(self.fixed_rates) != 2 or not all(0.0 <= r <= 1.0 for r in self.fixed_rates):
                raise ValueError("fixed_rates must be two probabilities")
        if not 1 <= self.window_N_h <= self.period_N_l:
            raise ValueError("need 1 <= window_N_h <= period_N_l")
        if not 0.0 <= self.node_add_remove_prob <= 1.0:
            raise ValueError("node_add_remove_prob must be a probability")


@dataclass(frozen=True)
class CrossoverConfig:
    swap_prob: float = 0.5
    intra_prob: float = 1.0


@dataclass(frozen=True)
class MutationRates:
    m_link: float
    m_op: float


# --------------------------------------------------------------------------
# Selection
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Contender:
    individual: Individual
    front: int
    crowding: float


def _tournament_key(c: Contender) -> tuple:
    return (c.front, -c.crowding, c.individual.id)


def binary_tournament(population: Sequence[Contender], count: int,
                      rng: np.random.Generator) -> list[tuple[Individual, Individual]]:
    """Draw ``count`` parent pairs by binary tournament.

    Each tournament samples two members uniformly (with replacement) and keeps
    the lower front, then the larger crowding distance, then the smaller id.
    """
    if not population:
        raise ValueError("empty population")

    def pick() -> Individual:
        a, b = rng.integers(len(population), size=2)
        return min(population[a], population[b], key=_tournament_key).individual

    return [(pick(), pick()) for _ in range(count)]


# --------------------------------------------------------------------------
# Crossover
# --------------------------------------------------------------------------


IdSource = Callable[[], int]


def inter_crossover(p1: Individual, p2: Individual, rng: np.random.Generator, *,
                    next_id: IdSource, birth_generation: int = 0,
                    swap_prob: float = 0.5) -> tuple[Individual, Individual]:
    """Swap whole normal and/or reduction cells between two parents."""
    n1, n2 = p1.normal, p2.normal
    r1, r2 = p1.reduction, p2.reduction
    if rng.random() < swap_prob:
        n1, n2 = n2, n1
    if rng.random() < swap_prob:
        r1, r2 = r2, r1
    o1 = Individual(id=next_id(), normal=n1, reduction=r1, birth_generation=birth_generation)
    o2 = Individual(id=next_id(), normal=n2, reduction=r2, birth_generation=birth_generation)
    return o1, o2


def crossover_point(n0: int, n1: int, rng: np.random.Generator) -> int:
    """Uniform draw over ``[0, n1)``, redrawn until it falls below ``n0``."""
    while True:
        point = int(rng.integers(n1))
        if point < n0:
            return point


def single_point(c0: CellGenotype, c1: CellGenotype, point: int) -> tuple[CellGenotype, CellGenotype]:
    """Exchange node prefixes ``[0, point]`` (inclusive); requires len(c0) <= len(c1)."""
    a, b = c0.nodes, c1.nodes
    new0 = b[: point + 1] + a[point + 1:]
    new1 = a[: point + 1] + b[point + 1:]
    return (repair_cell(CellGenotype(nodes=new0, kind=c0.kind)),
            repair_cell(CellGenotype(nodes=new1, kind=c1.kind)))


def intra_crossover(c0: CellGenotype, c1: CellGenotype,
                    rng: np.random.Generator) -> tuple[CellGenotype, CellGenotype]:
    """Single-point crossover of two same-kind cells.

    Node counts are preserved: the first offspring has ``len(c0)`` nodes,
    the second ``len(c1)``.
    """
    if c0.kind is not c1.kind:
        raise ValueError(f"kind mismatch: {c0.kind.value} vs {c1.kind.value}")
    if len(c0) <= len(c1):
        point = crossover_point(len(c0), len(c1), rng)
        return single_point(c0, c1, point)
    point = crossover_point(len(c1), len(c0), rng)
    short, long = single_point(c1, c0, point)
    return long, short


# --------------------------------------------------------------------------
# Period mutation
# --------------------------------------------------------------------------


def in_window(offspring_index: int, period: int, window: int) -> bool:
    """True iff the index lies in some ``[k*period, k*period + window)``, k >= 1."""
    return offspring_index >= period and offspring_index % period < window


def _clamp(p: float) -> float:
    return min(RATE_CEIL, max(RATE_FLOOR, p))


def mutation_rates(l_v: int, l_o: int, offspring_index: int, cfg: MutationConfig) -> MutationRates:
    if l_v < 2 or l_o < 1:
        raise ValueError(f"invalid arguments l_v={l_v}, l_o={l_o}")
    base = (1.0 / max(1, l_v - l_o), 1.0 / l_o)
    elevated = (1.0 - 1.0 / max(2, l_v - l_o), 1.0 - 1.0 / max(2, l_o))
    if not cfg.periodic:
        chosen = base
    else:
        hit = in_window(offspring_index, cfg.period_N_l, cfg.window_N_h)
        if cfg.literal_eq8:
            chosen = base if hit else elevated
        else:
            chosen = elevated if hit else base
    return MutationRates(m_link=_clamp(chosen[0]), m_op=_clamp(chosen[1]))


def cell_gene_lengths(cell: CellGenotype) -> tuple[int, int]:
    """``(l_v, l_o)`` of a cell: total gene count and node count."""
    n = len(cell)
    return cell.num_link_bits + n, n


def mutate_links_and_ops(cell: CellGenotype, rates: MutationRates, ops: Sequence[OperationKind],
                         rng: np.random.Generator) -> CellGenotype:
    """Bit-flip every link with ``m_link``; resample each op with ``m_op``.

    A resampled operation is drawn uniformly from the allowed ops other than
    the current one.  No repair is applied here.
    """
    nodes = []
    for node in cell.nodes:
        flips = rng.random(len(node.links)) < rates.m_link
        links = tuple(int(b) ^ int(f) for b, f in zip(node.links, flips))
        op = node.op
        if rng.random() < rates.m_op:
            others = [o for o in ops if o != node.op]
            if others:
                op = others[int(rng.integers(len(others)))]
        nodes.append(NodeGene(links=links, op=op))
    return CellGenotype(nodes=tuple(nodes), kind=cell.kind)


def append_node(cell: CellGenotype, ops: Sequence[OperationKind], p_hi: float,
                rng: np.random.Generator) -> CellGenotype:
    node = random_node(len(cell), ops, p_hi, rng)
    return CellGenotype(nodes=cell.nodes + (node,), kind=cell.kind)


def remove_node(cell: CellGenotype, index: int) -> CellGenotype:
    """Drop node ``index`` and delete the matching link bit of later nodes."""
    nodes = list(cell.nodes[:index])
    for node in cell.nodes[index + 1:]:
        bit = index + 2
        nodes.append(NodeGene(links=node.links[:bit] + node.links[bit + 1:], op=node.op))
    return CellGenotype(nodes=tuple(nodes), kind=cell.kind)


def mutate_cell(cell: CellGenotype, rates: MutationRates, space: SearchSpace,
                rng: np.random.Generator, *, add_remove_prob: float = 0.05,
                p_hi: float = 0.9, repair: bool = True) -> CellGenotype:
    out = mutate_links_and_ops(cell, rates, space.ops, rng)
    if add_remove_prob > 0 and rng.random() < add_remove_prob:
        lo, hi = space.node_range(cell.kind)
        actions = []
        if len(out) < hi:
            actions.append("add")
        if len(out) > lo:
            actions.append("remove")
        if actions:
            action = actions[int(rng.integers(len(actions)))]
            if action == "add":
                out = append_node(out, space.ops, p_hi, rng)
            else:
                out = remove_node(out, int(rng.integers(len(out))))
    return repair_cell(out) if repair else out


def period_mutation(ind: Individual, offspring_index: int, cfg: MutationConfig,
                    rng: np.random.Generator, *, space: SearchSpace, next_id: IdSource,
                    birth_generation: int | None = None,
                    rates: MutationRates | None = None) -> Individual:
    """Mutate both cells of ``ind`` with period-dependent rates.

    Rates come from :func:`mutation_rates` with each cell's own ``(l_v, l_o)``
    unless ``rates`` (or ``cfg.fixed_rates``) forces a fixed pair.
    """
    if rates is None and cfg.fixed_rates is not None:
        rates = MutationRates(*cfg.fixed_rates)
    cells = []
    for cell in (ind.normal, ind.reduction):
        r = rates or mutation_rates(*cell_gene_lengths(cell), offspring_index, cfg)
        cells.append(mutate_cell(cell, r, space, rng, add_remove_prob=cfg.node_add_remove_prob,
                                 p_hi=cfg.p_hi))
    return ind.with_cells(cells[0], cells[1], id=next_id(), birth_generation=birth_generation)


def counter(start: int = 0) -> IdSource:
    """A simple monotone id source."""
    state = [start]

    def take() -> int:
        value = state[0]
        state[0] += 1
        return value

    return take
