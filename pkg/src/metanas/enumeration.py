"""Exhaustive enumeration of small search spaces and their exact Pareto front."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .evaluator import ORACLE_VERSION, oracle_accuracy
from .genotype import (
    CellGenotype,
    CellKind,
    Individual,
    MacroConfig,
    NodeGene,
    OperationKind,
    SearchSpace,
    count_parameters,
    serialize,
)

DEFAULT_BOUND = 10**6

RESTRICTED_OPS = (OperationKind.IDENTITY, OperationKind.CONV_3X3, OperationKind.MAX_POOL_3)
RESTRICTED_SPACE = SearchSpace(min_nodes=1, max_nodes=3, ops=RESTRICTED_OPS,
                               reduction_nodes=(1, 1))
RESTRICTED_MACRO = MacroConfig(num_cells=2, channels=4, input_shape=(8, 8, 1), num_classes=2,
                               reduction_positions=(1,))


class SpaceTooLargeError(ValueError):
    pass


def cell_count(space: SearchSpace, kind: CellKind) -> int:
    """Number of valid cells: each node needs at least one set link bit."""
    lo, hi = space.node_range(kind)
    k = len(space.ops)
    return sum(math.prod((2 ** (j + 2) - 1) * k for j in range(n)) for n in range(lo, hi + 1))


def space_size(space: SearchSpace) -> int:
    return cell_count(space, CellKind.NORMAL) * cell_count(space, CellKind.REDUCTION)


def _node_choices(position: int, ops) -> list[NodeGene]:
    width = position + 2
    out = []
    for bits in itertools.product((0, 1), repeat=width):
        if any(bits):
            out.extend(NodeGene(links=bits, op=int(op)) for op in ops)
    return out


def enumerate_cells(space: SearchSpace, kind: CellKind) -> Iterator[CellGenotype]:
    lo, hi = space.node_range(kind)
    for n in range(lo, hi + 1):
        for nodes in itertools.product(*(_node_choices(j, space.ops) for j in range(n))):
            yield CellGenotype(nodes=tuple(nodes), kind=kind)


def enumerate_individuals(space: SearchSpace) -> Iterator[Individual]:
    reductions = list(enumerate_cells(space, CellKind.REDUCTION))
    i = 0
    for normal in enumerate_cells(space, CellKind.NORMAL):
        for reduction in reductions:
            yield Individual(id=i, normal=normal, reduction=reduction)
            i += 1


def brute_force_front(points: np.ndarray) -> np.ndarray:
    """Mask of non-dominated rows of an ``(n, 2)`` array, by all-pairs comparison."""
    le = (points[None, :, :] <= points[:, None, :]).all(axis=2)
    lt = (points[None, :, :] < points[:, None, :]).any(axis=2)
    dominated = (le & lt).any(axis=1)
    return ~dominated


@dataclass(frozen=True)
class FrontPoint:
    f1: float
    f2: int
    example: str
    count: int


@dataclass(frozen=True)
class GroundTruth:
    size: int
    epochs: int
    front: tuple[FrontPoint, ...]

    def vectors(self) -> set[tuple[float, int]]:
        return {(p.f1, p.f2) for p in self.front}


def ground_truth_front(space: SearchSpace, macro: MacroConfig, epochs: int,
                       bound: int = DEFAULT_BOUND) -> GroundTruth:
    """Score every genotype with the oracle and keep the exact Pareto set.

    Objective vectors are deduplicated before the all-pairs dominance check;
    each front point keeps the first genotype (in enumeration order) that
    attains it and the number of genotypes that do.
    """
    size = space_size(space)
    if size > bound:
        raise SpaceTooLargeError(f"space has {size} genotypes, bound is {bound}")
    first: dict[tuple[float, int], str] = {}
    counts: dict[tuple[float, int], int] = {}
    for ind in enumerate_individuals(space):
        key = (1.0 - oracle_accuracy(ind, epochs), count_parameters(ind, macro))
        counts[key] = counts.get(key, 0) + 1
        if key not in first:
            first[key] = serialize(ind)
    keys = list(first)
    mask = brute_force_front(np.array(keys, dtype=float))
    front = sorted((k for k, keep in zip(keys, mask) if keep))
    return GroundTruth(size=size, epochs=epochs,
                       front=tuple(FrontPoint(f1=k[0], f2=k[1], example=first[k], count=counts[k])
                                   for k in front))


def fixture_json(truth: GroundTruth, space: SearchSpace, macro: MacroConfig) -> str:
    payload = {
        "oracle_version": ORACLE_VERSION,
        "epochs": truth.epochs,
        "space": {"min_nodes": space.min_nodes, "max_nodes": space.max_nodes,
                  "reduction_nodes": list(space.node_range(CellKind.REDUCTION)),
                  "ops": [int(o) for o in space.ops]},
        "macro": {"num_cells": macro.num_cells, "channels": macro.channels,
                  "input_shape": list(macro.input_shape), "num_classes": macro.num_classes,
                  "reduction_positions": sorted(macro.reduction_positions)},
        "size": truth.size,
        "front": [{"f1": p.f1, "f2": p.f2, "count": p.count, "example": p.example}
                  for p in truth.front],
    }
    return json.dumps(payload, indent=1, sort_keys=True) + "\n"


def load_fixture(path) -> GroundTruth:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("oracle_version") != ORACLE_VERSION:
        raise ValueError(f"{path}: fixture built for oracle version {payload.get('oracle_version')}")
    return GroundTruth(size=payload["size"], epochs=payload["epochs"],
                       front=tuple(FrontPoint(f1=p["f1"], f2=p["f2"], example=p["example"],
                                              count=p["count"]) for p in payload["front"]))
