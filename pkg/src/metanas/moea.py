"""Bi-objective NSGA-II machinery.

Both objectives are minimized: ``f1`` is the validation error rate and
``f2`` the parameter count.  Selection only ever looks at ``id`` and
``objectives`` of its candidates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

INF = math.inf


@dataclass(frozen=True)
class ObjectiveVector:
    f1: float
    f2: float

    def as_tuple(self) -> tuple[float, float]:
        return (self.f1, self.f2)


class HasObjectives(Protocol):
    id: int
    objectives: ObjectiveVector


@dataclass(frozen=True)
class Candidate:
    id: int
    objectives: ObjectiveVector


@dataclass(frozen=True)
class RankedIndividual:
    id: int
    objectives: ObjectiveVector
    front: int
    crowding: float


def dominates(a: ObjectiveVector, b: ObjectiveVector) -> bool:
    return a.f1 <= b.f1 and a.f2 <= b.f2 and (a.f1 < b.f1 or a.f2 < b.f2)


def fast_nondominated_sort(points: Sequence[ObjectiveVector]) -> list[list[int]]:
    """Deb's fast non-dominated sort; fronts hold ascending indices."""
    n = len(points)
    dominated_by = [[] for _ in range(n)]
    counts = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if dominates(points[i], points[j]):
                dominated_by[i].append(j)
                counts[j] += 1
            elif dominates(points[j], points[i]):
                dominated_by[j].append(i)
                counts[i] += 1
    fronts = []
    current = [i for i in range(n) if counts[i] == 0]
    while current:
        fronts.append(sorted(current))
        nxt = []
        for i in current:
            for j in dominated_by[i]:
                counts[j] -= 1
                if counts[j] == 0:
                    nxt.append(j)
        current = nxt
    return fronts


def crowding_distance(front: Sequence[ObjectiveVector]) -> list[float]:
    """Crowding distance of each member of one front.

    Ties in an objective are ordered by position so that exactly two members
    per objective receive the infinite boundary value.
    """
    n = len(front)
    if n == 0:
        raise ValueError("empty front")
    distance = [0.0] * n
    if n <= 2:
        return [INF] * n
    for values in ([p.f1 for p in front], [p.f2 for p in front]):
        order = sorted(range(n), key=lambda i: (values[i], i))
        distance[order[0]] = INF
        distance[order[-1]] = INF
        span = values[order[-1]] - values[order[0]]
        if span == 0:
            continue
        for k in range(1, n - 1):
            i = order[k]
            if distance[i] != INF:
                distance[i] += (values[order[k + 1]] - values[order[k - 1]]) / span
    return distance


def rank_population(members: Sequence[HasObjectives]) -> list[RankedIndividual]:
    """Attach front index and crowding distance to every member (input order kept)."""
    points = [m.objectives for m in members]
    ranked: list[RankedIndividual | None] = [None] * len(members)
    for rank, front in enumerate(fast_nondominated_sort(points)):
        dist = crowding_distance([points[i] for i in front])
        for i, d in zip(front, dist):
            ranked[i] = RankedIndividual(id=members[i].id, objectives=points[i], front=rank,
                                         crowding=d)
    return ranked  # type: ignore[return-value]


def environmental_selection(parents: Sequence[HasObjectives], offspring: Sequence[HasObjectives],
                            capacity: int) -> list[RankedIndividual]:
    """Reduce ``parents + offspring`` to ``capacity`` members.

    Whole fronts are admitted while they fit; the first front that does not
    fit is truncated by descending crowding distance, ties by smaller id.
    The returned members carry front/crowding recomputed within the new
    population, ordered by (front, -crowding, id).
    """
    pool = list(parents) + list(offspring)
    if len(pool) < capacity:
        raise ValueError(f"insufficient candidates: {len(pool)} < {capacity}")
    points = [m.objectives for m in pool]
    chosen: list[int] = []
    for front in fast_nondominated_sort(points):
        if len(chosen) + len(front) <= capacity:
            chosen.extend(front)
            if len(chosen) == capacity:
                break
            continue
        dist = crowding_distance([points[i] for i in front])
        order = sorted(range(len(front)), key=lambda k: (-dist[k], pool[front[k]].id))
        chosen.extend(front[k] for k in order[: capacity - len(chosen)])
        break
    survivors = [pool[i] for i in chosen]
    ranked = rank_population(survivors)
    return sorted(ranked, key=lambda r: (r.front, -r.crowding, r.id))


def hypervolume(front: Iterable[ObjectiveVector], ref: ObjectiveVector) -> float:
    """Exact 2-D hypervolume dominated by ``front`` and bounded by ``ref``."""
    pts = list(front)
    for p in pts:
        if p.f1 > ref.f1 or p.f2 > ref.f2:
            raise ValueError(f"point {p.as_tuple()} outside reference {ref.as_tuple()}")
    pts.sort(key=lambda p: (p.f1, p.f2))
    volume = 0.0
    best_f2 = ref.f2
    for p in pts:
        if p.f2 < best_f2:
            volume += (ref.f1 - p.f1) * (best_f2 - p.f2)
            best_f2 = p.f2
    return volume


def write_front_csv(path, ranked: Sequence[RankedIndividual]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "f1_error", "f2_params", "front", "crowding"])
        for r in ranked:
            f2 = int(r.objectives.f2) if float(r.objectives.f2).is_integer() else r.objectives.f2
            writer.writerow([r.id, repr(float(r.objectives.f1)), f2, r.front,
                             "inf" if r.crowding == INF else repr(float(r.crowding))])


def read_front_csv(path) -> list[RankedIndividual]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [RankedIndividual(id=int(row["id"]),
                             objectives=ObjectiveVector(float(row["f1_error"]),
                                                        float(row["f2_params"])),
                             front=int(row["front"]), crowding=float(row["crowding"]))
            for row in rows]
