"""The generational search loop, its persisted state and run artifacts.

Randomness is drawn from independent streams keyed by ``(seed, purpose,
generation)`` so that a resumed run replays exactly what an uninterrupted
run would have drawn; no generator state needs to be saved.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .evaluator import (
    Dataset,
    Evaluator,
    IdxSpec,
    Metrics,
    OracleEvaluator,
    SyntheticSpec,
    TrainerEvaluator,
    build_dataset,
)
from .genetic import (
    Contender,
    CrossoverConfig,
    MutationConfig,
    binary_tournament,
    inter_crossover,
    intra_crossover,
    period_mutation,
)
from .genotype import (
    InitConfig,
    Individual,
    MacroConfig,
    SearchSpace,
    count_parameters,
    deserialize,
    random_individual,
    serialize,
)
from .metalr import (
    FixedLr,
    LiveLr,
    LrSource,
    ReplayLr,
    init_params,
    read_params_json,
    read_schedule_csv,
)
from .moea import (
    Candidate,
    ObjectiveVector,
    RankedIndividual,
    environmental_selection,
    hypervolume,
    rank_population,
    write_front_csv,
)
from .surrogate import (
    INITIAL,
    PARAM_SCALE,
    AdaptiveConfig,
    EvalRecord,
    Job,
    ThresholdState,
    adaptive_evaluate,
    compute_tau,
    evaluate_early,
    penalty_fitness,
)

CHECKPOINT_VERSION = 1
ARTIFACTS = ("front.csv", "archive.jsonl", "diagnostics.csv", "best.genotype", "checkpoint.json")
DIAGNOSTIC_FIELDS = ("gen", "tau", "H_t", "n_full_evals", "n_surrogate_only")

# Stream tags for np.random.default_rng([seed, tag, ...]).
_INIT_STREAM = 0
_VARIATION_STREAM = 1
_TRAINER_STREAM = 3
_CONTROLLER_STREAM = 4


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    population_size: int = 20
    generations: int = 5
    early_epochs: int = 35
    full_epochs: int = 100
    mutation: MutationConfig = field(default_factory=MutationConfig)
    crossover: CrossoverConfig = field(default_factory=CrossoverConfig)
    init: InitConfig = field(default_factory=InitConfig)
    macro: MacroConfig = field(default_factory=MacroConfig)
    c_target: int = 3_000_000
    complexity_max: int = 5_000_000
    evaluator: str = "oracle"
    seed: int = 0
    use_surrogate: bool = True
    use_metalr: bool = True
    fixed_lr: float = 1e-2
    param_scale: float = PARAM_SCALE
    dataset: SyntheticSpec | IdxSpec = field(default_factory=SyntheticSpec)
    batch_size: int = 32
    schedule_path: str | None = None
    controller_path: str | None = None

    def __post_init__(self) -> None:
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if not 0 <= self.early_epochs < self.full_epochs:
            raise ValueError("need 0 <= early_epochs < full_epochs")
        if self.c_target == self.complexity_max:
            raise ValueError("c_target must differ from complexity_max")
        if self.evaluator not in ("oracle", "tiny"):
            raise ValueError(f"unknown evaluator {self.evaluator!r}")

    def canonical(self) -> dict:
        """JSON-ready description used for hashing and checkpoints."""
        out = asdict(self)
        out["dataset_kind"] = "idx" if isinstance(self.dataset, IdxSpec) else "synthetic"
        return json.loads(json.dumps(out, default=_jsonable, sort_keys=True))

    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def config_from_canonical(d: dict) -> SearchConfig:
    """Inverse of :meth:`SearchConfig.canonical`."""
    d = dict(d)
    kind = d.pop("dataset_kind")
    init = d.pop("init")
    space = init.pop("space")
    return SearchConfig(
        mutation=MutationConfig(**d.pop("mutation")),
        crossover=CrossoverConfig(**d.pop("crossover")),
        init=InitConfig(space=SearchSpace(**space), **init),
        macro=MacroConfig(**d.pop("macro")),
        dataset=(IdxSpec if kind == "idx" else SyntheticSpec)(**d.pop("dataset")),
        **d,
    )


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if hasattr(value, "value"):
        return value.value
    raise TypeError(f"cannot serialize {type(value).__name__}")


# --------------------------------------------------------------------------
# Evaluation plumbing
# --------------------------------------------------------------------------


def make_evaluator(cfg: SearchConfig, data: Dataset | None = None) -> Evaluator:
    if cfg.evaluator == "oracle":
        return OracleEvaluator(cfg.macro)
    data = data if data is not None else build_dataset(cfg.dataset)
    return TrainerEvaluator(cfg.macro, data, cfg.batch_size, FixedLr(cfg.fixed_lr))


def full_lr_source(cfg: SearchConfig) -> LrSource:
    """Step-size source for ``M_c``-epoch training.

    A replayed pretrained schedule when one is configured, otherwise a live
    controller (pretrained parameters if given, fresh ones seeded from the run
    seed otherwise).  With Meta-LR disabled the fixed step size is used.
    """
    if not cfg.use_metalr:
        return FixedLr(cfg.fixed_lr)
    if cfg.schedule_path:
        return ReplayLr(read_schedule_csv(cfg.schedule_path))
    if cfg.controller_path:
        return LiveLr(read_params_json(cfg.controller_path))
    return LiveLr(init_params(np.random.default_rng([cfg.seed, _CONTROLLER_STREAM])))


def trainer_seed(seed: int, ind_id: int) -> int:
    return int(np.random.SeedSequence([seed, _TRAINER_STREAM, ind_id]).generate_state(1)[0])


def _evaluate_job(evaluator: Evaluator, job: Job, seed: int) -> Metrics | None:
    try:
        return evaluator.evaluate(job.individual, job.epochs, job.lr_source,
                                  trainer_seed(seed, job.individual.id))
    except Exception:  # noqa: BLE001 - a failing candidate must not abort the generation
        return None


class Runner:
    """Evaluates job batches, in-process or on a process pool; results keep job order."""

    def __init__(self, evaluator: Evaluator, seed: int, workers: int = 1):
        self.evaluator = evaluator
        self.seed = seed
        self.workers = max(1, int(workers))
        self._pool: ProcessPoolExecutor | None = None

    def __call__(self, jobs: Sequence[Job]) -> list[Metrics | None]:
        if self.workers == 1 or len(jobs) <= 1:
            return [_evaluate_job(self.evaluator, job, self.seed) for job in jobs]
        if self._pool is None:
            self._pool = ProcessPoolExecutor(max_workers=self.workers)
        n = len(jobs)
        return list(self._pool.map(_evaluate_job, [self.evaluator] * n, jobs, [self.seed] * n))

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self) -> "Runner":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# --------------------------------------------------------------------------
# State
# --------------------------------------------------------------------------


@dataclass
class SearchState:
    generation: int
    population: list[Individual]
    ranked: list[RankedIndividual]
    archive: dict[int, EvalRecord]
    threshold: ThresholdState
    next_id: int
    offspring_counter: int
    history: list[dict] = field(default_factory=list)
    archive_offset: int = 0

    def record(self, ind_id: int) -> EvalRecord:
        return self.archive[ind_id]

    def front0(self) -> list[RankedIndividual]:
        return [r for r in self.ranked if r.front == 0]


def _candidates(individuals: Sequence[Individual], archive: dict[int, EvalRecord]) -> list[Candidate]:
    return [Candidate(id=ind.id, objectives=ObjectiveVector(archive[ind.id].f1, archive[ind.id].params))
            for ind in individuals]


def _sorted_ranks(ranked: Sequence[RankedIndividual]) -> list[RankedIndividual]:
    return sorted(ranked, key=lambda r: (r.front, -r.crowding, r.id))


def _adaptive_config(cfg: SearchConfig) -> AdaptiveConfig:
    return AdaptiveConfig(early_epochs=cfg.early_epochs, full_epochs=cfg.full_epochs,
                          enabled=cfg.use_surrogate, param_scale=cfg.param_scale,
                          early_lr=FixedLr(cfg.fixed_lr), full_lr=full_lr_source(cfg))


def initialize(cfg: SearchConfig, run: Callable[[Sequence[Job]], list[Metrics | None]]) -> SearchState:
    """Sample and ``M``-epoch-evaluate the initial population."""
    rng = np.random.default_rng([cfg.seed, _INIT_STREAM])
    population = [random_individual(cfg.init, rng, id=i, birth_generation=0)
                  for i in range(cfg.population_size)]
    acfg = _adaptive_config(cfg)
    archive = evaluate_early(population, {}, run, acfg, 0,
                             lambda ind: count_parameters(ind, cfg.macro), INITIAL)
    ranked = _sorted_ranks(rank_population(_candidates(population, archive)))
    by_id = {ind.id: ind for ind in population}
    state = SearchState(generation=0, population=[by_id[r.id] for r in ranked], ranked=ranked,
                        archive=archive, threshold=ThresholdState(),
                        next_id=cfg.population_size, offspring_counter=0)
    state.history.append(_history_row(state, None, 0, 0))
    return state


def make_offspring(state: SearchState, cfg: SearchConfig) -> tuple[list[Individual], int, int]:
    """Tournament selection, two-level crossover and period mutation.

    Returns the offspring plus the advanced id and offspring counters.
    """
    gen = state.generation + 1
    rng = np.random.default_rng([cfg.seed, _VARIATION_STREAM, gen])
    by_id = {ind.id: ind for ind in state.population}
    contenders = [Contender(by_id[r.id], r.front, r.crowding) for r in state.ranked]
    pairs = binary_tournament(contenders, math.ceil(cfg.population_size / 2), rng)
    next_id, counter = state.next_id, state.offspring_counter

    def take_id() -> int:
        nonlocal next_id
        next_id += 1
        return next_id - 1

    offspring: list[Individual] = []
    for p1, p2 in pairs:
        a, b = inter_crossover(p1, p2, rng, next_id=lambda: -1, birth_generation=gen,
                               swap_prob=cfg.crossover.swap_prob)
        if rng.random() < cfg.crossover.intra_prob:
            n_a, n_b = intra_crossover(a.normal, b.normal, rng)
            a, b = a.with_cells(n_a, a.reduction, id=-1), b.with_cells(n_b, b.reduction, id=-1)
        if rng.random() < cfg.crossover.intra_prob:
            r_a, r_b = intra_crossover(a.reduction, b.reduction, rng)
            a, b = a.with_cells(a.normal, r_a, id=-1), b.with_cells(b.normal, r_b, id=-1)
        for child in (a, b):
            if len(offspring) == cfg.population_size:
                break
            offspring.append(period_mutation(child, counter, cfg.mutation, rng,
                                             space=cfg.init.space, next_id=take_id,
                                             birth_generation=gen))
            counter += 1
    return offspring, next_id, counter


def run_generation(state: SearchState, cfg: SearchConfig,
                   run: Callable[[Sequence[Job]], list[Metrics | None]]) -> SearchState:
    offspring, next_id, counter = make_offspring(state, cfg)
    gen = state.generation + 1
    outcome = adaptive_evaluate(state.population, offspring, state.archive, run, state.threshold,
                                _adaptive_config(cfg), gen,
                                lambda ind: count_parameters(ind, cfg.macro))
    archive = outcome.records
    ranked = environmental_selection(_candidates(state.population, archive),
                                     _candidates(offspring, archive), cfg.population_size)
    by_id = {ind.id: ind for ind in list(state.population) + offspring}
    new = SearchState(generation=gen, population=[by_id[r.id] for r in ranked], ranked=ranked,
                      archive=archive, threshold=outcome.state, next_id=next_id,
                      offspring_counter=counter, history=list(state.history),
                      archive_offset=state.archive_offset)
    new.history.append(_history_row(new, compute_tau(archive.values()), outcome.n_full,
                                    outcome.n_surrogate_only))
    return new


def _history_row(state: SearchState, tau: float | None, n_full: int, n_surrogate: int) -> dict:
    return {
        "gen": state.generation,
        "tau": tau,
        "H_t": state.threshold.H_t,
        "n_full_evals": n_full,
        "n_surrogate_only": n_surrogate,
        "front": [[r.objectives.f1, r.objectives.f2] for r in state.front0()],
    }


# --------------------------------------------------------------------------
# Reporting helpers
# --------------------------------------------------------------------------


def best_individual(state: SearchState, cfg: SearchConfig) -> Individual:
    """Highest penalty fitness at the current gamma; ties go to fewer parameters, then id."""
    gamma = state.threshold.gamma

    def key(ind: Individual):
        rec = state.archive[ind.id]
        fit = penalty_fitness(rec.accuracy, rec.params, cfg.c_target, cfg.complexity_max, gamma)
        return (-fit, rec.params, ind.id)

    return min(state.population, key=key)


def normalized_hypervolume(front: Sequence[Sequence[float]], max_params: float) -> float:
    """Hypervolume of ``(f1, f2 / max_params)`` points against the reference ``(1, 1)``."""
    if max_params <= 0:
        raise ValueError("max_params must be positive")
    pts = [ObjectiveVector(min(f1, 1.0), min(f2 / max_params, 1.0)) for f1, f2 in front]
    return hypervolume(pts, ObjectiveVector(1.0, 1.0))


def hypervolume_trajectory(history: Sequence[dict]) -> list[float]:
    max_params = max((p[1] for row in history for p in row["front"]), default=1.0)
    return [normalized_hypervolume(row["front"], max(max_params, 1.0)) for row in history]


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def _metrics_to_dict(m: Metrics | None) -> dict | None:
    if m is None:
        return None
    return {"top1_acc": m.top1_acc, "loss_curve": list(m.loss_curve), "params": m.params,
            "epochs_trained": m.epochs_trained, "wall_time_ms": m.wall_time_ms,
            "flagged": m.flagged}


def _metrics_from_dict(d: dict | None) -> Metrics | None:
    if d is None:
        return None
    return Metrics(top1_acc=d["top1_acc"], loss_curve=tuple(d["loss_curve"]), params=d["params"],
                   epochs_trained=d["epochs_trained"], wall_time_ms=d["wall_time_ms"],
                   flagged=d["flagged"])


def _record_to_dict(r: EvalRecord) -> dict:
    return {"id": r.id, "gen": r.gen, "params": r.params, "early": _metrics_to_dict(r.early),
            "features": list(r.features), "full": _metrics_to_dict(r.full),
            "predicted_error": r.predicted_error, "provenance": r.provenance,
            "infill": r.infill, "infill_target": r.infill_target, "failed": r.failed}


def _record_from_dict(d: dict) -> EvalRecord:
    return EvalRecord(id=d["id"], gen=d["gen"], params=d["params"],
                      early=_metrics_from_dict(d["early"]), features=tuple(d["features"]),
                      full=_metrics_from_dict(d["full"]), predicted_error=d["predicted_error"],
                      provenance=d["provenance"], infill=d["infill"],
                      infill_target=d["infill_target"], failed=d["failed"])


def _ind_to_dict(ind: Individual) -> dict:
    return {"id": ind.id, "birth_generation": ind.birth_generation, "genotype": serialize(ind)}


def _ind_from_dict(d: dict) -> Individual:
    return deserialize(d["genotype"], id=d["id"], birth_generation=d["birth_generation"])


def state_to_dict(state: SearchState, cfg: SearchConfig) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "config_hash": cfg.digest(),
        "config": cfg.canonical(),
        "generation": state.generation,
        "next_id": state.next_id,
        "offspring_counter": state.offspring_counter,
        "threshold": {"H_t": state.threshold.H_t, "tau": state.threshold.tau},
        "population": [_ind_to_dict(ind) for ind in state.population],
        "ranked": [{"id": r.id, "f1": r.objectives.f1, "f2": r.objectives.f2, "front": r.front,
                    "crowding": r.crowding} for r in state.ranked],
        "archive": [_record_to_dict(state.archive[k]) for k in sorted(state.archive)],
        "archive_offset": state.archive_offset,
        "history": state.history,
    }


def state_from_dict(payload: dict) -> SearchState:
    return SearchState(
        generation=payload["generation"],
        population=[_ind_from_dict(d) for d in payload["population"]],
        ranked=[RankedIndividual(id=d["id"], objectives=ObjectiveVector(d["f1"], d["f2"]),
                                 front=d["front"], crowding=d["crowding"])
                for d in payload["ranked"]],
        archive={d["id"]: _record_from_dict(d) for d in payload["archive"]},
        threshold=ThresholdState(H_t=payload["threshold"]["H_t"], tau=payload["threshold"]["tau"]),
        next_id=payload["next_id"],
        offspring_counter=payload["offspring_counter"],
        history=payload["history"],
        archive_offset=payload["archive_offset"],
    )


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def write_checkpoint(path, state: SearchState, cfg: SearchConfig) -> None:
    text = json.dumps(state_to_dict(state, cfg), sort_keys=True, indent=1)
    _write_atomic(Path(path), text + "\n")


def read_checkpoint(path) -> dict:
    try:
        payload = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from exc
    required = {"version", "config_hash", "config", "generation", "next_id", "offspring_counter",
                "threshold", "population", "ranked", "archive", "archive_offset", "history"}
    if not isinstance(payload, dict) or not required <= set(payload):
        raise CorruptCheckpointError(f"{path}: missing fields")
    if payload["version"] != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {payload['version']}, "
                                   f"expected {CHECKPOINT_VERSION}")
    return payload


def load_checkpoint(path, cfg: SearchConfig) -> SearchState:
    payload = read_checkpoint(path)
    if payload["config_hash"] != cfg.digest():
        raise VersionMismatchError(f"{path}: checkpoint was written by a different configuration")
    try:
        return state_from_dict(payload)
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpointError(f"{path}: {exc}") from exc


def write_artifacts(out: Path, state: SearchState, cfg: SearchConfig) -> SearchState:
    """Write all five artifacts; returns the state with its archive offset advanced."""
    out.mkdir(parents=True, exist_ok=True)
    write_front_csv(out / "front.csv", state.ranked)
    new_records = sorted((r for r in state.archive.values()), key=lambda r: r.id)[state.archive_offset:]
    with open(out / "archive.jsonl", "a") as fh:
        for rec in new_records:
            fh.write(json.dumps(rec.archive_row(), sort_keys=True) + "\n")
    state = replace(state, archive_offset=len(state.archive))
    with open(out / "diagnostics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(DIAGNOSTIC_FIELDS)
        for row in state.history[1:]:
            writer.writerow([row["gen"], "" if row["tau"] is None else repr(row["tau"]),
                             repr(row["H_t"]), row["n_full_evals"], row["n_surrogate_only"]])
    _write_atomic(out / "best.genotype", serialize(best_individual(state, cfg)))
    write_checkpoint(out / "checkpoint.json", state, cfg)
    return state


def _truncate_archive(path: Path, lines: int) -> None:
    if not path.exists():
        if lines:
            raise CorruptCheckpointError(f"{path} is missing")
        return
    kept = path.read_text().splitlines(keepends=True)
    if len(kept) < lines:
        raise CorruptCheckpointError(f"{path} has {len(kept)} records, checkpoint expects {lines}")
    path.write_text("".join(kept[:lines]))


# --------------------------------------------------------------------------
# Driver
# --------------------------------------------------------------------------


GenerationHook = Callable[[SearchState], None]


def run_search(cfg: SearchConfig, out=None, *, workers: int = 1, resume: bool = False,
               stop_after: int | None = None, on_generation: GenerationHook | None = None,
               evaluator: Evaluator | None = None) -> SearchState:
    """Initialize (or resume), run up to ``cfg.generations`` generations and write artifacts.

    ``stop_after`` ends the run after that generation index, leaving a
    checkpoint to resume from.  Without ``out`` nothing is written.
    """
    out_dir = Path(out) if out is not None else None
    evaluator = evaluator or make_evaluator(cfg)
    with Runner(evaluator, cfg.seed, workers) as run:
        if resume:
            if out_dir is None:
                raise ValueError("resume needs an output directory")
            state = load_checkpoint(out_dir / "checkpoint.json", cfg)
            _truncate_archive(out_dir / "archive.jsonl", state.archive_offset)
        else:
            if out_dir is not None:
                for name in ARTIFACTS:
                    (out_dir / name).unlink(missing_ok=True)
            state = initialize(cfg, run)
            if out_dir is not None:
                state = write_artifacts(out_dir, state, cfg)
            if on_generation:
                on_generation(state)
        while state.generation < cfg.generations:
            if stop_after is not None and state.generation >= stop_after:
                break
            state = run_generation(state, cfg, run)
            if out_dir is not None:
                state = write_artifacts(out_dir, state, cfg)
            if on_generation:
                on_generation(state)
    return state
