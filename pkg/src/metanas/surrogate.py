"""Surrogate-gated evaluation.

Every candidate is first trained briefly (``M`` epochs).  An RBF regressor
fitted on the archive predicts the error a full ``M_c``-epoch run would
reach; only offspring whose prediction clears the adaptive threshold ``H_t``
are trained in full.  The threshold follows the rank agreement (Kendall's
tau) between short and full training across the archive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .evaluator import Metrics
from .genotype import Individual
from .metalr import LrSource

FEATURE_DIM = 30
RBF_REGULARIZATION = 1e-8
PARAM_SCALE = 1e6

SURROGATE_ONLY = "surrogate-only"
FULLY_EVALUATED = "fully-evaluated"
INITIAL = "fully-evaluated-at-M"


class SingularSystemError(np.linalg.LinAlgError):
    pass


# --------------------------------------------------------------------------
# Features
# --------------------------------------------------------------------------


def raw_features(ind: Individual, early: Metrics, params: int) -> np.ndarray:
    """Unscaled 30-entry feature vector.

    Layout: op histogram of the normal cell (12), of the reduction cell (12),
    link density of each cell (2), node count of each cell (2),
    ``log10(params)`` and the early top-1 accuracy.
    """
    return np.concatenate([
        ind.normal.op_histogram(),
        ind.reduction.op_histogram(),
        [ind.normal.link_density, ind.reduction.link_density],
        [len(ind.normal), len(ind.reduction)],
        [math.log10(max(params, 1)), early.top1_acc],
    ]).astype(float)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Standardizer":
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        return cls(mean=rows.mean(axis=0), std=rows.std(axis=0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        safe = np.where(self.std > 0, self.std, 1.0)
        # zero-spread dimensions pass through unscaled
        return np.where(self.std > 0, (x - self.mean) / safe, x)


def featurize(ind: Individual, early: Metrics, params: int,
              standardizer: Standardizer | None = None) -> np.ndarray:
    x = raw_features(ind, early, params)
    return standardizer(x) if standardizer is not None else x


# --------------------------------------------------------------------------
# RBF regression
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RbfModel:
    centers: np.ndarray
    weights: np.ndarray
    kernel_width: float
    regularization: float = RBF_REGULARIZATION
    targets: np.ndarray | None = None
    nearest_neighbor: bool = False

    def __post_init__(self) -> None:
        if len(self.centers) != len(self.weights):
            raise ValueError("one weight per center required")
        if not self.kernel_width > 0:
            raise ValueError("kernel width must be positive")

    @property
    def dim(self) -> int:
        return self.centers.shape[1]


def gaussian(r: np.ndarray, width: float) -> np.ndarray:
    return np.exp(-(r * r) / (2.0 * width * width))


def _pairwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1), 0.0))


def dedupe(xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Merge identical feature rows, averaging their targets (first-seen order)."""
    index: dict[bytes, int] = {}
    rows, sums, counts = [], [], []
    for x, y in zip(xs, ys):
        key = np.ascontiguousarray(x).tobytes()
        if key in index:
            k = index[key]
            sums[k] += y
            counts[k] += 1
        else:
            index[key] = len(rows)
            rows.append(x)
            sums.append(float(y))
            counts.append(1)
    return np.array(rows), np.array(sums) / np.array(counts)


def fit_rbf(samples: Sequence[tuple[np.ndarray, float]],
            regularization: float = RBF_REGULARIZATION) -> RbfModel:
    """Gaussian RBF interpolant with median-distance width.

    Raises :class:`SingularSystemError` when the regularized kernel system
    cannot be solved.
    """
    if len(samples) < 2:
        raise ValueError("fit_rbf needs at least 2 samples")
    xs = np.array([np.asarray(x, dtype=float) for x, _ in samples])
    ys = np.array([float(y) for _, y in samples])
    xs, ys = dedupe(xs, ys)
    dist = _pairwise(xs, xs)
    upper = dist[np.triu_indices(len(xs), k=1)]
    width = float(np.median(upper)) if upper.size else 0.0
    if not width > 0:
        width = 1.0
    kernel = gaussian(dist, width) + regularization * np.eye(len(xs))
    try:
        weights = np.linalg.solve(kernel, ys)
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(str(exc)) from exc
    if not np.all(np.isfinite(weights)):
        raise SingularSystemError("non-finite RBF weights")
    return RbfModel(centers=xs, weights=weights, kernel_width=width,
                    regularization=regularization, targets=ys)


def nearest_neighbor_model(samples: Sequence[tuple[np.ndarray, float]]) -> RbfModel:
    """Fallback model that predicts the target of the closest center."""
    xs = np.array([np.asarray(x, dtype=float) for x, _ in samples])
    ys = np.array([float(y) for _, y in samples])
    xs, ys = dedupe(xs, ys)
    return RbfModel(centers=xs, weights=ys.copy(), kernel_width=1.0, regularization=0.0,
                    targets=ys, nearest_neighbor=True)


def predict_raw(model: RbfModel, x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim,):
        raise ValueError(f"dimension mismatch: got {x.shape}, model has {model.dim}")
    r = np.sqrt(((model.centers - x) ** 2).sum(axis=1))
    if model.nearest_neighbor:
        return float(model.weights[int(np.argmin(r))])
    return float(model.weights @ gaussian(r, model.kernel_width))


def predict(model: RbfModel, x: np.ndarray) -> float:
    """Predicted top-1 error clamped to ``[0, 1]``."""
    return min(1.0, max(0.0, predict_raw(model, x)))


# --------------------------------------------------------------------------
# Rank correlation
# --------------------------------------------------------------------------


def kendall_tau(rank_a: Sequence[int], rank_b: Sequence[int]) -> float:
    """Kendall's tau between two tie-free rankings in O(n log n).

    ``rank_a[i]`` and ``rank_b[i]`` are the ranks of item ``i`` under the two
    orderings.  Discordant pairs are counted as inversions by merge sort.
    """
    n = len(rank_a)
    if n != len(rank_b):
        raise ValueError(f"length mismatch: {n} vs {len(rank_b)}")
    if n < 2:
        raise ValueError("need at least 2 items")
    order = sorted(range(n), key=lambda i: rank_a[i])
    seq = [rank_b[i] for i in order]
    discordant = _count_inversions(seq)
    pairs = n * (n - 1) // 2
    return (pairs - 2 * discordant) / pairs


def _count_inversions(seq: list) -> int:
    if len(seq) < 2:
        return 0
    mid = len(seq) // 2
    left, right = seq[:mid], seq[mid:]
    count = _count_inversions(left) + _count_inversions(right)
    i = j = 0
    for k in range(len(seq)):
        if j >= len(right) or (i < len(left) and left[i] <= right[j]):
            seq[k] = left[i]
            i += 1
        else:
            seq[k] = right[j]
            count += len(left) - i
            j += 1
    return count


def ranks_by(values: Sequence[float], ids: Sequence[int], descending: bool = True) -> list[int]:
    """Rank positions (0 = best) with ties broken by ascending id."""
    sign = -1.0 if descending else 1.0
    order = sorted(range(len(values)), key=lambda i: (sign * values[i], ids[i]))
    ranks = [0] * len(values)
    for r, i in enumerate(order):
        ranks[i] = r
    return ranks


# --------------------------------------------------------------------------
# Threshold and fitness
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ThresholdState:
    H_t: float = 1.0
    tau: float = 0.0

    @property
    def gamma(self) -> float:
        return 1.0 - self.H_t


def update_threshold(state: ThresholdState, tau: float, acc_s: float, params: int,
                     param_scale: float = PARAM_SCALE) -> ThresholdState:
    """``H_t = 1 - tau * acc_s - (1 - tau) * param_scale / params`` (not clamped)."""
    if params < 1:
        raise ValueError("params must be >= 1")
    h = 1.0 - tau * acc_s - (1.0 - tau) * (param_scale / params)
    return replace(state, H_t=h, tau=tau)


def penalty_fitness(acc_s: float, complexity: int, c_target: int, complexity_max: int,
                    gamma: float) -> float:
    """Accuracy reward blended with a normalized distance-to-target penalty."""
    if complexity_max == c_target:
        raise ValueError("degenerate denominator: complexity_max equals c_target")
    penalty = abs(complexity - c_target) / abs(complexity_max - c_target)
    return gamma * acc_s - (1.0 - gamma) * penalty


# --------------------------------------------------------------------------
# Archive records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalRecord:
    id: int
    gen: int
    params: int
    early: Metrics | None
    features: tuple[float, ...] = ()
    full: Metrics | None = None
    predicted_error: float | None = None
    provenance: str = INITIAL
    infill: bool = False
    infill_target: float | None = None
    failed: bool = False

    def __post_init__(self) -> None:
        if self.provenance == FULLY_EVALUATED and self.full is None:
            raise ValueError("fully-evaluated record without full metrics")

    @property
    def f1(self) -> float:
        """Error-rate objective used for selection."""
        if self.failed:
            return 1.0
        if self.full is not None:
            return self.full.error
        if self.provenance == SURROGATE_ONLY and self.predicted_error is not None:
            return self.predicted_error
        return self.early.error if self.early is not None else 1.0

    @property
    def accuracy(self) -> float:
        return 1.0 - self.f1

    def archive_row(self) -> dict:
        return {
            "id": self.id,
            "gen": self.gen,
            "early_acc": None if self.early is None else self.early.top1_acc,
            "full_acc": None if self.full is None else self.full.top1_acc,
            "params": self.params,
            "predicted_error": self.predicted_error,
            "provenance": self.provenance,
        }


def training_samples(archive: Iterable[EvalRecord],
                     standardizer: Standardizer) -> list[tuple[np.ndarray, float]]:
    """RBF training set: full-evaluation targets plus infill pseudo-targets."""
    samples = []
    for rec in sorted(archive, key=lambda r: r.id):
        if rec.failed or not rec.features:
            continue
        if rec.full is not None:
            samples.append((standardizer(np.array(rec.features)), rec.full.error))
        elif rec.infill and rec.infill_target is not None:
            samples.append((standardizer(np.array(rec.features)), rec.infill_target))
    return samples


def fit_surrogate(samples: Sequence[tuple[np.ndarray, float]]) -> RbfModel | None:
    if len(samples) < 2:
        return None
    try:
        return fit_rbf(samples)
    except SingularSystemError:
        return nearest_neighbor_model(samples)


def compute_tau(records: Iterable[EvalRecord]) -> float | None:
    """Kendall's tau between early and full accuracy rankings of all fully-trained records."""
    full = [r for r in records if r.full is not None and r.early is not None and not r.failed]
    if len(full) < 2:
        return None
    full.sort(key=lambda r: r.id)
    ids = [r.id for r in full]
    return kendall_tau(ranks_by([r.early.top1_acc for r in full], ids),
                       ranks_by([r.full.top1_acc for r in full], ids))


# --------------------------------------------------------------------------
# Gated evaluation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Job:
    individual: Individual
    epochs: int
    lr_source: LrSource | None


BatchRunner = Callable[[Sequence[Job]], list[Metrics | None]]
"""Evaluates jobs (possibly concurrently) and returns results in job order; ``None`` marks a failure."""


@dataclass(frozen=True)
class AdaptiveConfig:
    early_epochs: int
    full_epochs: int
    enabled: bool = True
    param_scale: float = PARAM_SCALE
    early_lr: LrSource | None = None
    full_lr: LrSource | None = None

    def __post_init__(self) -> None:
        if not 0 <= self.early_epochs < self.full_epochs:
            raise ValueError("need 0 <= M < M_c")


@dataclass
class GenerationOutcome:
    records: dict[int, EvalRecord]
    state: ThresholdState
    model: RbfModel | None
    n_full: int = 0
    n_surrogate_only: int = 0
    decisions: list[tuple[int, float, float, bool]] = field(default_factory=list)
    """(id, predicted error, threshold in force, fully evaluated) per offspring."""


def best_record(records: Iterable[EvalRecord]) -> EvalRecord:
    return min(records, key=lambda r: (r.f1, r.params, r.id))


def evaluate_early(individuals: Sequence[Individual], archive: Mapping[int, EvalRecord],
                   run: BatchRunner, cfg: AdaptiveConfig, gen: int, params_of: Callable[[Individual], int],
                   provenance: str) -> dict[int, EvalRecord]:
    """M-epoch evaluation of every individual that has no record yet."""
    todo = [ind for ind in individuals if ind.id not in archive]
    results = run([Job(ind, cfg.early_epochs, cfg.early_lr) for ind in todo])
    out = {}
    for ind, metrics in zip(todo, results):
        params = params_of(ind)
        if metrics is None or metrics.flagged:
            early = metrics if metrics is not None else Metrics.failed(params, 0)
            out[ind.id] = EvalRecord(id=ind.id, gen=gen, params=params, early=early,
                                     features=tuple(raw_features(ind, early, params)),
                                     provenance=provenance, failed=True)
        else:
            out[ind.id] = EvalRecord(id=ind.id, gen=gen, params=metrics.params, early=metrics,
                                     features=tuple(raw_features(ind, metrics, metrics.params)),
                                     provenance=provenance)
    return out


def adaptive_evaluate(parents: Sequence[Individual], offspring: Sequence[Individual],
                      archive: Mapping[int, EvalRecord], run: BatchRunner,
                      state: ThresholdState, cfg: AdaptiveConfig, gen: int,
                      params_of: Callable[[Individual], int]) -> GenerationOutcome:
    """Gate full training of ``offspring`` behind the surrogate prediction.

    1. Every parent and offspring without a record is trained for ``M`` epochs.
    2. The RBF is fitted on all archive records with a full-training (or
       infill) target, using features standardized over the whole archive.
    3. Offspring are visited in id order.  An offspring whose predicted error
       exceeds ``H_t`` is kept surrogate-only: its branch ends with the
       threshold set to its own prediction (siblings still face the
       generation's ``H_t``) and one space-filling infill point is added to
       the model.  Any other offspring is queued for ``M_c``-epoch training.
    4. Queued offspring are trained, tau is recomputed over the archive, and
       the threshold is refreshed from the best record of the generation.
    """
    records: dict[int, EvalRecord] = dict(archive)
    records.update(evaluate_early(list(parents) + list(offspring), records, run, cfg, gen,
                                  params_of, SURROGATE_ONLY))

    ordered = sorted(records.values(), key=lambda r: r.id)
    standardizer = Standardizer.fit(np.array([r.features for r in ordered]))
    model = fit_surrogate(training_samples(records.values(), standardizer))

    outcome = GenerationOutcome(records=records, state=state, model=model)
    queued: list[Individual] = []
    infill_done: set[int] = set()
    kids = sorted(offspring, key=lambda o: o.id)
    for ind in kids:
        rec = records[ind.id]
        x = standardizer(np.array(rec.features))
        if rec.failed:
            predicted = 1.0
        elif model is not None:
            predicted = predict(model, x)
        else:
            predicted = rec.early.error
        gated_out = cfg.enabled and (rec.failed or predicted > state.H_t)
        outcome.decisions.append((ind.id, predicted, state.H_t, not gated_out))
        if gated_out:
            records[ind.id] = replace(rec, predicted_error=predicted, provenance=SURROGATE_ONLY)
            if model is not None and not model.nearest_neighbor:
                model = _infill(model, kids, records, standardizer, infill_done)
        else:
            records[ind.id] = replace(rec, predicted_error=predicted if model is not None else None)
            queued.append(ind)

    results = run([Job(ind, cfg.full_epochs, cfg.full_lr) for ind in queued])
    for ind, metrics in zip(queued, results):
        rec = records[ind.id]
        if metrics is None or metrics.flagged:
            full = metrics if metrics is not None else Metrics.failed(rec.params, cfg.full_epochs)
            records[ind.id] = replace(rec, full=full, provenance=FULLY_EVALUATED, failed=True)
        else:
            records[ind.id] = replace(rec, full=metrics, provenance=FULLY_EVALUATED)
    outcome.n_full = len(queued)
    outcome.n_surrogate_only = len(kids) - len(queued)

    tau = compute_tau(records.values())
    if tau is not None:
        pool = [records[i.id] for i in list(parents) + list(offspring)]
        best = best_record(pool)
        state = update_threshold(state, tau, best.accuracy, max(best.params, 1), cfg.param_scale)
    outcome.state = state
    outcome.model = model
    return outcome


def _infill(model: RbfModel, kids: Sequence[Individual], records: dict[int, EvalRecord],
            standardizer: Standardizer, used: set[int]) -> RbfModel:
    """Add the offspring point farthest from all centers as a pseudo-sample.

    Its target is the current prediction there, so the refit leaves the
    response surface almost unchanged while spreading the centers.
    """
    best_id, best_gap, best_x = None, -1.0, None
    for ind in kids:
        rec = records[ind.id]
        if ind.id in used or rec.failed or rec.full is not None:
            continue
        x = standardizer(np.array(rec.features))
        gap = float(np.sqrt(((model.centers - x) ** 2).sum(axis=1)).min())
        if gap > 0 and gap > best_gap:
            best_id, best_gap, best_x = ind.id, gap, x
    if best_id is None:
        return model
    target = predict(model, best_x)
    used.add(best_id)
    records[best_id] = replace(records[best_id], infill=True, infill_target=target)
    samples = list(zip(model.centers, model.targets)) + [(best_x, target)]
    return fit_surrogate(samples) or model
