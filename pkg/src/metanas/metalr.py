"""Loss-driven learning-rate controller and its schedule tooling.

The controller is a small GRU.  At every optimizer step it reads the current
mini-batch loss, updates its hidden state and emits a step size in
``(0, alpha_max)``.  It is pretrained once with evolution strategies; the
rollout of the pretrained controller is recorded as a per-step schedule and
replayed when candidate networks are trained.
"""

from __future__ import annotations

import bisect
import csv
import json
import math
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

H_DIM = 20
ALPHA_MAX = 0.1
INITIAL_ALPHA = 1e-3
WEIGHT_DECAY = 1e-4
PARAMS_VERSION = 1
INPUT_DIM = 2
LOGIT_CLIP = 30.0


class NonFiniteLossError(ValueError):
    pass


class TaskFailure(RuntimeError):
    pass


def hswish(x: np.ndarray | float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x * np.clip(x + 3.0, 0.0, 6.0) / 6.0


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# --------------------------------------------------------------------------
# Parameters and state
# --------------------------------------------------------------------------


def _layout(h: int) -> list[tuple[str, tuple[int, ...]]]:
    shapes = [("in_scale", (INPUT_DIM,))]
    for gate in ("z", "r", "n"):
        shapes += [(f"W_{gate}", (h, INPUT_DIM)), (f"U_{gate}", (h, h)), (f"b_{gate}", (h,))]
    shapes += [("w_out", (h,)), ("b_out", (1,))]
    return shapes


def param_count(h_dim: int = H_DIM) -> int:
    return sum(int(np.prod(s)) for _, s in _layout(h_dim))


@dataclass(frozen=True)
class MetaLrParams:
    """Flat controller weights ``phi`` plus the fixed hyper-parameters."""

    phi: np.ndarray
    h_dim: int = H_DIM
    alpha_max: float = ALPHA_MAX

    def __post_init__(self) -> None:
        phi = np.asarray(self.phi, dtype=float)
        if phi.shape != (param_count(self.h_dim),):
            raise ValueError(f"phi has {phi.size} entries, expected {param_count(self.h_dim)}")
        if not np.all(np.isfinite(phi)):
            raise ValueError("phi contains non-finite entries")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    def unpack(self) -> dict[str, np.ndarray]:
        out, offset = {}, 0
        for name, shape in _layout(self.h_dim):
            size = int(np.prod(shape))
            out[name] = self.phi[offset:offset + size].reshape(shape)
            offset += size
        return out

    def with_phi(self, phi: np.ndarray) -> "MetaLrParams":
        return MetaLrParams(phi=phi, h_dim=self.h_dim, alpha_max=self.alpha_max)


def init_params(rng: np.random.Generator, h_dim: int = H_DIM, alpha_max: float = ALPHA_MAX,
                initial_alpha: float = INITIAL_ALPHA) -> MetaLrParams:
    """Small uniform weights; the output bias makes the first alpha ~= ``initial_alpha``."""
    parts = []
    for name, shape in _layout(h_dim):
        if name == "in_scale":
            parts.append(np.ones(shape))
        elif name.startswith("b_") and name != "b_out":
            parts.append(np.zeros(shape))
        elif name == "w_out":
            parts.append(rng.uniform(-0.01, 0.01, shape))
        elif name == "b_out":
            ratio = initial_alpha / alpha_max
            parts.append(np.array([math.log(ratio / (1.0 - ratio))]))
        else:
            parts.append(rng.uniform(-0.1, 0.1, shape))
    return MetaLrParams(phi=np.concatenate([p.ravel() for p in parts]), h_dim=h_dim,
                        alpha_max=alpha_max)


@dataclass(frozen=True)
class MetaLrState:
    h: np.ndarray
    last_alpha: float | None = None
    prev_loss: float | None = None

    @classmethod
    def fresh(cls, h_dim: int = H_DIM) -> "MetaLrState":
        return cls(h=np.zeros(h_dim))


def step_controller(params: MetaLrParams, state: MetaLrState,
                    loss: float) -> tuple[float, MetaLrState]:
    """Advance the controller by one optimizer step and return the step size."""
    if not math.isfinite(loss) or loss < 0:
        raise NonFiniteLossError(f"controller needs a finite non-negative loss, got {loss}")
    p = params.unpack()
    delta = 0.0 if state.prev_loss is None else loss - state.prev_loss
    u = hswish(p["in_scale"] * np.array([math.log1p(loss), delta]))
    h = state.h
    z = _sigmoid(p["W_z"] @ u + p["U_z"] @ h + p["b_z"])
    r = _sigmoid(p["W_r"] @ u + p["U_r"] @ h + p["b_r"])
    n = np.tanh(p["W_n"] @ u + r * (p["U_n"] @ h) + p["b_n"])
    h_new = (1.0 - z) * n + z * h
    logit = float(np.clip(p["w_out"] @ h_new + p["b_out"][0], -LOGIT_CLIP, LOGIT_CLIP))
    alpha = params.alpha_max * float(_sigmoid(logit))
    return alpha, MetaLrState(h=h_new, last_alpha=alpha, prev_loss=float(loss))


# --------------------------------------------------------------------------
# SGD
# --------------------------------------------------------------------------


def sgd_step(mu: np.ndarray, grad: np.ndarray, alpha: float,
             weight_decay: float = WEIGHT_DECAY) -> np.ndarray:
    """Plain SGD followed by decoupled weight decay; returns a new vector."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if mu.shape != grad.shape:
        raise ValueError(f"shape mismatch: {mu.shape} vs {grad.shape}")
    out = mu - alpha * grad
    if weight_decay:
        out *= 1.0 - alpha * weight_decay
    return out


# --------------------------------------------------------------------------
# Schedules and learning-rate sources
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LrSchedule:
    steps: tuple[int, ...]
    alphas: tuple[float, ...]
    alpha_max: float = ALPHA_MAX

    def __post_init__(self) -> None:
        if len(self.steps) != len(self.alphas):
            raise ValueError("steps and alphas differ in length")
        if any(b <= a for a, b in zip(self.steps, self.steps[1:])):
            raise ValueError("schedule steps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.steps)


def replay_schedule(schedule: LrSchedule, step: int) -> float:
    """Step size in force at ``step``; clamps to the first/last recorded value."""
    if not schedule.steps:
        raise ValueError("empty schedule")
    i = bisect.bisect_right(schedule.steps, step) - 1
    return schedule.alphas[max(i, 0)]


class LrRun(Protocol):
    def next_alpha(self, loss: float) -> float: ...


class LrSource(Protocol):
    def start(self) -> LrRun: ...


@dataclass(frozen=True)
class FixedLr:
    alpha: float

    def start(self) -> LrRun:
        return _FixedRun(self.alpha)


@dataclass
class _FixedRun:
    alpha: float

    def next_alpha(self, loss: float) -> float:
        return self.alpha


@dataclass(frozen=True)
class ReplayLr:
    schedule: LrSchedule

    def start(self) -> LrRun:
        return _ReplayRun(self.schedule)


@dataclass
class _ReplayRun:
    schedule: LrSchedule
    step: int = 0

    def next_alpha(self, loss: float) -> float:
        alpha = replay_schedule(self.schedule, self.step)
        self.step += 1
        return alpha


@dataclass(frozen=True)
class LiveLr:
    params: MetaLrParams

    def start(self) -> LrRun:
        return _LiveRun(self.params, MetaLrState.fresh(self.params.h_dim))


@dataclass
class _LiveRun:
    params: MetaLrParams
    state: MetaLrState

    def next_alpha(self, loss: float) -> float:
        alpha, self.state = step_controller(self.params, self.state, loss)
        return alpha


# --------------------------------------------------------------------------
# Pretraining
# --------------------------------------------------------------------------


class PretrainTask(Protocol):
    def reset(self) -> np.ndarray: ...

    def loss_and_grad(self, mu: np.ndarray, step: int) -> tuple[float, np.ndarray]: ...

    def validation_loss(self, mu: np.ndarray) -> float: ...


@dataclass(frozen=True)
class QuadraticBowlTask:
    """``0.5 * sum(lam_i * mu_i**2)`` with log-spaced curvatures in ``[lam_min, 1]``."""

    dim: int = 10
    lam_min: float = 1e-2
    seed: int = 0

    @property
    def curvatures(self) -> np.ndarray:
        return np.logspace(math.log10(self.lam_min), 0.0, self.dim)

    def reset(self) -> np.ndarray:
        return np.random.default_rng(self.seed).normal(size=self.dim)

    def loss_and_grad(self, mu: np.ndarray, step: int) -> tuple[float, np.ndarray]:
        lam = self.curvatures
        return 0.5 * float(lam @ (mu * mu)), lam * mu

    def validation_loss(self, mu: np.ndarray) -> float:
        return self.loss_and_grad(mu, 0)[0]


@dataclass(frozen=True)
class EsConfig:
    population: int = 16
    sigma: float = 0.05
    meta_steps: int = 30
    inner_steps: int = 100
    learning_rate: float = 0.1

    def __post_init__(self) -> None:
        if self.population < 2 or self.population % 2:
            raise ValueError("population must be a positive even number (antithetic pairs)")
        if self.sigma < 0 or self.meta_steps < 0 or self.inner_steps < 1:
            raise ValueError("invalid ES configuration")


@dataclass
class Rollout:
    score: float
    alphas: list[float]
    losses: list[float] = field(default_factory=list)


def rollout(params: MetaLrParams, task: PretrainTask, steps: int,
            weight_decay: float = WEIGHT_DECAY) -> Rollout:
    """Train ``task`` for ``steps`` SGD steps driven by the live controller."""
    mu = task.reset()
    state = MetaLrState.fresh(params.h_dim)
    alphas, losses = [], []
    for t in range(steps):
        loss, grad = task.loss_and_grad(mu, t)
        if not math.isfinite(loss):
            return Rollout(math.inf, alphas, losses)
        alpha, state = step_controller(params, state, loss)
        mu = sgd_step(mu, grad, alpha, weight_decay)
        alphas.append(alpha)
        losses.append(loss)
    score = task.validation_loss(mu)
    return Rollout(score if math.isfinite(score) else math.inf, alphas, losses)


def fixed_lr_loss(task: PretrainTask, alpha: float, steps: int,
                  weight_decay: float = WEIGHT_DECAY) -> float:
    """Final validation loss after ``steps`` SGD steps at constant ``alpha``."""
    mu = task.reset()
    for t in range(steps):
        loss, grad = task.loss_and_grad(mu, t)
        if not math.isfinite(loss):
            return math.inf
        mu = sgd_step(mu, grad, alpha, weight_decay)
    return task.validation_loss(mu)


def _centered_ranks(scores: np.ndarray) -> np.ndarray:
    ranks = np.empty(len(scores))
    ranks[np.argsort(scores, kind="stable")] = np.arange(len(scores))
    return ranks / (len(scores) - 1) - 0.5


@dataclass
class PretrainResult:
    params: MetaLrParams
    schedule: LrSchedule
    score: float
    initial_score: float
    history: list[float]


def pretrain_controller(task: PretrainTask, cfg: EsConfig, rng: np.random.Generator,
                        init: MetaLrParams | None = None, log=None) -> PretrainResult:
    """Antithetic ES over ``phi`` with elitism.

    Each meta-step draws ``population / 2`` Gaussian directions, scores both
    signs by the task's final validation loss, forms the rank-shaped gradient
    estimate and moves the search centre.  The best centre seen so far is the
    incumbent; it is what gets returned, so the result never scores worse
    than the initial parameters.
    """
    params = init or init_params(rng)
    centre = params.phi.copy()
    best = rollout(params, task, cfg.inner_steps)
    best_phi, best_score = centre.copy(), best.score
    initial_score = best.score
    history = [best_score]
    for step in range(cfg.meta_steps):
        if cfg.sigma > 0:
            eps = rng.normal(size=(cfg.population // 2, centre.size))
            scores = []
            for e in eps:
                for sign in (1.0, -1.0):
                    scores.append(rollout(params.with_phi(centre + sign * cfg.sigma * e), task,
                                          cfg.inner_steps).score)
            scores = np.array(scores)
            if not np.all(np.isfinite(scores)):
                scores = np.where(np.isfinite(scores), scores, np.nanmax(
                    np.where(np.isfinite(scores), scores, -np.inf)) + 1.0)
            shaped = _centered_ranks(scores).reshape(-1, 2)
            # loss is minimized: move against the difference of each pair
            weights = shaped[:, 0] - shaped[:, 1]
            grad = weights @ eps / (cfg.population * cfg.sigma)
            centre = centre - cfg.learning_rate * grad
            score = rollout(params.with_phi(centre), task, cfg.inner_steps).score
            if score < best_score:
                best_phi, best_score = centre.copy(), score
        history.append(best_score)
        if log is not None:
            log(f"meta-step {step + 1}/{cfg.meta_steps} best={best_score:.6g}")
    final = params.with_phi(best_phi)
    record = rollout(final, task, cfg.inner_steps)
    schedule = LrSchedule(steps=tuple(range(len(record.alphas))), alphas=tuple(record.alphas),
                          alpha_max=final.alpha_max)
    return PretrainResult(params=final, schedule=schedule, score=record.score,
                          initial_score=initial_score, history=history)


# --------------------------------------------------------------------------
# Files
# --------------------------------------------------------------------------


def write_schedule_csv(path, schedule: LrSchedule) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "alpha"])
        for s, a in zip(schedule.steps, schedule.alphas):
            writer.writerow([s, repr(float(a))])


def read_schedule_csv(path, alpha_max: float = ALPHA_MAX) -> LrSchedule:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["step", "alpha"]:
            raise ValueError(f"{path}: expected header step,alpha")
        rows = [(int(s), float(a)) for s, a in reader]
    return LrSchedule(steps=tuple(s for s, _ in rows), alphas=tuple(a for _, a in rows),
                      alpha_max=alpha_max)


def write_params_json(path, params: MetaLrParams) -> None:
    header = {"h_dim": params.h_dim, "alpha_max": params.alpha_max, "version": PARAMS_VERSION}
    with open(path, "w") as fh:
        json.dump([header] + [float(v) for v in params.phi], fh)
        fh.write("\n")


def read_params_json(path) -> MetaLrParams:
    with open(path) as fh:
        payload = json.load(fh)
    if not payload or not isinstance(payload[0], dict):
        raise ValueError(f"{path}: missing header object")
    header = payload[0]
    if header.get("version") != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported params version {header.get('version')}")
    return MetaLrParams(phi=np.array(payload[1:], dtype=float), h_dim=int(header["h_dim"]),
                        alpha_max=float(header["alpha_max"]))


def schedule_from_alphas(alphas: Sequence[float], alpha_max: float = ALPHA_MAX) -> LrSchedule:
    return LrSchedule(steps=tuple(range(len(alphas))), alphas=tuple(float(a) for a in alphas),
                      alpha_max=alpha_max)
