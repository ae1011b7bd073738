"""Binding genotypes to measured performance.

Two evaluators share one contract, ``evaluate(ind, epochs, lr_source, seed)``:

* :class:`OracleEvaluator` scores a genotype with a closed-form accuracy
  function.  It costs microseconds and its optimum is enumerable, which is
  what the search-level tests lean on.
* :class:`TrainerEvaluator` decodes the genotype into a real network and
  trains it with mini-batch SGD on a small image dataset.
"""

from __future__ import annotations

import gzip
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .genotype import (
    CellKind,
    Individual,
    MacroConfig,
    OperationKind,
    count_parameters,
    decode,
    validate,
)
from .metalr import FixedLr, LrSource, sgd_step
from .nn import Network, softmax


class EvaluationError(RuntimeError):
    pass


class MalformedFileError(ValueError):
    pass


@dataclass(frozen=True)
class Metrics:
    top1_acc: float
    loss_curve: tuple[float, ...]
    params: int
    epochs_trained: int
    wall_time_ms: int = 0
    flagged: bool = False

    def __post_init__(self) -> None:
        if len(self.loss_curve) != self.epochs_trained:
            raise ValueError("loss_curve length must equal epochs_trained")
        if not 0.0 <= self.top1_acc <= 1.0:
            raise ValueError(f"top1_acc {self.top1_acc} outside [0, 1]")

    @property
    def error(self) -> float:
        return 1.0 - self.top1_acc

    def to_json(self, id: int) -> dict:
        return {"id": id, "epochs": self.epochs_trained, "top1_acc": self.top1_acc,
                "params": self.params, "loss_curve": list(self.loss_curve)}

    @classmethod
    def failed(cls, params: int, epochs: int = 0) -> "Metrics":
        return cls(top1_acc=0.0, loss_curve=(math.inf,) * epochs, params=params,
                   epochs_trained=epochs, flagged=True)


class Evaluator(Protocol):
    name: str

    def evaluate(self, ind: Individual, epochs: int, lr_source: LrSource | None = None,
                 seed: int = 0) -> Metrics: ...


# --------------------------------------------------------------------------
# Synthetic oracle
# --------------------------------------------------------------------------

ORACLE_VERSION = 2

# Learnable capacity contributed by each operation.  Parameter-free
# operations (identity, pooling) add none.
ORACLE_OP_GAIN = {
    OperationKind.IDENTITY: 0.00,
    OperationKind.CONV_1X1: 0.30,
    OperationKind.CONV_3X3: 0.55,
    OperationKind.CONV_1X3_3X1: 0.45,
    OperationKind.CONV_1X7_7X1: 0.60,
    OperationKind.MAX_POOL_2: 0.00,
    OperationKind.MAX_POOL_3: 0.00,
    OperationKind.MAX_POOL_5: 0.00,
    OperationKind.AVG_POOL_2: 0.00,
    OperationKind.AVG_POOL_3: 0.00,
    OperationKind.AVG_POOL_5: 0.00,
    OperationKind.SE_LAYER: 0.25,
}
ORACLE_CELL_WEIGHT = {CellKind.NORMAL: 1.0, CellKind.REDUCTION: 0.7}
# Weight of the mean link density of the two cells.  Zero: any positive
# value splits every Pareto point into one point per wiring density.
ORACLE_DENSITY_GAIN = 0.0
# Capacity at which accuracy peaks; larger cells overfit and lose accuracy.
ORACLE_OPTIMAL_CAPACITY = 1.1
ORACLE_ACC_FLOOR = 0.10
ORACLE_ACC_CEIL = 0.97
ORACLE_EPOCH_SCALE = 10.0


def oracle_capacity(ind: Individual) -> float:
    """``G(g)``: weighted op-histogram gain of both cells plus the density term."""
    g = 0.0
    for cell in (ind.normal, ind.reduction):
        gain = sum(ORACLE_OP_GAIN[OperationKind(n.op)] for n in cell.nodes)
        g += ORACLE_CELL_WEIGHT[cell.kind] * gain
    g += ORACLE_DENSITY_GAIN * 0.5 * (ind.normal.link_density + ind.reduction.link_density)
    return g


def oracle_asymptotic_accuracy(ind: Individual) -> float:
    """``A(g) = floor + (ceil - floor) * u * exp(1 - u)`` with ``u = G(g) / G*``.

    Smooth and unimodal in capacity: ``floor`` at zero capacity, ``ceil`` at
    ``G*`` and decaying back toward ``floor`` beyond it.
    """
    u = oracle_capacity(ind) / ORACLE_OPTIMAL_CAPACITY
    return ORACLE_ACC_FLOOR + (ORACLE_ACC_CEIL - ORACLE_ACC_FLOOR) * u * math.exp(1.0 - u)


def oracle_accuracy(ind: Individual, epochs: float) -> float:
    return oracle_asymptotic_accuracy(ind) * (1.0 - math.exp(-epochs / ORACLE_EPOCH_SCALE))


def oracle_evaluate(ind: Individual, epochs: int, macro: MacroConfig) -> Metrics:
    """Closed-form, deterministic stand-in for training ``ind`` for ``epochs`` epochs."""
    report = validate(ind)
    if not report.ok:
        raise EvaluationError("invalid individual: " + "; ".join(report.violations))
    curve = tuple(-math.log(max(oracle_accuracy(ind, e + 1), 1e-12)) for e in range(epochs))
    return Metrics(top1_acc=oracle_accuracy(ind, epochs), loss_curve=curve,
                   params=count_parameters(ind, macro), epochs_trained=epochs)


@dataclass(frozen=True)
class OracleEvaluator:
    macro: MacroConfig
    name: str = "oracle"

    def evaluate(self, ind: Individual, epochs: int, lr_source: LrSource | None = None,
                 seed: int = 0) -> Metrics:
        return oracle_evaluate(ind, epochs, self.macro)


# --------------------------------------------------------------------------
# Datasets
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Dataset:
    """Images are stored NCHW as float64; labels as int64."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        for arr in (self.train_y, self.val_y):
            if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise ValueError("labels outside [0, num_classes)")
        if self.train_x.shape[1:] != self.val_x.shape[1:]:
            raise ValueError("train/val image shapes differ")

    @property
    def input_shape(self) -> tuple[int, int, int]:
        _, c, h, w = self.train_x.shape
        return (h, w, c)

    def __len__(self) -> int:
        return len(self.train_y) + len(self.val_y)


def split_80_20(x: np.ndarray, y: np.ndarray, num_classes: int) -> Dataset:
    n_train = (8 * len(y)) // 10
    return Dataset(train_x=x[:n_train], train_y=y[:n_train], val_x=x[n_train:],
                   val_y=y[n_train:], num_classes=num_classes)


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 2
    samples: int = 200
    image_size: int = 16
    noise: float = 0.1
    seed: int = 0


def _bar(size: int, angle: float, width: float, length: float, cx: float, cy: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    dx, dy = xx - cx, yy - cy
    ux, uy = math.cos(angle), math.sin(angle)
    along = dx * ux + dy * uy
    across = -dx * uy + dy * ux
    return ((np.abs(along) <= length / 2) & (np.abs(across) < width / 2)).astype(float)


def generate_synthetic_dataset(spec: SyntheticSpec) -> Dataset:
    """Oriented bars, one orientation and thickness per class, plus Gaussian noise.

    Class ``k`` draws a bar at angle ``pi * k / classes`` whose width grows
    from 1 to 2 pixels across classes; position and angle are jittered.
    The ink mass therefore differs between classes, so with zero noise the
    two-class problem is separable by the pixel sum alone.
    """
    if spec.classes < 2 or spec.samples < 2 or spec.image_size < 4 or spec.noise < 0:
        raise ValueError(f"invalid synthetic spec: {spec}")
    rng = np.random.default_rng(spec.seed)
    size = spec.image_size
    labels = np.arange(spec.samples) % spec.classes
    rng.shuffle(labels)
    length = 0.6 * size
    images = np.empty((spec.samples, 1, size, size))
    for i, k in enumerate(labels):
        angle = math.pi * k / spec.classes + rng.uniform(-0.1, 0.1)
        width = 1.0 + k / (spec.classes - 1)
        cx, cy = (size - 1) / 2 + rng.uniform(-size / 8, size / 8, size=2)
        images[i, 0] = _bar(size, angle, width, length, cx, cy)
    if spec.noise > 0:
        images += rng.normal(0.0, spec.noise, images.shape)
    return split_80_20(images, labels.astype(np.int64), spec.classes)


def _read_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise MalformedFileError(f"{path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise MalformedFileError(f"{path}: bad magic {magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise MalformedFileError(f"{path}: truncated dimensions")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise MalformedFileError(f"{path}: expected {count} bytes of data, got {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def _load_bytes(path) -> bytes:
    path = Path(path)
    with (gzip.open(path) if path.suffix == ".gz" else open(path, "rb")) as fh:
        return fh.read()


def load_idx_dataset(images_path, labels_path, limit: int | None = None,
                     num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped) and split it 80/20."""
    images = _read_idx(_load_bytes(images_path), 0x00000803, images_path)
    labels = _read_idx(_load_bytes(labels_path), 0x00000801, labels_path)
    if len(images) != len(labels):
        raise ValueError(f"dimension mismatch: {len(images)} images vs {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    y = labels.astype(np.int64)
    k = num_classes if num_classes is not None else int(y.max()) + 1 if len(y) else 1
    return split_80_20(x, y, k)


@dataclass(frozen=True)
class IdxSpec:
    images: str
    labels: str
    limit: int | None = None
    num_classes: int | None = None


def build_dataset(spec: SyntheticSpec | IdxSpec) -> Dataset:
    if isinstance(spec, IdxSpec):
        return load_idx_dataset(spec.images, spec.labels, spec.limit, spec.num_classes)
    return generate_synthetic_dataset(spec)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (used to build fixtures)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# --------------------------------------------------------------------------
# Tiny trainer
# --------------------------------------------------------------------------


def accuracy(net: Network, flat: np.ndarray, x: np.ndarray, y: np.ndarray,
             chunk: int = 256) -> float:
    if len(y) == 0:
        return 0.0
    correct = 0
    for start in range(0, len(y), chunk):
        logits = net.forward(flat, x[start:start + chunk])
        correct += int((softmax(logits).argmax(axis=1) == y[start:start + chunk]).sum())
    return correct / len(y)


def train_network(ind: Individual, macro: MacroConfig, data: Dataset, epochs: int,
                  lr_source: LrSource, seed: int, batch_size: int = 32,
                  calibration_size: int = 64, clip_norm: float | None = 5.0) -> Metrics:
    """Train the decoded network with mini-batch SGD and report validation accuracy.

    Weights are He-initialized and then calibrated to unit activation scale
    (see :meth:`Network.calibrate`); gradients are clipped to ``clip_norm``.
    A non-finite batch loss stops training; the result is flagged with zero
    accuracy.
    """
    start = time.perf_counter()
    if tuple(macro.input_shape) != data.input_shape:
        raise ValueError(f"dataset shape {data.input_shape} does not match {macro.input_shape}")
    graph = decode(ind, macro)
    net = Network(graph)
    rng = np.random.default_rng(seed)
    mu = net.init_params(rng, zero_head=True)
    mu = net.calibrate(mu, data.train_x[rng.permutation(len(data.train_y))[:calibration_size]])
    run = lr_source.start()
    # divergence is detected below and reported as a flagged result
    with np.errstate(over="ignore", invalid="ignore"):
        return _train_loop(net, mu, run, data, epochs, rng, batch_size, clip_norm, start)


def _train_loop(net: Network, mu: np.ndarray, run, data: Dataset, epochs: int,
                rng: np.random.Generator, batch_size: int, clip_norm: float | None,
                start: float) -> Metrics:
    curve: list[float] = []
    n = len(data.train_y)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for b in range(0, n, batch_size):
            idx = order[b:b + batch_size]
            loss, grad = net.loss_and_grad(mu, data.train_x[idx], data.train_y[idx])
            if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
                return Metrics.failed(net.size, epochs)
            if clip_norm is not None:
                norm = float(np.linalg.norm(grad))
                if norm > clip_norm:
                    grad = grad * (clip_norm / norm)
            mu = sgd_step(mu, grad, run.next_alpha(loss))
            total += loss * len(idx)
        curve.append(total / n)
    acc = accuracy(net, mu, data.val_x, data.val_y)
    elapsed = int((time.perf_counter() - start) * 1000)
    return Metrics(top1_acc=acc, loss_curve=tuple(curve), params=net.size,
                   epochs_trained=epochs, wall_time_ms=elapsed)


@dataclass(frozen=True)
class TrainerEvaluator:
    macro: MacroConfig
    data: Dataset
    batch_size: int = 32
    default_lr: LrSource = field(default_factory=lambda: FixedLr(1e-2))
    name: str = "tiny"

    def evaluate(self, ind: Individual, epochs: int, lr_source: LrSource | None = None,
                 seed: int = 0) -> Metrics:
        return train_network(ind, self.macro, self.data, epochs, lr_source or self.default_lr,
                             seed, self.batch_size)
