"""Minimal numpy forward/backward kernel for decoded architectures.

Tensors are NCHW float64.  Every primitive returns ``(output, backward)``
where ``backward(dy)`` returns the input gradient and accumulates parameter
gradients into the supplied gradient views.  Spatial ops use "same" padding
so a stride-``s`` op maps ``H`` to ``ceil(H / s)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .genotype import (
    CONV_KERNELS,
    ArchitectureGraph,
    CellGraph,
    CellKind,
    OperationKind,
    se_hidden,
)

Backward = Callable[[np.ndarray], np.ndarray]


def _same_pad(k: int) -> tuple[int, int]:
    lo = (k - 1) // 2
    return lo, k - 1 - lo


def _out_size(n: int, stride: int) -> int:
    return (n - 1) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    return as_strided(xp, shape=(n, c, ho, wo, kh, kw),
                      strides=(s0, s1, s2 * stride, s3 * stride, s2, s3), writeable=False)


def _scatter_windows(dxp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int,
                     values: np.ndarray) -> None:
    dxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += values


# --------------------------------------------------------------------------
# Primitives
# --------------------------------------------------------------------------


def relu(x: np.ndarray) -> tuple[np.ndarray, Backward]:
    mask = x > 0
    return x * mask, lambda dy: dy * mask


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int,
           dw: np.ndarray, db: np.ndarray) -> tuple[np.ndarray, Backward]:
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ph, pw = _same_pad(kh), _same_pad(kw)
    xp = np.pad(x, ((0, 0), (0, 0), ph, pw))
    ho, wo = _out_size(h, stride), _out_size(wd, stride)
    cols = _windows(xp, kh, kw, stride, ho, wo).transpose(0, 2, 3, 1, 4, 5)
    cols = cols.reshape(n * ho * wo, c * kh * kw)
    w2 = w.reshape(o, -1)
    y = (cols @ w2.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2) + b[None, :, None, None]

    def backward(dy: np.ndarray) -> np.ndarray:
        dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, o)
        dw[...] += (dy2.T @ cols).reshape(w.shape)
        db[...] += dy.sum(axis=(0, 2, 3))
        dcols = (dy2 @ w2).reshape(n, ho, wo, c, kh, kw)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                _scatter_windows(dxp, i, j, stride, ho, wo, dcols[..., i, j].transpose(0, 3, 1, 2))
        return dxp[:, :, ph[0]:ph[0] + h, pw[0]:pw[0] + wd]

    return y, backward


def max_pool(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, Backward]:
    n, c, h, w = x.shape
    pad = _same_pad(k)
    xp = np.pad(x, ((0, 0), (0, 0), pad, pad), constant_values=-np.inf)
    ho, wo = _out_size(h, stride), _out_size(w, stride)
    win = _windows(xp, k, k, stride, ho, wo).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(dy: np.ndarray) -> np.ndarray:
        dxp = np.zeros_like(xp)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            _scatter_windows(dxp, i, j, stride, ho, wo, dy * (arg == idx))
        return dxp[:, :, pad[0]:pad[0] + h, pad[0]:pad[0] + w]

    return y, backward


def avg_pool(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, Backward]:
    """Average over the in-bounds part of each window (padding excluded)."""
    n, c, h, w = x.shape
    pad = _same_pad(k)
    xp = np.pad(x, ((0, 0), (0, 0), pad, pad))
    ones = np.pad(np.ones((1, 1, h, w)), ((0, 0), (0, 0), pad, pad))
    ho, wo = _out_size(h, stride), _out_size(w, stride)
    count = _windows(ones, k, k, stride, ho, wo).sum(axis=(-1, -2))
    y = _windows(xp, k, k, stride, ho, wo).sum(axis=(-1, -2)) / count

    def backward(dy: np.ndarray) -> np.ndarray:
        g = dy / count
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                _scatter_windows(dxp, i, j, stride, ho, wo, g)
        return dxp[:, :, pad[0]:pad[0] + h, pad[0]:pad[0] + w]

    return y, backward


def subsample(x: np.ndarray, stride: int) -> tuple[np.ndarray, Backward]:
    if stride == 1:
        return x, lambda dy: dy
    y = x[:, :, ::stride, ::stride]

    def backward(dy: np.ndarray) -> np.ndarray:
        dx = np.zeros_like(x)
        dx[:, :, ::stride, ::stride] = dy
        return dx

    return y, backward


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def squeeze_excite(x: np.ndarray, w1: np.ndarray, w2: np.ndarray, stride: int,
                   dw1: np.ndarray, dw2: np.ndarray) -> tuple[np.ndarray, Backward]:
    """Channel gating ``x * sigmoid(W2 relu(W1 mean(x)))`` followed by subsampling."""
    hw = x.shape[2] * x.shape[3]
    s = x.mean(axis=(2, 3))
    z = s @ w1.T
    a = np.maximum(z, 0.0)
    g = _sigmoid(a @ w2.T)
    gated, sub_back = subsample(x * g[:, :, None, None], stride)

    def backward(dy: np.ndarray) -> np.ndarray:
        dfull = sub_back(dy)
        dx = dfull * g[:, :, None, None]
        dg = (dfull * x).sum(axis=(2, 3))
        du = dg * g * (1.0 - g)
        dw2[...] += du.T @ a
        dz = (du @ w2) * (z > 0)
        dw1[...] += dz.T @ s
        ds = dz @ w1
        return dx + ds[:, :, None, None] / hw

    return gated, backward


def global_avg_pool(x: np.ndarray) -> tuple[np.ndarray, Backward]:
    n, c, h, w = x.shape
    return x.mean(axis=(2, 3)), lambda dy: np.broadcast_to(dy[:, :, None, None] / (h * w),
                                                           x.shape).copy()


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray, dw: np.ndarray,
           db: np.ndarray) -> tuple[np.ndarray, Backward]:
    def backward(dy: np.ndarray) -> np.ndarray:
        dw[...] += dy.T @ x
        db[...] += dy.sum(axis=0)
        return dy @ w

    return x @ w.T + b, backward


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_p[np.arange(n), labels].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


# --------------------------------------------------------------------------
# Parameter layout
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    fan_in: int
    is_bias: bool


def _conv_specs(prefix: str, kh: int, kw: int, c_in: int, c_out: int) -> list[ParamSpec]:
    return [ParamSpec(f"{prefix}.w", (c_out, c_in, kh, kw), c_in * kh * kw, False),
            ParamSpec(f"{prefix}.b", (c_out,), c_in * kh * kw, True)]


def param_specs(graph: ArchitectureGraph) -> list[ParamSpec]:
    specs = _conv_specs("stem", 3, 3, graph.input_shape[2], graph.stem_channels)
    for cell in graph.cells:
        p = f"c{cell.index}"
        for slot in cell.slots:
            if slot.align:
                specs += _conv_specs(f"{p}.slot{slot.slot}", 1, 1, slot.c_in, slot.channels)
        for node in cell.nodes:
            q = f"{p}.n{node.index}"
            ch = node.channels
            if node.op in CONV_KERNELS:
                for m, (kh, kw) in enumerate(CONV_KERNELS[node.op]):
                    specs += _conv_specs(f"{q}.conv{m}", kh, kw, ch, ch)
            elif node.op is OperationKind.SE_LAYER:
                r = se_hidden(ch)
                specs += [ParamSpec(f"{q}.se1", (r, ch), ch, False),
                          ParamSpec(f"{q}.se2", (ch, r), r, False)]
        specs += _conv_specs(f"{p}.proj", 1, 1, cell.projection_in, cell.channels)
    c_out = graph.output_channels
    specs += [ParamSpec("head.w", (graph.num_classes, c_out), c_out, False),
              ParamSpec("head.b", (graph.num_classes,), c_out, True)]
    return specs


class Network:
    """Executable view of an :class:`ArchitectureGraph` over a flat weight vector."""

    def __init__(self, graph: ArchitectureGraph):
        self.graph = graph
        self.specs = param_specs(graph)
        self.offsets: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for spec in self.specs:
            self.offsets[spec.name] = (offset, spec.shape)
            offset += int(np.prod(spec.shape))
        self.size = offset
        # fixed per-node input scales set by calibrate(); 1.0 when absent
        self.input_scales: dict[str, float] = {}

    def views(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        return {name: flat[o:o + int(np.prod(shape))].reshape(shape)
                for name, (o, shape) in self.offsets.items()}

    def init_params(self, rng: np.random.Generator, zero_head: bool = False) -> np.ndarray:
        """Fan-in scaled normal weights (He init), zero biases.

        ``zero_head`` zeroes the classifier weights so training starts from
        uniform predictions.
        """
        flat = np.zeros(self.size)
        views = self.views(flat)
        for spec in self.specs:
            if zero_head and spec.name == "head.w":
                continue
            if not spec.is_bias:
                views[spec.name][...] = rng.normal(0.0, np.sqrt(2.0 / spec.fan_in), spec.shape)
        return flat

    # ---- forward with tape ------------------------------------------------

    def _forward(self, flat: np.ndarray, x: np.ndarray, grad: np.ndarray | None,
                 calibrate: bool = False):
        p = self.views(flat)
        g = self.views(grad if grad is not None else np.zeros_like(flat))

        def conv(name, t, stride=1):
            y, back = conv2d(t, p[name + ".w"], p[name + ".b"], stride, g[name + ".w"],
                             g[name + ".b"])
            if calibrate:
                mean = y.mean(axis=(0, 2, 3))
                std = y.std(axis=(0, 2, 3))
                std = np.where((std > 0) & np.isfinite(std), std, 1.0)
                p[name + ".w"][...] /= std[:, None, None, None]
                p[name + ".b"][...] = (p[name + ".b"] - mean) / std
                y = (y - mean[None, :, None, None]) / std[None, :, None, None]
            return y, back

        def scaled(key: str, v: "_Var") -> "_Var":
            if calibrate:
                std = float(v.value.std())
                self.input_scales[key] = 1.0 / std if std > 0 and np.isfinite(std) else 1.0
            s = self.input_scales.get(key, 1.0)
            if s == 1.0:
                return v
            return _Var(v.value * s, lambda dy: dy * s, (v,))

        y, back = conv("stem", x)
        stem = _Var(y, back)
        prev_prev, prev = stem, stem
        for cell in self.graph.cells:
            out = self._cell(cell, prev_prev, prev, p, g, conv, scaled)
            prev_prev, prev = prev, out
        a = _relu_var(prev)
        pooled = _apply(a, global_avg_pool)
        logits = _apply(pooled, lambda t: linear(t, p["head.w"], p["head.b"], g["head.w"],
                                                 g["head.b"]))
        return logits

    def _cell(self, cell: CellGraph, s0: "_Var", s1: "_Var", p, g, conv, scaled) -> "_Var":
        inputs = {}
        for slot, src in zip(cell.slots, (s0, s1)):
            if not slot.used:
                continue
            if slot.align:
                name = f"c{cell.index}.slot{slot.slot}"
                inputs[f"in{slot.slot}"] = _apply(_relu_var(src),
                                                  lambda t, n=name, s=slot.stride: conv(n, t, s))
            else:
                inputs[f"in{slot.slot}"] = src
        states: list[_Var] = []
        reduction = cell.kind is CellKind.REDUCTION
        for node in cell.nodes:
            q = f"c{cell.index}.n{node.index}"
            ext = [inputs[s] for s in node.sources if isinstance(s, str)]
            internal = [states[s] for s in node.sources if isinstance(s, int)]
            if reduction:
                parts = []
                if ext:
                    parts.append(self._op(node.op, scaled(q + ".ext", _sum(ext)), node.stride,
                                          q, p, g, conv))
                if internal:
                    parts.append(self._op(node.op, scaled(q + ".int", _sum(internal)), 1,
                                          q, p, g, conv))
                states.append(_sum(parts))
            else:
                states.append(self._op(node.op, scaled(q, _sum(ext + internal)), node.stride,
                                       q, p, g, conv))
        cat = _concat([states[i] for i in cell.leaves])
        name = f"c{cell.index}.proj"
        return _apply(_relu_var(cat), lambda t: conv(name, t, 1))

    @staticmethod
    def _op(op: OperationKind, x: "_Var", stride: int, q: str, p, g, conv) -> "_Var":
        if op in CONV_KERNELS:
            y = _relu_var(x)
            for m in range(len(CONV_KERNELS[op])):
                y = _apply(y, lambda t, m=m: conv(f"{q}.conv{m}", t, stride if m == 0 else 1))
            return y
        if op is OperationKind.SE_LAYER:
            return _apply(x, lambda t: squeeze_excite(t, p[q + ".se1"], p[q + ".se2"], stride,
                                                      g[q + ".se1"], g[q + ".se2"]))
        if op.pool is not None:
            kind, k = op.pool
            fn = max_pool if kind == "max" else avg_pool
            return _apply(x, lambda t: fn(t, k, stride))
        return _apply(x, lambda t: subsample(t, stride))

    # ---- public API -------------------------------------------------------

    def calibrate(self, flat: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Data-dependent init on the batch ``x``.

        Node inputs are summed and there are no normalization layers, so
        activations otherwise grow geometrically with depth.  One forward pass
        in topological order (a) rescales each conv's weights and sets its
        bias so every output channel has zero mean and unit std, and (b)
        records a fixed scalar per node that brings the node's summed input
        to unit std.  The scalars live in :attr:`input_scales` and are not
        trained.  Returns the rescaled weight vector.
        """
        out = flat.copy()
        self._forward(out, x, None, calibrate=True)
        return out

    def forward(self, flat: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self._forward(flat, x, None).value

    def loss_and_grad(self, flat: np.ndarray, x: np.ndarray,
                      labels: np.ndarray) -> tuple[float, np.ndarray]:
        grad = np.zeros_like(flat)
        logits = self._forward(flat, x, grad)
        loss, dlogits = softmax_cross_entropy(logits.value, labels)
        logits.backward(dlogits)
        return loss, grad

    def loss(self, flat: np.ndarray, x: np.ndarray, labels: np.ndarray) -> float:
        return softmax_cross_entropy(self.forward(flat, x), labels)[0]


class _Var:
    """A tensor in the reverse-mode graph.

    ``back`` maps the output gradient to one gradient per parent (a bare array
    when there is a single parent).  Gradients from all consumers are summed
    before a node's own backward runs.
    """

    __slots__ = ("value", "_back", "_parents", "_grad")

    def __init__(self, value: np.ndarray, back: Callable | None = None,
                 parents: tuple["_Var", ...] = ()):
        self.value = value
        self._back = back
        self._parents = parents
        self._grad = None

    def backward(self, dy: np.ndarray) -> None:
        _run_backward(self, dy)


def _run_backward(root: _Var, dy: np.ndarray) -> None:
    # topological order by reverse DFS post-order
    order: list[_Var] = []
    seen: set[int] = set()
    stack: list[tuple[_Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    root._grad = dy
    for node in reversed(order):
        if node._grad is None or node._back is None:
            continue
        grads = node._back(node._grad)
        if not node._parents:
            continue
        if len(node._parents) == 1:
            grads = (grads,)
        for parent, gp in zip(node._parents, grads):
            parent._grad = gp if parent._grad is None else parent._grad + gp
        node._grad = None


def _apply(x: _Var, fn: Callable[[np.ndarray], tuple[np.ndarray, Backward]]) -> _Var:
    y, back = fn(x.value)
    return _Var(y, back, (x,))


def _relu_var(x: _Var) -> _Var:
    return _apply(x, relu)


def _sum(items: list[_Var]) -> _Var:
    if len(items) == 1:
        return items[0]
    value = items[0].value
    for item in items[1:]:
        value = value + item.value
    n = len(items)
    return _Var(value, lambda dy: tuple(dy for _ in range(n)), tuple(items))


def _concat(items: list[_Var]) -> _Var:
    if len(items) == 1:
        return items[0]
    sizes = [it.value.shape[1] for it in items]
    bounds = np.cumsum([0] + sizes)

    def back(dy):
        return tuple(dy[:, bounds[i]:bounds[i + 1]] for i in range(len(items)))

    return _Var(np.concatenate([it.value for it in items], axis=1), back, tuple(items))
