"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Graph` records every primitive application in insertion order, which
is also a valid topological order.  :func:`backward` walks the tape in reverse
and accumulates adjoints additively into ``Tensor.grad``.

Only the primitives the detector needs are provided.  Each primitive is a
small class with a shape rule, a forward and a backward; other modules add
their own primitives (ROI pooling, the losses) by subclassing
:class:`Primitive`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteValue, NotScalarLoss, ShapeMismatch

__all__ = [
    "Tensor", "Graph", "Primitive", "Conv2d", "MaxPool2d", "Relu", "Sigmoid",
    "UpsampleNearest", "ConcatChannels", "Linear", "Add", "MulScalar", "Sum",
    "Reshape", "Gather", "forward", "backward", "grad_check", "uniform_init",
]


class Tensor:
    """A float64 array plus a same-shape gradient accumulator."""

    __slots__ = ("data", "grad", "node_id", "name")

    def __init__(self, data, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.node_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, node={self.node_id})"


@dataclass(frozen=True)
class Node:
    kind: "Primitive | None"  # None marks a leaf (input or parameter)
    inputs: tuple[int, ...]
    output: Tensor
    ctx: object = None


class Primitive:
    """Base class for a differentiable operation.

    ``out_shape`` validates input shapes before any arithmetic happens.
    ``forward`` returns ``(output, ctx)``; ``backward`` maps the output
    adjoint to one adjoint per input (``None`` for inputs that receive none).
    """

    name = "primitive"
    rule = ""

    def out_shape(self, shapes):
        raise NotImplementedError

    def forward(self, *xs):
        raise NotImplementedError

    def backward(self, gout, ctx, xs):
        raise NotImplementedError

    def _fail(self, shapes):
        raise ShapeMismatch(self.name, self.rule, shapes)

    def __repr__(self):
        return f"{type(self).__name__}()"


class Graph:
    """Append-only tape of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _append(self, kind, inputs, out, ctx=None) -> Tensor:
        out.node_id = len(self.nodes)
        self.nodes.append(Node(kind, tuple(inputs), out, ctx))
        return out

    def leaf(self, data, name: str | None = None) -> Tensor:
        """Register an input or parameter.  Arrays are not copied."""
        t = data if isinstance(data, Tensor) else Tensor(data, name)
        if t.node_id is not None and t.node_id < len(self.nodes) and self.nodes[t.node_id].output is t:
            return t
        return self._append(None, (), t)

    def apply(self, kind: Primitive, *inputs: Tensor) -> Tensor:
        for t in inputs:
            if t.node_id is None or t.node_id >= len(self.nodes) or self.nodes[t.node_id].output is not t:
                raise ValueError(f"{kind.name}: input {t!r} is not registered in this graph")
        expected = kind.out_shape([t.shape for t in inputs])
        out, ctx = kind.forward(*[t.data for t in inputs])
        assert out.shape == tuple(expected), (kind.name, out.shape, expected)
        return self._append(kind, [t.node_id for t in inputs], Tensor(out), ctx)

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise NotScalarLoss(f"loss must have a single element, got shape {loss.shape}")
        if loss.node_id is None or self.nodes[loss.node_id].output is not loss:
            raise ValueError("loss tensor was not produced by this graph")
        adj: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = adj.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.kind is None:
                continue
            xs = [self.nodes[i].output.data for i in node.inputs]
            grads = node.kind.backward(g, node.ctx, xs)
            for i, gi in zip(node.inputs, grads):
                if gi is None:
                    continue
                if i in adj:
                    adj[i] = adj[i] + gi
                else:
                    adj[i] = gi
        for nid, g in adj.items():
            t = self.nodes[nid].output
            t.grad += g

    def zero_grads(self) -> None:
        for node in self.nodes:
            node.output.zero_grad()

    def __len__(self):
        return len(self.nodes)


def forward(graph: Graph, kind: Primitive, inputs: Sequence[Tensor]) -> Tensor:
    return graph.apply(kind, *inputs)


def backward(graph: Graph, loss: Tensor) -> None:
    graph.backward(loss)


# --------------------------------------------------------------------------
# primitives


class Conv2d(Primitive):
    """2-D cross-correlation with zero padding.

    Inputs are ``x`` (N, C, H, W), ``weight`` (O, C, kh, kw) and ``bias`` (O,).
    ``padding=None`` gives "same" output size at stride 1 for odd kernels.
    """

    name = "conv2d"

    def __init__(self, stride: int = 1, padding: int | None = None):
        self.stride = stride
        self.padding = padding
        self.rule = "x (N,C,H,W), weight (O,C,kh,kw), bias (O,)"

    def _pad(self, kh):
        return kh // 2 if self.padding is None else self.padding

    def out_shape(self, shapes):
        if len(shapes) != 3:
            self._fail(shapes)
        xs, ws, bs = shapes
        if len(xs) != 4 or len(ws) != 4 or len(bs) != 1 or xs[1] != ws[1] or bs[0] != ws[0]:
            self._fail(shapes)
        p, s = self._pad(ws[2]), self.stride
        ho = (xs[2] + 2 * p - ws[2]) // s + 1
        wo = (xs[3] + 2 * p - ws[3]) // s + 1
        if ho < 1 or wo < 1:
            self._fail(shapes)
        return (xs[0], ws[0], ho, wo)

    def forward(self, x, w, b):
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        p, s = self._pad(kh), self.stride
        ho = (h + 2 * p - kh) // s + 1
        wo = (wd + 2 * p - kw) // s + 1
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((c, kh, kw, n, ho, wo))
        for i in range(kh):
            for j in range(kw):
                patch = xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s]
                cols[:, i, j] = patch.transpose(1, 0, 2, 3)
        cols = cols.reshape(c * kh * kw, n * ho * wo)
        out = w.reshape(o, -1) @ cols
        out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3) + b[None, :, None, None]
        return np.ascontiguousarray(out), cols

    def backward(self, gout, cols, xs):
        x, w, _ = xs
        n, c, h, wd = x.shape
        o, _, kh, kw = w.shape
        p, s = self._pad(kh), self.stride
        ho, wo = gout.shape[2], gout.shape[3]
        g2 = gout.transpose(1, 0, 2, 3).reshape(o, -1)
        dw = (g2 @ cols.T).reshape(w.shape)
        db = g2.sum(axis=1)
        dcols = (w.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
        dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += dcols[:, i, j].transpose(1, 0, 2, 3)
        dx = dxp[:, :, p:p + h, p:p + wd] if p else dxp
        return np.ascontiguousarray(dx), dw, db


class MaxPool2d(Primitive):
    """Max pooling; ties go to the first maximal element in row-major order."""

    name = "maxpool2d"

    def __init__(self, window: int = 2, stride: int | None = None):
        self.window = window
        self.stride = window if stride is None else stride
        self.rule = f"x (N,C,H,W) with H,W >= {window}"

    def out_shape(self, shapes):
        if len(shapes) != 1 or len(shapes[0]) != 4:
            self._fail(shapes)
        n, c, h, w = shapes[0]
        k, s = self.window, self.stride
        if h < k or w < k:
            self._fail(shapes)
        return (n, c, (h - k) // s + 1, (w - k) // s + 1)

    def forward(self, x):
        k, s = self.window, self.stride
        n, c, h, w = x.shape
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        flat = win.reshape(n, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, arg

    def backward(self, gout, arg, xs):
        (x,) = xs
        k, s = self.window, self.stride
        n, c, ho, wo = gout.shape
        ni, ci, hi, wi = np.indices((n, c, ho, wo), sparse=True)
        rows = hi * s + arg // k
        cols = wi * s + arg % k
        dx = np.zeros_like(x)
        if k <= s:
            dx[ni, ci, rows, cols] = gout
        else:
            np.add.at(dx, (ni, ci, rows, cols), gout)
        return (dx,)


class _Elementwise(Primitive):
    rule = "any shape"

    def out_shape(self, shapes):
        if len(shapes) != 1:
            self._fail(shapes)
        return shapes[0]


class Relu(_Elementwise):
    name = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0), None

    def backward(self, gout, ctx, xs):
        return (gout * (xs[0] > 0),)


class Sigmoid(_Elementwise):
    name = "sigmoid"

    def forward(self, x):
        out = np.exp(-np.logaddexp(0.0, -x))
        return out, out

    def backward(self, gout, out, xs):
        return (gout * out * (1.0 - out),)


class MulScalar(_Elementwise):
    name = "mul_scalar"

    def __init__(self, c: float):
        self.c = float(c)

    def forward(self, x):
        return x * self.c, None

    def backward(self, gout, ctx, xs):
        return (gout * self.c,)


class UpsampleNearest(Primitive):
    name = "upsample_nearest"

    def __init__(self, factor: int = 2):
        self.factor = factor
        self.rule = "x (N,C,H,W)"

    def out_shape(self, shapes):
        if len(shapes) != 1 or len(shapes[0]) != 4:
            self._fail(shapes)
        n, c, h, w = shapes[0]
        return (n, c, h * self.factor, w * self.factor)

    def forward(self, x):
        f = self.factor
        return x.repeat(f, axis=2).repeat(f, axis=3), None

    def backward(self, gout, ctx, xs):
        n, c, h, w = xs[0].shape
        f = self.factor
        return (gout.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)


class ConcatChannels(Primitive):
    name = "concat_channels"
    rule = "two or more (N,C_i,H,W) maps with equal N, H, W"

    def out_shape(self, shapes):
        if len(shapes) < 2 or any(len(s) != 4 for s in shapes):
            self._fail(shapes)
        n, _, h, w = shapes[0]
        if any((s[0], s[2], s[3]) != (n, h, w) for s in shapes):
            self._fail(shapes)
        return (n, sum(s[1] for s in shapes), h, w)

    def forward(self, *xs):
        return np.concatenate(xs, axis=1), None

    def backward(self, gout, ctx, xs):
        splits = np.cumsum([x.shape[1] for x in xs])[:-1]
        return tuple(np.ascontiguousarray(g) for g in np.split(gout, splits, axis=1))


class Linear(Primitive):
    """``x @ W.T + b`` for ``x`` of shape (in,) or (R, in)."""

    name = "linear"
    rule = "x (..., in), weight (out, in), bias (out,)"

    def out_shape(self, shapes):
        if len(shapes) != 3:
            self._fail(shapes)
        xs, ws, bs = shapes
        if len(xs) not in (1, 2) or len(ws) != 2 or bs != (ws[0],) or xs[-1] != ws[1]:
            self._fail(shapes)
        return xs[:-1] + (ws[0],)

    def forward(self, x, w, b):
        return x @ w.T + b, None

    def backward(self, gout, ctx, xs):
        x, w, _ = xs
        g2 = gout.reshape(-1, w.shape[0])
        dw = g2.T @ x.reshape(-1, w.shape[1])
        return gout @ w, dw, g2.sum(axis=0)


class Add(Primitive):
    name = "add"
    rule = "two tensors of identical shape"

    def out_shape(self, shapes):
        if len(shapes) != 2 or shapes[0] != shapes[1]:
            self._fail(shapes)
        return shapes[0]

    def forward(self, a, b):
        return a + b, None

    def backward(self, gout, ctx, xs):
        return gout, gout


class Sum(Primitive):
    name = "sum"
    rule = "any single tensor"

    def out_shape(self, shapes):
        if len(shapes) != 1:
            self._fail(shapes)
        return (1,)

    def forward(self, x):
        return np.array([x.sum()]), None

    def backward(self, gout, ctx, xs):
        return (np.full_like(xs[0], gout[0]),)


class Reshape(Primitive):
    name = "reshape"

    def __init__(self, shape: Sequence[int]):
        self.shape = tuple(int(s) for s in shape)
        self.rule = f"tensor with {int(np.prod(self.shape))} elements"

    def out_shape(self, shapes):
        if len(shapes) != 1 or int(np.prod(shapes[0])) != int(np.prod(self.shape)):
            self._fail(shapes)
        return self.shape

    def forward(self, x):
        return x.reshape(self.shape), None

    def backward(self, gout, ctx, xs):
        return (gout.reshape(xs[0].shape),)


class Gather(Primitive):
    """Select elements by flat (row-major) index; repeated indices accumulate."""

    name = "gather"

    def __init__(self, indices, shape: Sequence[int] | None = None):
        self.indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        self.shape = (self.indices.size,) if shape is None else tuple(shape)
        self.rule = "tensor whose size exceeds every index"

    def out_shape(self, shapes):
        if len(shapes) != 1 or int(np.prod(self.shape)) != self.indices.size:
            self._fail(shapes)
        size = int(np.prod(shapes[0]))
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= size):
            self._fail(shapes)
        return self.shape

    def forward(self, x):
        return x.reshape(-1)[self.indices].reshape(self.shape), None

    def backward(self, gout, ctx, xs):
        dx = np.zeros(xs[0].size)
        np.add.at(dx, self.indices, gout.reshape(-1))
        return (dx.reshape(xs[0].shape),)


# --------------------------------------------------------------------------
# verification and initialization


def _scalar(t: Tensor) -> float:
    if not isinstance(t, Tensor) or t.data.size != 1:
        raise NotScalarLoss("builder must return a single-element Tensor")
    v = t.item()
    if not np.isfinite(v):
        raise NonFiniteValue(f"builder produced {v}")
    return v


def grad_check(
    builder: Callable[[Graph, Tensor], Tensor],
    point,
    h: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Compare backward() against central differences at ``point``.

    ``builder(graph, x)`` must build a scalar from the leaf ``x``.  Returns
    max |analytic - numeric| / max(1, |analytic|, |numeric|) over the checked
    flat coordinates (all of them by default).
    """
    base = np.array(point, dtype=np.float64)
    g = Graph()
    x = g.leaf(base.copy())
    loss = builder(g, x)
    _scalar(loss)
    g.backward(loss)
    analytic = x.grad.reshape(-1)
    if not np.all(np.isfinite(analytic)):
        raise NonFiniteValue("non-finite analytic gradient")

    def at(values):
        gg = Graph()
        return _scalar(builder(gg, gg.leaf(values)))

    worst = 0.0
    idx = range(base.size) if coords is None else coords
    for k in idx:
        plus = base.copy()
        plus.reshape(-1)[k] += h
        minus = base.copy()
        minus.reshape(-1)[k] -= h
        numeric = (at(plus) - at(minus)) / (2.0 * h)
        a = analytic[k]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst


def uniform_init(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    """Weights drawn from uniform(-b, b) with b = sqrt(1 / fan_in)."""
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=tuple(shape))
