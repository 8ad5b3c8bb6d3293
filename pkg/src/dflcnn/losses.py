"""Binary cross entropy, focal loss, smooth L1 and the two detector objectives.

Scalar helpers (``ce_loss``, ``focal_loss``, ``smooth_l1``) work on floats.
The composite objectives build nodes in a caller-owned :class:`Graph` so the
gradients flow back into the network; their elementwise pieces are graph
primitives with closed-form derivatives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Add, Gather, Graph, MulScalar, Primitive, Sum, Tensor
from .errors import MissingRegressionTarget


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    prob_epsilon: float = 1e-7

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if not 0 < self.prob_epsilon < 0.5:
            raise ValueError(f"prob_epsilon must lie in (0, 0.5), got {self.prob_epsilon}")


@dataclass(frozen=True)
class RpnLossWeights:
    n_cls: int
    n_reg: int
    lambda_reg: float = 15.0

    def __post_init__(self):
        if self.lambda_reg <= 0 or self.n_cls < 1 or self.n_reg < 0:
            raise ValueError(f"invalid RPN loss weights {self}")


def _pt(p, y, eps):
    pc = np.clip(p, eps, 1.0 - eps)
    return np.where(np.asarray(y) > 0, pc, 1.0 - pc)


def ce_loss(p: float, y: int, cfg: FocalConfig = FocalConfig()) -> float:
    pt = float(_pt(p, y, cfg.prob_epsilon))
    return -math.log(pt)


def focal_loss(p: float, y: int, cfg: FocalConfig = FocalConfig()) -> float:
    pt = float(_pt(p, y, cfg.prob_epsilon))
    return -((1.0 - pt) ** cfg.gamma) * math.log(pt)


def smooth_l1(x: float) -> float:
    ax = abs(x)
    return 0.5 * x * x if ax < 1 else ax - 0.5


def smooth_l1_grad(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < 1, x, np.sign(x))


def focal_values(p, y, gamma: float, eps: float) -> np.ndarray:
    pt = _pt(np.asarray(p, dtype=np.float64), y, eps)
    return -((1.0 - pt) ** gamma) * np.log(pt)


def focal_grad(p, y, gamma: float, eps: float) -> np.ndarray:
    """d focal / d p, zero where the clamp is active."""
    p = np.asarray(p, dtype=np.float64)
    pt = _pt(p, y, eps)
    q = 1.0 - pt
    dpt = gamma * q ** (gamma - 1.0) * np.log(pt) - q ** gamma / pt if gamma else -1.0 / pt
    sign = np.where(np.asarray(y) > 0, 1.0, -1.0)
    live = (p >= eps) & (p <= 1.0 - eps)
    return dpt * sign * live


def ce_values(p, y, eps: float) -> np.ndarray:
    return -np.log(_pt(np.asarray(p, dtype=np.float64), y, eps))


def ce_grad(p, y, eps: float) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    pt = _pt(p, y, eps)
    sign = np.where(np.asarray(y) > 0, 1.0, -1.0)
    live = (p >= eps) & (p <= 1.0 - eps)
    return -sign / pt * live


class BinaryFocal(Primitive):
    """Per-sample focal loss of a probability vector against fixed labels."""

    name = "focal_bce"

    def __init__(self, labels, gamma: float, eps: float):
        self.labels = np.asarray(labels)
        self.gamma = float(gamma)
        self.eps = float(eps)
        self.rule = f"probability vector of length {self.labels.size}"

    def out_shape(self, shapes):
        if len(shapes) != 1 or shapes[0] != self.labels.shape:
            self._fail(shapes)
        return shapes[0]

    def forward(self, p):
        return focal_values(p, self.labels, self.gamma, self.eps), None

    def backward(self, gout, ctx, xs):
        return (gout * focal_grad(xs[0], self.labels, self.gamma, self.eps),)


class BinaryCE(Primitive):
    name = "ce_bce"

    def __init__(self, labels, eps: float):
        self.labels = np.asarray(labels)
        self.eps = float(eps)
        self.rule = f"probability vector of length {self.labels.size}"

    def out_shape(self, shapes):
        if len(shapes) != 1 or shapes[0] != self.labels.shape:
            self._fail(shapes)
        return shapes[0]

    def forward(self, p):
        return ce_values(p, self.labels, self.eps), None

    def backward(self, gout, ctx, xs):
        return (gout * ce_grad(xs[0], self.labels, self.eps),)


class SmoothL1(Primitive):
    """Elementwise smooth L1 of ``x - target`` for a constant target."""

    name = "smooth_l1"

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)
        self.rule = f"tensor of shape {self.target.shape}"

    def out_shape(self, shapes):
        if len(shapes) != 1 or shapes[0] != self.target.shape:
            self._fail(shapes)
        return shapes[0]

    def forward(self, x):
        d = x - self.target
        ad = np.abs(d)
        return np.where(ad < 1, 0.5 * d * d, ad - 0.5), None

    def backward(self, gout, ctx, xs):
        return (gout * smooth_l1_grad(xs[0] - self.target),)


def _classification_term(graph, p, labels, cfg, focal):
    kind = BinaryFocal(labels, cfg.gamma, cfg.prob_epsilon) if focal else BinaryCE(labels, cfg.prob_epsilon)
    return graph.apply(Sum(), graph.apply(kind, p))


def _regression_term(graph, t, labels, t_star):
    """Sum of smooth L1 over the positive rows of ``t`` (shape (n, 4))."""
    pos = np.flatnonzero(np.asarray(labels) > 0)
    if pos.size == 0:
        return None
    targets = []
    for i in pos:
        row = None if t_star is None else t_star[i]
        if row is None or (np.ndim(row) and np.any(np.isnan(np.asarray(row, dtype=np.float64)))):
            raise MissingRegressionTarget(f"positive sample {i} has no regression target")
        targets.append(row.as_tuple() if hasattr(row, "as_tuple") else tuple(row))
    idx = (pos[:, None] * 4 + np.arange(4)[None]).reshape(-1)
    sel = graph.apply(Gather(idx, (pos.size, 4)), t)
    return graph.apply(Sum(), graph.apply(SmoothL1(np.array(targets)), sel))


def rpn_loss(
    graph: Graph,
    p: Tensor,
    labels: Sequence[int],
    t: Tensor,
    t_star: Sequence | None,
    weights: RpnLossWeights,
    cfg: FocalConfig = FocalConfig(),
    focal: bool = True,
) -> Tensor:
    """Region-proposal objective over a sampled minibatch.

    ``p`` holds objectness probabilities (n,), ``labels`` the ±1 ground
    truth, ``t`` the predicted offsets (n, 4) and ``t_star`` one target per
    sample (``None`` allowed for negatives).  With ``focal=False`` the
    classification term is plain cross entropy.
    """
    labels = np.asarray(labels)
    cls = graph.apply(MulScalar(1.0 / weights.n_cls), _classification_term(graph, p, labels, cfg, focal))
    reg = _regression_term(graph, t, labels, t_star)
    if reg is None or weights.n_reg == 0:
        return cls
    reg = graph.apply(MulScalar(weights.lambda_reg / weights.n_reg), reg)
    return graph.apply(Add(), cls, reg)


def classifier_loss(
    graph: Graph,
    p: Tensor,
    labels: Sequence[int],
    t: Tensor,
    t_star: Sequence | None,
    lambda2: float = 1.0,
    cfg: FocalConfig = FocalConfig(),
    focal: bool = True,
) -> Tensor:
    """Second-stage objective averaged over the sampled proposals.

    For a single proposal this is the per-candidate loss: the focal term plus
    ``lambda2`` times the regression term when the proposal is positive.
    """
    labels = np.asarray(labels)
    n = labels.size
    total = _classification_term(graph, p, labels, cfg, focal)
    reg = _regression_term(graph, t, labels, t_star)
    if reg is not None:
        total = graph.apply(Add(), total, graph.apply(MulScalar(lambda2), reg))
    return graph.apply(MulScalar(1.0 / n), total)
