"""Toy two-stage detector with a skip-connected stride-16 feature map.

Layout::

    image 1x3xHxW
      -> 5 x [conv3x3 + relu + maxpool2]   widths 8, 16, 32, 32, 64
         stage 4 -> c4 (stride 16, 32 ch), stage 5 -> c5 (stride 32, 64 ch)
      -> fuse: upsample(c5) -> conv1x1 64->32 -> concat with c4 -> 64 ch
      -> RPN: conv3x3 64 + relu, then 1x1 -> 9 objectness, 1x1 -> 36 offsets
      -> proposals -> ROI pool 7x7 -> fc 256 + relu -> score (1), offsets (4)

Training follows approximate joint training: proposals and sampled targets
are treated as constants, so every loss term is differentiable with respect
to the parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .assigner import (
    SamplerConfig,
    assign_anchors,
    assign_proposals,
    image_rng,
    sample_proposals,
    sample_rpn_batch,
)
from .boxgeom import (
    AnchorGrid,
    Box,
    Detection,
    clip_array,
    corner_to_center,
    decode_array,
    generate_anchors,
    inside_mask,
    nms_indices,
)
from .errors import DegenerateRoi, NonFiniteValue, ShapeMismatch
from .losses import FocalConfig, RpnLossWeights, classifier_loss, rpn_loss

log = logging.getLogger(__name__)

STRIDE = 16
BACKBONE_WIDTHS = (8, 16, 32, 32, 64)
NUM_TEMPLATES = 9
HIDDEN = 256


@dataclass(frozen=True)
class DetectorConfig:
    pre_nms_top_n: int = 1000
    post_nms_top_n: int = 100
    proposal_nms_iou: float = 0.7
    final_nms_iou: float = 0.3
    score_thresh: float = 0.5
    roi_pool_size: int = 7
    learning_rate: float = 1e-3
    momentum: float = 0.9
    steps: int = 200
    seed: int = 0
    use_focal_rpn: bool = True
    use_focal_cls: bool = True
    use_skip: bool = True
    lambda_reg: float = 15.0
    lambda2: float = 1.0
    min_size: float = 1.0
    add_gt_proposals: bool = True
    init_gain: float = 1.0
    rpn_reg_norm: str = "positives"
    input_mean: float = 0.5

    def __post_init__(self):
        for name in ("proposal_nms_iou", "final_nms_iou", "score_thresh"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.roi_pool_size < 1:
            raise ValueError("roi_pool_size must be >= 1")
        if self.rpn_reg_norm not in ("positives", "locations"):
            raise ValueError(f"rpn_reg_norm must be 'positives' or 'locations', got {self.rpn_reg_norm!r}")


@dataclass(frozen=True)
class BackboneOutput:
    c4: ad.Tensor
    c5: ad.Tensor


Params = dict  # name -> float64 ndarray, insertion ordered


def _conv_param(rng, params, name, out_c, in_c, k, gain):
    params[f"{name}.w"] = gain * ad.uniform_init(rng, (out_c, in_c, k, k), in_c * k * k)
    params[f"{name}.b"] = np.zeros(out_c)


def _fc_param(rng, params, name, out_d, in_d, gain):
    params[f"{name}.w"] = gain * ad.uniform_init(rng, (out_d, in_d), in_d)
    params[f"{name}.b"] = np.zeros(out_d)


def init_params(cfg: DetectorConfig = DetectorConfig(), seed: int | None = None) -> Params:
    """Seeded uniform(-b, b) weights with b = init_gain * sqrt(1 / fan_in); zero biases.

    ``init_gain`` applies to layers followed by a relu; output layers keep
    gain 1.
    """
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    gain = cfg.init_gain
    p: Params = {}
    in_c = 3
    for i, w in enumerate(BACKBONE_WIDTHS, start=1):
        _conv_param(rng, p, f"backbone.conv{i}", w, in_c, 3, gain)
        in_c = w
    c4, c5 = BACKBONE_WIDTHS[3], BACKBONE_WIDTHS[4]
    if cfg.use_skip:
        _conv_param(rng, p, "fuse.reduce", c4, c5, 1, 1.0)
    else:
        _conv_param(rng, p, "fuse.project", c4 + c4, c5, 1, 1.0)
    fused = 2 * c4
    _conv_param(rng, p, "rpn.conv", fused, fused, 3, gain)
    _conv_param(rng, p, "rpn.cls", NUM_TEMPLATES, fused, 1, 1.0)
    _conv_param(rng, p, "rpn.reg", 4 * NUM_TEMPLATES, fused, 1, 1.0)
    s = cfg.roi_pool_size
    _fc_param(rng, p, "head.fc", HIDDEN, fused * s * s, gain)
    _fc_param(rng, p, "head.score", 1, HIDDEN, 1.0)
    _fc_param(rng, p, "head.delta", 4, HIDDEN, 1.0)
    return p


def register(graph: ad.Graph, params: Params) -> dict[str, ad.Tensor]:
    return {k: graph.leaf(v, k) for k, v in params.items()}


def _conv(g, x, P, name, stride=1):
    return g.apply(ad.Conv2d(stride), x, P[f"{name}.w"], P[f"{name}.b"])


# --------------------------------------------------------------------------
# network pieces


def backbone_forward(g: ad.Graph, image: ad.Tensor, P) -> BackboneOutput:
    """Five conv+relu+pool stages; returns the stage-4 and stage-5 maps."""
    shape = image.shape
    if len(shape) != 4 or shape[:2] != (1, 3) or shape[2] % 32 or shape[3] % 32:
        raise ShapeMismatch("backbone", "image (1,3,H,W) with H, W divisible by 32", [shape])
    x = image
    outs = []
    for i in range(1, len(BACKBONE_WIDTHS) + 1):
        x = g.apply(ad.Relu(), _conv(g, x, P, f"backbone.conv{i}"))
        x = g.apply(ad.MaxPool2d(2), x)
        outs.append(x)
    return BackboneOutput(outs[3], outs[4])


def skip_fuse(g: ad.Graph, out: BackboneOutput, P, use_skip: bool = True) -> ad.Tensor:
    """Fuse the stride-32 map into the stride-16 map.

    With ``use_skip`` the upsampled c5 is reduced to c4's width by a 1x1
    conv and concatenated with c4.  Without it, the upsampled c5 alone is
    projected to the fused width (ablation arm).
    """
    c4, c5 = out.c4, out.c5
    if c4.shape[2] != 2 * c5.shape[2] or c4.shape[3] != 2 * c5.shape[3]:
        raise ShapeMismatch("skip_fuse", "c5 spatial extent exactly half of c4", [c4.shape, c5.shape])
    up = g.apply(ad.UpsampleNearest(2), c5)
    if not use_skip:
        return _conv(g, up, P, "fuse.project")
    red = _conv(g, up, P, "fuse.reduce")
    return g.apply(ad.ConcatChannels(), c4, red)


def rpn_head(g: ad.Graph, fused: ad.Tensor, P) -> tuple[ad.Tensor, ad.Tensor]:
    """Objectness probabilities (1, 9, h, w) and offsets (1, 36, h, w).

    Score channel k belongs to anchor template k; offset channels 4k..4k+3
    hold (tx, ty, tw, th) for the same template.
    """
    h = g.apply(ad.Relu(), _conv(g, fused, P, "rpn.conv"))
    scores = g.apply(ad.Sigmoid(), _conv(g, h, P, "rpn.cls"))
    deltas = _conv(g, h, P, "rpn.reg")
    return scores, deltas


def flat_scores(scores: np.ndarray) -> np.ndarray:
    """Score map (1, T, h, w) -> per-anchor vector in anchor order."""
    s = scores.reshape(scores.shape[-3:])
    return s.transpose(1, 2, 0).reshape(-1)


def flat_deltas(deltas: np.ndarray) -> np.ndarray:
    """Offset map (1, 4T, h, w) -> per-anchor (N, 4) rows in anchor order."""
    d = deltas.reshape(deltas.shape[-3:])
    t4, h, w = d.shape
    return d.reshape(t4 // 4, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4)


def score_index(anchor_idx: np.ndarray, h: int, w: int, t: int = NUM_TEMPLATES) -> np.ndarray:
    """Flat index into the (1, T, h, w) score map for each anchor index."""
    anchor_idx = np.asarray(anchor_idx, dtype=np.int64)
    cell, k = np.divmod(anchor_idx, t)
    return k * h * w + cell


def delta_index(anchor_idx: np.ndarray, h: int, w: int, t: int = NUM_TEMPLATES) -> np.ndarray:
    """Flat indices (n, 4) into the (1, 4T, h, w) offset map."""
    anchor_idx = np.asarray(anchor_idx, dtype=np.int64)
    cell, k = np.divmod(anchor_idx, t)
    ch = 4 * k[:, None] + np.arange(4)[None]
    return ch * h * w + cell[:, None]


def propose(
    scores: np.ndarray,
    deltas: np.ndarray,
    anchors: AnchorGrid,
    img_w: float,
    img_h: float,
    cfg: DetectorConfig,
    mode: str = "clip",
) -> tuple[np.ndarray, np.ndarray]:
    """Decode, filter and suppress RPN outputs.

    Returns corner-form boxes (K, 4) and their objectness scores, ordered as
    NMS kept them.  ``mode`` is ``clip`` (inference) or ``discard``
    (training-time target building).
    """
    s = flat_scores(scores)
    boxes = decode_array(flat_deltas(deltas), anchors.centers)
    finite = np.all(np.isfinite(boxes), axis=1)
    if mode == "clip":
        boxes = np.where(finite[:, None], boxes, 0.0)
        boxes = clip_array(boxes, img_w, img_h)
        keep = finite
    elif mode == "discard":
        keep = finite & inside_mask(np.where(finite[:, None], boxes, -1.0), img_w, img_h)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    keep &= (boxes[:, 2] >= cfg.min_size) & (boxes[:, 3] >= cfg.min_size)
    idx = np.flatnonzero(keep)
    order = idx[np.lexsort((idx, -s[idx]))][: cfg.pre_nms_top_n]
    kept = nms_indices(boxes[order], s[order], cfg.proposal_nms_iou)[: cfg.post_nms_top_n]
    sel = order[kept]
    return boxes[sel], s[sel]


def roi_bins(lo: float, extent: float, n_cells: int, out_size: int, stride: int = STRIDE):
    """Bin [start, end) cell ranges along one axis for a box edge range."""
    a = int(np.floor(lo / stride))
    b = int(np.ceil((lo + extent) / stride))
    a = min(max(a, 0), n_cells - 1)
    b = min(max(b, a + 1), n_cells)
    n = b - a
    i = np.arange(out_size)
    start = a + (i * n) // out_size
    end = a + -((-(i + 1) * n) // out_size)
    for k in range(out_size):
        if end[k] <= start[k]:
            # borrow the previous bin's last cell
            start[k] = end[k - 1] - 1 if k else a
            end[k] = start[k] + 1
    return start, end


class RoiPool(ad.Primitive):
    """Max pooling of image-space boxes over a stride-16 map.

    Input (1, C, H, W); output (R, C, S, S).  Gradients route to each bin's
    first maximal cell in row-major order.
    """

    name = "roi_pool"

    def __init__(self, boxes, out_size: int = 7, stride: int = STRIDE):
        self.boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        self.out_size = out_size
        self.stride = stride
        self.rule = "feature map (1, C, H, W)"
        small = (self.boxes[:, 2] < 1) | (self.boxes[:, 3] < 1)
        if np.any(small):
            raise DegenerateRoi(f"ROI boxes must be at least one pixel: {self.boxes[small][:3].tolist()}")

    def out_shape(self, shapes):
        if len(shapes) != 1 or len(shapes[0]) != 4 or shapes[0][0] != 1:
            self._fail(shapes)
        s = self.out_size
        return (len(self.boxes), shapes[0][1], s, s)

    def forward(self, fmap):
        _, c, hh, ww = fmap.shape
        s = self.out_size
        r = len(self.boxes)
        out = np.empty((r, c, s, s))
        arg_y = np.empty((r, c, s, s), dtype=np.int64)
        arg_x = np.empty((r, c, s, s), dtype=np.int64)
        fm = fmap[0]
        for n, (x, y, w, h) in enumerate(self.boxes):
            ys, ye = roi_bins(y, h, hh, s, self.stride)
            xs, xe = roi_bins(x, w, ww, s, self.stride)
            bh = int((ye - ys).max())
            bw = int((xe - xs).max())
            oy = np.arange(bh)
            ox = np.arange(bw)
            yy = ys[:, None] + oy[None]  # (S, bh)
            xx = xs[:, None] + ox[None]  # (S, bw)
            vy = yy < ye[:, None]
            vx = xx < xe[:, None]
            yy = np.minimum(yy, hh - 1)
            xx = np.minimum(xx, ww - 1)
            # (C, S, bh, S, bw) -> (C, S, S, bh*bw) keeps row-major order inside a bin
            vals = fm[:, yy[:, :, None, None], xx[None, None, :, :]]
            valid = vy[:, :, None, None] & vx[None, None, :, :]
            vals = np.where(valid[None], vals, -np.inf)
            vals = vals.transpose(0, 1, 3, 2, 4).reshape(c, s, s, bh * bw)
            a = vals.argmax(axis=-1)
            out[n] = np.take_along_axis(vals, a[..., None], axis=-1)[..., 0]
            arg_y[n] = ys[None, :, None] + a // bw
            arg_x[n] = xs[None, None, :] + a % bw
        return out, (arg_y, arg_x)

    def backward(self, gout, ctx, xs):
        arg_y, arg_x = ctx
        fmap = xs[0]
        dfm = np.zeros_like(fmap[0])
        cidx = np.broadcast_to(np.arange(fmap.shape[1])[None, :, None, None], gout.shape)
        np.add.at(dfm, (cidx, arg_y, arg_x), gout)
        return (dfm[None],)


def roi_pool(g: ad.Graph, featmap: ad.Tensor, boxes, out_size: int = 7) -> ad.Tensor:
    return g.apply(RoiPool(boxes, out_size), featmap)


def classifier_head(g: ad.Graph, roi_feats: ad.Tensor, P) -> tuple[ad.Tensor, ad.Tensor]:
    """Scores (R,) and offsets (R, 4) for pooled features (R, C, S, S)."""
    r = roi_feats.shape[0]
    flat = g.apply(ad.Reshape((r, int(np.prod(roi_feats.shape[1:])))), roi_feats)
    hid = g.apply(ad.Relu(), g.apply(ad.Linear(), flat, P["head.fc.w"], P["head.fc.b"]))
    logit = g.apply(ad.Linear(), hid, P["head.score.w"], P["head.score.b"])
    score = g.apply(ad.Reshape((r,)), g.apply(ad.Sigmoid(), logit))
    delta = g.apply(ad.Linear(), hid, P["head.delta.w"], P["head.delta.b"])
    return score, delta


# --------------------------------------------------------------------------
# training


@dataclass
class Targets:
    """Discrete training decisions, fixed before the loss is built."""

    rpn_index: np.ndarray  # anchor indices of the sampled minibatch
    rpn_labels: np.ndarray  # +1 / -1
    rpn_targets: np.ndarray  # (n, 4), NaN rows for negatives
    n_reg: int
    rois: np.ndarray  # (R, 4) corner form
    roi_labels: np.ndarray
    roi_targets: np.ndarray


@dataclass
class TrainState:
    params: Params
    velocity: dict = field(default_factory=dict)
    step: int = 0


def prepare_input(image: np.ndarray, cfg: DetectorConfig) -> np.ndarray:
    """Shift [0, 1] pixels by the configured mean so inputs are roughly centered."""
    return np.asarray(image, dtype=np.float64) - cfg.input_mean


def _rpn_forward(g, P, image, cfg):
    feats = backbone_forward(g, image, P)
    fused = skip_fuse(g, feats, P, cfg.use_skip)
    scores, deltas = rpn_head(g, fused, P)
    return fused, scores, deltas


def build_targets(
    scores: np.ndarray,
    deltas: np.ndarray,
    img_w: int,
    img_h: int,
    gt_boxes,
    cfg: DetectorConfig,
    sampler: SamplerConfig,
    rng: np.random.Generator,
) -> Targets:
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    h, w = scores.shape[-2:]
    anchors = generate_anchors(h, w, STRIDE)
    a = assign_anchors(anchors, gt, img_w, img_h, sampler.pos_thresh, sampler.neg_thresh, sampler.force_gt_match)
    batch = sample_rpn_batch(a, sampler, rng)
    rpn_labels = a.signed_labels(batch.indices)

    props, _ = propose(scores, deltas, anchors, img_w, img_h, cfg, mode="discard")
    if cfg.add_gt_proposals and len(gt):
        props = np.concatenate([props, clip_array(gt, img_w, img_h)])
        props = props[(props[:, 2] >= 1) & (props[:, 3] >= 1)]
    pa = assign_proposals(props, gt, sampler)
    sel = sample_proposals(pa, sampler, rng)
    return Targets(
        rpn_index=batch.indices,
        rpn_labels=rpn_labels,
        rpn_targets=a.targets[batch.indices],
        n_reg=batch.n_reg,
        rois=props[sel],
        roi_labels=pa.signed_labels(sel),
        roi_targets=pa.targets[sel],
    )


def loss_from_outputs(g, P, fused, scores, deltas, targets: Targets, cfg: DetectorConfig, focal_cfg: FocalConfig):
    """Total loss: RPN objective plus the classifier objective over sampled ROIs."""
    h, w = scores.shape[-2:]
    n = targets.rpn_index.size
    p = g.apply(ad.Gather(score_index(targets.rpn_index, h, w)), scores)
    t = g.apply(ad.Gather(delta_index(targets.rpn_index, h, w), (n, 4)), deltas)
    n_reg = targets.n_reg
    if cfg.rpn_reg_norm == "locations" and n_reg:
        n_reg = h * w
    weights = RpnLossWeights(n_cls=n, n_reg=n_reg, lambda_reg=cfg.lambda_reg)
    total = rpn_loss(g, p, targets.rpn_labels, t, targets.rpn_targets, weights, focal_cfg, cfg.use_focal_rpn)
    if len(targets.rois):
        pooled = roi_pool(g, fused, targets.rois, cfg.roi_pool_size)
        ps, pd = classifier_head(g, pooled, P)
        cls = classifier_loss(g, ps, targets.roi_labels, pd, targets.roi_targets, cfg.lambda2, focal_cfg, cfg.use_focal_cls)
        total = g.apply(ad.Add(), total, cls)
    return total


def total_loss(g, P, image: ad.Tensor, targets: Targets, cfg: DetectorConfig, focal_cfg: FocalConfig):
    fused, scores, deltas = _rpn_forward(g, P, image, cfg)
    return loss_from_outputs(g, P, fused, scores, deltas, targets, cfg, focal_cfg)


def sgd_momentum(state: TrainState, grads: dict, lr: float, momentum: float) -> None:
    for k, p in state.params.items():
        v = state.velocity.get(k)
        v = grads[k].copy() if v is None else momentum * v + grads[k]
        state.velocity[k] = v
        p -= lr * v


def train_step(
    image: np.ndarray,
    gt_boxes,
    state: TrainState,
    cfg: DetectorConfig,
    focal_cfg: FocalConfig = FocalConfig(),
    sampler: SamplerConfig = SamplerConfig(),
    rng: np.random.Generator | None = None,
) -> float:
    """One forward, backward and SGD-with-momentum update; returns the loss."""
    if rng is None:
        rng = image_rng(sampler.seed, state.step)
    image = np.asarray(image, dtype=np.float64)
    _, _, img_h, img_w = image.shape
    g = ad.Graph()
    P = register(g, state.params)
    x = g.leaf(prepare_input(image, cfg), "image")
    fused, scores, deltas = _rpn_forward(g, P, x, cfg)
    targets = build_targets(scores.data, deltas.data, img_w, img_h, gt_boxes, cfg, sampler, rng)
    loss = loss_from_outputs(g, P, fused, scores, deltas, targets, cfg, focal_cfg)
    value = loss.item()
    if not np.isfinite(value):
        raise NonFiniteValue(f"non-finite loss {value} at step {state.step}")
    g.backward(loss)
    sgd_momentum(state, {k: t.grad for k, t in P.items()}, cfg.learning_rate, cfg.momentum)
    state.step += 1
    return value


def train(
    samples: Sequence[tuple[np.ndarray, np.ndarray]],
    cfg: DetectorConfig,
    focal_cfg: FocalConfig = FocalConfig(),
    sampler: SamplerConfig = SamplerConfig(),
    state: TrainState | None = None,
    callback=None,
) -> tuple[TrainState, list[float]]:
    """Run ``cfg.steps`` steps cycling over ``(image, gt_boxes)`` pairs.

    The visiting order is a seeded permutation, redrawn every epoch.
    """
    if state is None:
        state = TrainState(init_params(cfg))
    order_rng = np.random.default_rng([cfg.seed, 0x5EED])
    order: list[int] = []
    losses = []
    for _ in range(cfg.steps):
        if not order:
            order = list(order_rng.permutation(len(samples)))
        image, gt = samples[order.pop(0)]
        loss = train_step(image, gt, state, cfg, focal_cfg, sampler, image_rng(sampler.seed, state.step))
        losses.append(loss)
        if callback is not None:
            callback(state.step, loss)
    return state, losses


# --------------------------------------------------------------------------
# inference


def detect(image: np.ndarray, params: Params, cfg: DetectorConfig, tile_origin=(0.0, 0.0)) -> list[Detection]:
    """Detections in image coordinates, sorted by descending score."""
    image = np.asarray(image, dtype=np.float64)
    _, _, img_h, img_w = image.shape
    g = ad.Graph()
    P = register(g, params)
    fused, scores, deltas = _rpn_forward(g, P, g.leaf(prepare_input(image, cfg)), cfg)
    h, w = scores.shape[-2:]
    anchors = generate_anchors(h, w, STRIDE)
    props, _ = propose(scores.data, deltas.data, anchors, img_w, img_h, cfg, mode="clip")
    if len(props) == 0:
        return []
    pooled = roi_pool(g, fused, props, cfg.roi_pool_size)
    ps, pd = classifier_head(g, pooled, P)
    boxes = clip_array(decode_array(pd.data, corner_to_center(props)), img_w, img_h)
    s = ps.data
    keep = np.all(np.isfinite(boxes), axis=1) & (s >= cfg.score_thresh) & (boxes[:, 2] > 0) & (boxes[:, 3] > 0)
    idx = np.flatnonzero(keep)
    kept = idx[nms_indices(boxes[idx], s[idx], cfg.final_nms_iou)]
    ox, oy = tile_origin
    return [
        Detection(Box(float(b[0] + ox), float(b[1] + oy), float(b[2]), float(b[3])), float(sc), (float(ox), float(oy)))
        for b, sc in zip(boxes[kept], s[kept])
    ]
