"""Two-stage detector over the feature pyramid: anchors, RPN, RoI pooling, head, loss, inference."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .backbone import FPN, PYRAMID_CHANNELS, STAGE_STRIDES, Backbone, FeaturePyramid, ParamGroup
from .compute import (
    Tensor,
    _make,
    bce_loss,
    ce_loss,
    concat,
    linear,
    no_grad,
    relu,
    sigmoid,
    smooth_l1_loss,
    softmax,
)

CLASS_NAMES = ("text", "list", "heading", "table", "figure")
NUM_CLASSES = len(CLASS_NAMES)
ANCHOR_SIZES = (32, 64, 128, 256)
ASPECT_RATIOS = (0.25, 1.0, 4.0)  # width / height
POOL_SIZE = 7
HEAD_DELTA_SCALE = np.array([10.0, 10.0, 5.0, 5.0])
MAX_LOG_SCALE = np.log(1000.0 / 16)


@dataclass
class DetectorConfig:
    k_pre: int = 256
    k_post: int = 64
    rpn_nms_iou: float = 0.7
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    head_pos_iou: float = 0.5
    test_nms_iou: float = 0.5
    score_threshold: float = 0.05
    max_detections: int = 100
    min_box_size: float = 1.0


# -- box geometry ------------------------------------------------------------------


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def encode_boxes(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """(dx, dy, dw, dh) that map ``anchors`` onto ``boxes``."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + 0.5 * bw
    by = boxes[:, 1] + 0.5 * bh
    return np.stack([(bx - ax) / aw, (by - ay) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(np.minimum(deltas[:, 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(deltas[:, 3], MAX_LOG_SCALE))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def clip_boxes(boxes: np.ndarray, height: float, width: float) -> np.ndarray:
    out = boxes.copy()
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    return out


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending score order (stable on ties)."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[order]
    ious = box_iou_matrix(boxes, boxes)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if alive[i]:
            keep.append(order[i])
            alive[i + 1 :] &= ious[i, i + 1 :] <= iou_threshold
    return np.asarray(keep, dtype=np.int64)


# -- anchors -------------------------------------------------------------------------


def level_anchors(height: int, width: int, stride: int, size: float, ratios=ASPECT_RATIOS) -> np.ndarray:
    """Anchors centred on every cell of an H x W map, ordered (row, col, ratio)."""
    ys, xs = np.meshgrid((np.arange(height) + 0.5) * stride, (np.arange(width) + 0.5) * stride, indexing="ij")
    ratios = np.asarray(ratios, dtype=np.float64)
    half_w = 0.5 * size * np.sqrt(ratios)
    half_h = 0.5 * size / np.sqrt(ratios)
    cx = xs[:, :, None]
    cy = ys[:, :, None]
    out = np.stack(
        np.broadcast_arrays(cx - half_w, cy - half_h, cx + half_w, cy + half_h),
        axis=-1,
    )
    return out.reshape(-1, 4)


def gen_anchors(level_shapes, strides=STAGE_STRIDES, sizes=ANCHOR_SIZES) -> list[np.ndarray]:
    return [level_anchors(h, w, s, size) for (h, w), s, size in zip(level_shapes, strides, sizes)]


# -- RoI pooling ------------------------------------------------------------------------


def roi_level(boxes: np.ndarray) -> np.ndarray:
    """Pyramid level (1..4) per box: floor(log2(sqrt(area) / 32)) clamped to [1, 4]."""
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    k = np.floor(np.log2(np.sqrt(np.maximum(area, 1e-12)) / 32.0))
    return np.clip(k, 1, 4).astype(np.int64)


def _interp_matrix(boxes: np.ndarray, height: int, width: int, stride: int, out: int) -> sp.csr_matrix:
    """Sparse (R*out*out) x (H*W) bilinear sampling matrix at bin centres."""
    r = boxes.shape[0]
    frac = (np.arange(out) + 0.5) / out
    xs = boxes[:, 0:1] + frac[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])
    ys = boxes[:, 1:2] + frac[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])
    fx = np.clip(xs / stride - 0.5, 0, width - 1)
    fy = np.clip(ys / stride - 0.5, 0, height - 1)
    x0 = np.floor(fx).astype(np.int64)
    y0 = np.floor(fy).astype(np.int64)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    wx = fx - x0
    wy = fy - y0
    # broadcast to (R, out_y, out_x)
    Y0, X0 = y0[:, :, None], x0[:, None, :]
    Y1, X1 = y1[:, :, None], x1[:, None, :]
    WY, WX = wy[:, :, None], wx[:, None, :]
    rows = np.arange(r * out * out)
    cols = [Y0 * width + X0, Y0 * width + X1, Y1 * width + X0, Y1 * width + X1]
    vals = [(1 - WY) * (1 - WX), (1 - WY) * WX, WY * (1 - WX), WY * WX]
    data = np.concatenate([np.broadcast_to(v, (r, out, out)).ravel() for v in vals])
    col = np.concatenate([np.broadcast_to(c, (r, out, out)).ravel() for c in cols])
    return sp.csr_matrix((data, (np.tile(rows, 4), col)), shape=(r * out * out, height * width))


def roi_pool(boxes: np.ndarray, feature: Tensor, stride: int, out: int = POOL_SIZE) -> Tensor:
    """Bilinear crop-and-resize of each box (input-pixel coords) to ``out x out`` cells."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
        raise ValueError("roi_pool needs boxes with positive area")
    _, d, h, w = feature.shape
    m = _interp_matrix(boxes, h, w, stride, out)
    flat = feature.data[0].reshape(d, h * w)
    r = boxes.shape[0]
    res = np.asarray((m @ flat.T)).reshape(r, out, out, d).transpose(0, 3, 1, 2)

    def backward(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(r * out * out, d)
        return ((m.T @ gflat).T.reshape(1, d, h, w),)

    return _make(np.ascontiguousarray(res), (feature,), backward)


def pool_proposals(boxes: np.ndarray, pyramid: FeaturePyramid) -> Tensor:
    """RoI features for all boxes, each pooled from its assigned level, in input order."""
    levels = roi_level(boxes)
    parts, order = [], []
    for lvl in range(1, 5):
        idx = np.nonzero(levels == lvl)[0]
        if idx.size:
            parts.append(roi_pool(boxes[idx], pyramid.p_maps[lvl - 1], STAGE_STRIDES[lvl - 1]))
            order.append(idx)
    pooled = concat(parts, axis=0) if len(parts) > 1 else parts[0]
    perm = np.concatenate(order)
    if np.array_equal(perm, np.arange(len(perm))):
        return pooled
    return pooled[np.argsort(perm)]


# -- RPN and head --------------------------------------------------------------------


@dataclass
class RPNOutput:
    objectness: list[Tensor]  # per level, (H*W*A,) logits
    deltas: list[Tensor]  # per level, (H*W*A, 4)
    anchors: list[np.ndarray]


@dataclass
class ProposalSet:
    """Selected proposals: boxes in input pixels, objectness in [0, 1], source level (1..4)."""

    boxes: np.ndarray
    objectness: np.ndarray
    levels: np.ndarray
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.boxes)


class RPN(ParamGroup):
    def __init__(self, rng: np.random.Generator, d: int = PYRAMID_CHANNELS, num_anchors: int = len(ASPECT_RATIOS)):
        super().__init__()
        self.num_anchors = num_anchors
        self.add_conv(rng, "rpn.conv", d, d, 3)
        self.add_conv(rng, "rpn.obj", num_anchors, d, 1)
        self.add_conv(rng, "rpn.delta", 4 * num_anchors, d, 1)
        # small init for the output heads keeps early proposals near the anchors
        for name in ("rpn.obj.w", "rpn.delta.w"):
            self.params[name].data *= 0.1

    def forward(self, pyramid: FeaturePyramid) -> RPNOutput:
        objs, deltas, shapes = [], [], []
        for p in pyramid.p_maps:
            t = relu(self.conv("rpn.conv", p, padding=1))
            o = self.conv("rpn.obj", t)
            dl = self.conv("rpn.delta", t)
            objs.append(o.transpose(0, 2, 3, 1).reshape(-1))
            deltas.append(dl.transpose(0, 2, 3, 1).reshape(-1, 4))
            shapes.append(p.shape[2:])
        return RPNOutput(objs, deltas, gen_anchors(shapes))


class BoxHead(ParamGroup):
    """Pooled feature -> 2 x FC(128, relu) -> class logits (bg + 5) and class-specific deltas."""

    def __init__(self, rng: np.random.Generator, d: int = PYRAMID_CHANNELS, hidden: int = 128):
        super().__init__()
        self.add_linear(rng, "head.fc1", hidden, d * POOL_SIZE * POOL_SIZE)
        self.add_linear(rng, "head.fc2", hidden, hidden)
        self.add_linear(rng, "head.cls", NUM_CLASSES + 1, hidden)
        self.add_linear(rng, "head.box", 4 * NUM_CLASSES, hidden)
        self.params["head.cls.w"].data *= 0.1
        self.params["head.box.w"].data *= 0.01

    def fc(self, name: str, x: Tensor) -> Tensor:
        return linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def forward(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        x = pooled.reshape(pooled.shape[0], -1)
        x = relu(self.fc("head.fc1", x))
        x = relu(self.fc("head.fc2", x))
        return self.fc("head.cls", x), self.fc("head.box", x)


def select_proposals(
    rpn_out: RPNOutput,
    image_size: tuple[int, int],
    k_pre: int = 256,
    k_post: int = 64,
    nms_iou: float = 0.7,
    min_size: float = 1.0,
) -> ProposalSet:
    """Top ``k_pre`` per level by objectness, NMS over the union, then top ``k_post``."""
    if k_pre < k_post:
        raise ValueError("k_pre must be >= k_post")
    h, w = image_size
    boxes, scores, levels = [], [], []
    dropped = 0
    for lvl, (obj, dl, anchors) in enumerate(zip(rpn_out.objectness, rpn_out.deltas, rpn_out.anchors), start=1):
        s = expit(obj.data)
        top = np.argsort(-s, kind="stable")[:k_pre]
        b = clip_boxes(decode_boxes(dl.data[top], anchors[top]), h, w)
        ok = ((b[:, 2] - b[:, 0]) >= min_size) & ((b[:, 3] - b[:, 1]) >= min_size)
        dropped += int((~ok).sum())
        boxes.append(b[ok])
        scores.append(s[top][ok])
        levels.append(np.full(int(ok.sum()), lvl))
    boxes_a = np.concatenate(boxes)
    scores_a = np.concatenate(scores)
    levels_a = np.concatenate(levels)
    keep = nms(boxes_a, scores_a, nms_iou)[:k_post]
    return ProposalSet(boxes_a[keep], scores_a[keep], levels_a[keep], dropped)


# -- losses ----------------------------------------------------------------------------


@dataclass
class DetectionLoss:
    """L_det = L_reg + L_cls; each sums its RPN and box-head parts."""

    reg: Tensor
    cls: Tensor
    parts: dict[str, float] = field(default_factory=dict)
    pooled: Tensor | None = None  # RoI features, proposals first, then GT boxes

    @property
    def total(self) -> Tensor:
        return self.reg + self.cls


def rpn_targets(anchors: np.ndarray, gt_boxes: np.ndarray, pos_iou: float = 0.7, neg_iou: float = 0.3):
    """Labels 1 / 0 / -1 (ignored) per anchor and the matched GT index."""
    labels = np.full(len(anchors), -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, np.zeros(len(anchors), dtype=np.int64)
    ious = box_iou_matrix(anchors, gt_boxes)
    match = ious.argmax(axis=1)
    best = ious.max(axis=1)
    labels[best <= neg_iou] = 0
    labels[best >= pos_iou] = 1
    per_gt = ious.max(axis=0)
    for g in range(len(gt_boxes)):
        if per_gt[g] > 0:
            hits = np.nonzero(ious[:, g] == per_gt[g])[0]
            labels[hits] = 1
            match[hits] = g
    return labels, match


def rpn_loss(rpn_out: RPNOutput, gt_boxes: np.ndarray, cfg: DetectorConfig) -> tuple[Tensor, Tensor]:
    """(regression, objectness) losses; objectness averages the positive and negative means."""
    anchors = np.concatenate(rpn_out.anchors)
    obj = concat(rpn_out.objectness) if len(rpn_out.objectness) > 1 else rpn_out.objectness[0]
    deltas = concat(rpn_out.deltas) if len(rpn_out.deltas) > 1 else rpn_out.deltas[0]
    labels, match = rpn_targets(anchors, gt_boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
    pos = np.nonzero(labels == 1)[0]
    neg = np.nonzero(labels == 0)[0]
    prob = sigmoid(obj)
    cls = bce_loss(prob[neg], 0.0)
    if pos.size:
        cls = (cls + bce_loss(prob[pos], 1.0)) * 0.5
        target = encode_boxes(gt_boxes[match[pos]], anchors[pos])
        reg = smooth_l1_loss(deltas[pos], target, beta=1.0 / 9) * (1.0 / pos.size)
    else:
        reg = Tensor(0.0)
    return reg, cls


def head_targets(boxes: np.ndarray, gt_boxes: np.ndarray, gt_classes: np.ndarray, pos_iou: float = 0.5):
    """Class label per box (0 = background, c + 1 for class c) and normalised regression targets."""
    labels = np.zeros(len(boxes), dtype=np.int64)
    targets = np.zeros((len(boxes), 4))
    if len(gt_boxes) == 0 or len(boxes) == 0:
        return labels, targets
    ious = box_iou_matrix(boxes, gt_boxes)
    match = ious.argmax(axis=1)
    pos = ious.max(axis=1) >= pos_iou
    labels[pos] = np.asarray(gt_classes)[match[pos]] + 1
    targets[pos] = encode_boxes(gt_boxes[match[pos]], boxes[pos]) * HEAD_DELTA_SCALE
    return labels, targets


def head_loss(cls_logits: Tensor, box_deltas: Tensor, labels: np.ndarray, targets: np.ndarray) -> tuple[Tensor, Tensor]:
    """(smooth-L1 on positives averaged over positives, cross-entropy over bg + 5 classes)."""
    cls = ce_loss(cls_logits, labels, from_logits=True)
    pos = np.nonzero(labels > 0)[0]
    if pos.size == 0:
        return Tensor(0.0), cls
    cols = (labels[pos] - 1)[:, None] * 4 + np.arange(4)[None, :]
    picked = box_deltas[pos[:, None], cols]
    reg = smooth_l1_loss(picked, targets[pos], beta=1.0) * (1.0 / pos.size)
    return reg, cls


# -- detections -----------------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    x0: float
    y0: float
    x1: float
    y1: float
    class_id: int
    score: float

    @property
    def box(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def to_json(self, image_id: str) -> dict:
        return {
            "image_id": image_id,
            "class_id": int(self.class_id),
            "score": float(self.score),
            "x0": float(self.x0),
            "y0": float(self.y0),
            "x1": float(self.x1),
            "y1": float(self.y1),
        }


def postprocess(
    boxes: np.ndarray,
    probs: np.ndarray,
    deltas: np.ndarray,
    image_size: tuple[int, int],
    cfg: DetectorConfig,
    scale: float = 1.0,
) -> list[Detection]:
    """Per-class decode, score threshold and NMS; boxes are rescaled by ``scale`` to page pixels."""
    h, w = image_size
    out: list[tuple[float, int, int, np.ndarray]] = []
    for c in range(NUM_CLASSES):
        scores = probs[:, c + 1]
        keep = np.nonzero(scores > cfg.score_threshold)[0]
        if keep.size == 0:
            continue
        d = deltas[keep, 4 * c : 4 * c + 4] / HEAD_DELTA_SCALE
        cand = clip_boxes(decode_boxes(d, boxes[keep]), h, w)
        ok = ((cand[:, 2] - cand[:, 0]) > 0) & ((cand[:, 3] - cand[:, 1]) > 0)
        cand, sc = cand[ok], scores[keep][ok]
        for i in nms(cand, sc, cfg.test_nms_iou):
            out.append((float(sc[i]), c, len(out), cand[i]))
    out.sort(key=lambda t: (-t[0], t[2]))
    return [
        Detection(*(b * scale).tolist(), class_id=c, score=s) for s, c, _, b in out[: cfg.max_detections]
    ]


class Detector:
    """Backbone + FPN + RPN + box head; the part of the model kept at inference time."""

    def __init__(self, seed: int = 0, cfg: DetectorConfig | None = None):
        rng = np.random.default_rng(seed)
        self.cfg = cfg or DetectorConfig()
        self.backbone = Backbone(rng)
        self.fpn = FPN(rng)
        self.rpn = RPN(rng)
        self.head = BoxHead(rng)

    @property
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in (self.backbone, self.fpn, self.rpn, self.head):
            out.update(part.params)
        return out

    def features(self, image: Tensor):
        hierarchy = self.backbone.forward(image)
        return hierarchy, self.fpn.forward(hierarchy)

    def proposals(self, rpn_out: RPNOutput, image_size) -> ProposalSet:
        c = self.cfg
        return select_proposals(rpn_out, image_size, c.k_pre, c.k_post, c.rpn_nms_iou, c.min_box_size)

    def detection_loss(
        self,
        pyramid: FeaturePyramid,
        rpn_out: RPNOutput,
        proposals: ProposalSet,
        gt_boxes: np.ndarray,
        gt_classes: np.ndarray,
    ) -> DetectionLoss:
        """RPN + head losses on a labelled page; GT boxes join the head's training RoIs."""
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        rpn_reg, rpn_cls = rpn_loss(rpn_out, gt_boxes, self.cfg)
        rois = np.concatenate([proposals.boxes, gt_boxes]) if len(gt_boxes) else proposals.boxes
        labels, targets = head_targets(rois, gt_boxes, gt_classes, self.cfg.head_pos_iou)
        pooled = pool_proposals(rois, pyramid)
        logits, deltas = self.head.forward(pooled)
        head_reg, head_cls = head_loss(logits, deltas, labels, targets)
        parts = {
            "rpn_reg": rpn_reg.item(),
            "rpn_cls": rpn_cls.item(),
            "head_reg": head_reg.item(),
            "head_cls": head_cls.item(),
        }
        return DetectionLoss(rpn_reg + head_reg, rpn_cls + head_cls, parts, pooled)

    def infer(self, image: Tensor, scale: float = 1.0) -> list[Detection]:
        """Detections in page pixels (input pixels times ``scale``); pure function of weights and image."""
        with no_grad():
            _, pyramid = self.features(image)
            size = image.shape[2:]
            props = self.proposals(self.rpn.forward(pyramid), size)
            if len(props) == 0:
                return []
            logits, deltas = self.head.forward(pool_proposals(props.boxes, pyramid))
            probs = softmax(logits, axis=1).data
            return postprocess(props.boxes, probs, deltas.data, size, self.cfg, scale)
