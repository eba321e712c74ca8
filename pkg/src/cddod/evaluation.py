"""Detection evaluation: IoU, greedy one-to-one matching, all-points AP and mAP at IoU 0.5."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .detector import CLASS_NAMES, Detection

IOU_THRESHOLD = 0.5
INTERPOLATION = "all-points"


def iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


@dataclass(frozen=True)
class ScoredBox:
    image_id: str
    score: float
    box: tuple[float, float, float, float]
    index: int = 0


@dataclass
class ClassAP:
    ap: float
    n_gt: int
    n_det: int
    flag: str | None = None


def rank(detections: Iterable[ScoredBox]) -> list[ScoredBox]:
    """Descending score; ties by image id then detection index, so the order is reproducible."""
    return sorted(detections, key=lambda d: (-d.score, str(d.image_id), d.index))


def match(detections: Sequence[ScoredBox], gt: Mapping[str, Sequence], iou_thr: float = IOU_THRESHOLD) -> np.ndarray:
    """True-positive flag per ranked detection: each takes the unmatched GT box of highest IoU >= thr."""
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt.items()}
    tp = np.zeros(len(detections), dtype=bool)
    for k, d in enumerate(detections):
        boxes = gt.get(d.image_id, ())
        best, best_j = iou_thr, -1
        for j, g in enumerate(boxes):
            if used[d.image_id][j]:
                continue
            v = iou(d.box, g)
            if v >= best and (best_j < 0 or v > best):
                best, best_j = v, j
        if best_j >= 0:
            used[d.image_id][best_j] = True
            tp[k] = True
    return tp


def ap_from_flags(tp: np.ndarray, n_gt: int) -> float:
    """Area under the precision-recall curve with the monotone (all-points) precision envelope."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    precision = np.cumsum(tp) / np.arange(1, len(tp) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # recall rises by exactly 1/n_gt at each true positive and stays flat at false positives
    return float(np.sum(envelope[tp]) / n_gt)


def class_ap(detections: Iterable[ScoredBox], gt: Mapping[str, Sequence], iou_thr: float = IOU_THRESHOLD) -> ClassAP:
    dets = rank(detections)
    n_gt = sum(len(v) for v in gt.values())
    flag = None
    if n_gt == 0:
        flag = "no ground truth and no detections" if not dets else "no ground truth"
    return ClassAP(ap_from_flags(match(dets, gt, iou_thr), n_gt), n_gt, len(dets), flag)


def average_precision(detections: Iterable[ScoredBox], gt: Mapping[str, Sequence], iou_thr: float = IOU_THRESHOLD) -> float:
    return class_ap(detections, gt, iou_thr).ap


@dataclass
class EvalReport:
    per_class_ap: dict[str, float | None]
    map: float
    counts: dict[str, dict[str, int]]
    iou_threshold: float = IOU_THRESHOLD
    interpolation: str = INTERPOLATION
    n_images: int = 0
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))


def mean_ap(
    detections: Mapping[str, Sequence[Detection]],
    ground_truth: Mapping[str, Sequence[tuple[int, Sequence[float]]]],
    iou_thr: float = IOU_THRESHOLD,
    class_names: Sequence[str] = CLASS_NAMES,
) -> EvalReport:
    """Per-class AP over a set of images and their mean.

    ``detections`` maps image id -> detections; ``ground_truth`` maps image id ->
    (class_id, box) pairs. Classes with no ground truth anywhere are left out of
    the mean and reported as null with a flag.
    """
    images = sorted(set(ground_truth) | set(detections), key=str)
    per_class, counts, flags = {}, {}, []
    for c, name in enumerate(class_names):
        gt = {i: [tuple(b) for cid, b in ground_truth.get(i, ()) if cid == c] for i in images}
        dets = [
            ScoredBox(i, float(d.score), d.box, k)
            for i in images
            for k, d in enumerate(detections.get(i, ()))
            if d.class_id == c
        ]
        res = class_ap(dets, gt, iou_thr)
        counts[name] = {"gt": res.n_gt, "det": res.n_det}
        if res.n_gt == 0:
            per_class[name] = None
            flags.append(f"class '{name}' excluded from mAP: {res.flag}")
        else:
            per_class[name] = res.ap
    present = [v for v in per_class.values() if v is not None]
    if not images:
        flags.append("empty evaluation set")
    value = float(np.mean(present)) if present else 0.0
    return EvalReport(per_class, value, counts, iou_thr, INTERPOLATION, len(images), flags)


def write_overlay(path, image: np.ndarray, gt: Sequence[tuple[int, Sequence[float]]], dets: Sequence[Detection]) -> None:
    """Grayscale page with ground truth drawn in black and detections in mid-gray."""
    canvas = Image.fromarray(np.asarray(image, dtype=np.uint8)).convert("L")
    draw = ImageDraw.Draw(canvas)
    for _, b in gt:
        draw.rectangle([b[0], b[1], b[2] - 1, b[3] - 1], outline=0, width=2)
    for d in dets:
        draw.rectangle([d.x0, d.y0, d.x1 - 1, d.y1 - 1], outline=140, width=1)
    canvas.save(path)
