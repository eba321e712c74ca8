import itertools
import json

import numpy as np
import pytest
from PIL import Image

from cddod import evaluation as E
from cddod.detector import Detection


def brute_force_ap(dets, gt, thr=0.5):
    """AP from an exhaustive matcher and a pointwise max-precision envelope over all recall levels.

    ``dets`` is a list of (image, score, box, index); ``gt`` maps image -> boxes.
    Ties on score are broken by (image, index) as in the module.
    """
    n_gt = sum(len(v) for v in gt.values())
    if n_gt == 0 or not dets:
        return 0.0
    order = sorted(dets, key=lambda d: (-d[1], str(d[0]), d[3]))
    taken = set()
    hits = []
    for img, _, box, _ in order:
        cands = [(E.iou(box, g), -j) for j, g in enumerate(gt.get(img, [])) if (img, j) not in taken]
        cands = [c for c in cands if c[0] >= thr]
        if cands:
            _, negj = max(cands)
            taken.add((img, -negj))
            hits.append(True)
        else:
            hits.append(False)
    points = []
    tp = 0
    for k, h in enumerate(hits, start=1):
        tp += h
        points.append((tp / n_gt, tp / k))
    ap = 0.0
    prev_recall = 0.0
    for level in sorted({r for r, _ in points}):
        if level == 0:
            continue
        best = max(p for r, p in points if r >= level)
        ap += (level - prev_recall) * best
        prev_recall = level
    return ap


def random_instance(rng):
    images = [f"im{i}" for i in range(int(rng.integers(1, 4)))]
    gt, dets = {}, []
    for img in images:
        boxes = []
        for _ in range(int(rng.integers(0, 5))):
            x, y = rng.uniform(0, 50, 2)
            w, h = rng.uniform(5, 30, 2)
            boxes.append((x, y, x + w, y + h))
        gt[img] = boxes
    for k in range(int(rng.integers(0, 7))):
        img = images[int(rng.integers(len(images)))]
        if gt[img] and rng.random() < 0.7:
            b = np.array(gt[img][int(rng.integers(len(gt[img])))]) + rng.normal(0, 3, 4)
            b[2:] = np.maximum(b[2:], b[:2] + 1)
        else:
            x, y = rng.uniform(0, 50, 2)
            b = np.array([x, y, x + 10, y + 10])
        score = float(np.round(rng.uniform(), 1))  # coarse scores force ties
        dets.append((img, score, tuple(b), k))
    return dets, gt


def test_iou_cases():
    assert E.iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert E.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert abs(E.iou((0, 0, 2, 2), (1, 0, 3, 2)) - 2 / 6) < 1e-12


def test_single_detection_cases():
    gt = {"a": [(0, 0, 10, 10)]}
    assert E.average_precision([E.ScoredBox("a", 0.9, (0, 0, 10, 10))], gt) == 1.0
    low = E.ScoredBox("a", 0.9, (0, 0, 10, 4))  # IoU 0.4
    assert E.average_precision([low], gt) == 0.0


def test_hand_walked_curve():
    gt = {"a": [(0, 0, 10, 10), (20, 20, 30, 30)]}
    dets = [
        E.ScoredBox("a", 0.9, (0, 0, 10, 10), 0),
        E.ScoredBox("a", 0.8, (50, 50, 60, 60), 1),
        E.ScoredBox("a", 0.7, (20, 20, 30, 30), 2),
    ]
    assert E.average_precision(dets, gt) == 1 * 0.5 + (2 / 3) * 0.5
    assert abs(E.average_precision(dets, gt) - 0.833333) < 1e-6


def test_duplicate_detection_is_false_positive():
    gt = {"a": [(0, 0, 10, 10)]}
    dets = [E.ScoredBox("a", 0.9, (0, 0, 10, 10), 0), E.ScoredBox("a", 0.8, (0, 0, 10, 10), 1)]
    assert list(E.match(E.rank(dets), gt)) == [True, False]


def test_no_ground_truth_is_flagged():
    res = E.class_ap([], {"a": []})
    assert res.ap == 0.0 and res.flag == "no ground truth and no detections"


@pytest.mark.parametrize("chunk", range(4))
def test_matches_brute_force_oracle(chunk):
    rng = np.random.default_rng(1000 + chunk)
    for _ in range(50):
        dets, gt = random_instance(rng)
        boxes = [E.ScoredBox(i, s, b, k) for i, s, b, k in dets]
        assert abs(E.average_precision(boxes, gt) - brute_force_ap(dets, gt)) < 1e-9


def test_ranking_independent_of_input_order():
    rng = np.random.default_rng(5)
    dets, gt = random_instance(rng)
    boxes = [E.ScoredBox(i, s, b, k) for i, s, b, k in dets]
    ref = E.average_precision(boxes, gt)
    for perm in itertools.islice(itertools.permutations(boxes), 20):
        assert E.average_precision(list(perm), gt) == ref


def test_mean_ap_report(tmp_path):
    gt = {"p0": [(0, (0, 0, 10, 10)), (2, (20, 20, 40, 30))], "p1": [(0, (5, 5, 15, 15))]}
    dets = {
        "p0": [Detection(0, 0, 10, 10, 0, 0.9), Detection(20, 20, 40, 30, 2, 0.8)],
        "p1": [Detection(50, 50, 60, 60, 0, 0.95)],
    }
    report = E.mean_ap(dets, gt)
    assert report.per_class_ap["heading"] == 1.0
    assert report.per_class_ap["text"] == 0.25  # FP first, then one of two GT
    assert report.per_class_ap["list"] is None and report.per_class_ap["figure"] is None
    assert report.map == (1.0 + 0.25) / 2
    assert report.counts["text"] == {"gt": 2, "det": 2}
    assert report.n_images == 2 and report.iou_threshold == 0.5 and report.interpolation == "all-points"
    assert any("list" in f for f in report.flags)
    report.save(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["map"] == report.map


def test_empty_evaluation_set():
    report = E.mean_ap({}, {})
    assert report.map == 0.0 and "empty evaluation set" in report.flags


def test_overlay_writes_png(tmp_path):
    img = np.full((40, 40), 255, np.uint8)
    E.write_overlay(tmp_path / "o.png", img, [(0, (2, 2, 20, 20))], [Detection(5, 5, 30, 30, 1, 0.5)])
    out = np.asarray(Image.open(tmp_path / "o.png"))
    assert out[2, 10] == 0 and out[5, 25] == 140
