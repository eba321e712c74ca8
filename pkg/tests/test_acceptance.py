"""Acceptance suite: one PASS/FAIL line per criterion (see the terminal summary).

Criterion 9 trains twelve detectors and takes about 26 minutes on one CPU;
deselect it with ``-m "not slow"``.
"""

import math
import time

import numpy as np
import pytest
from scipy import ndimage

from cddod import alignment as A
from cddod import compute as C
from cddod import docgen as G
from cddod import evaluation as E
from cddod import maskpipe as M
from cddod import training as T
from cddod.backbone import PYRAMID_CHANNELS, STAGE_CHANNELS, FeatureHierarchy, FPN, Backbone
from cddod.compute import Tensor
from cddod.detector import box_iou_matrix, pool_proposals
from test_alignment import _grads, micro_batch
from test_backbone import toy_fpn
from test_compute import OPS, _elementwise_cases, leaf
from test_evaluation import brute_force_ap, random_instance
from test_maskpipe import brute_dilate, brute_erode


# -- 1. gradient fidelity ----------------------------------------------------------------


def test_c01_gradient_fidelity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    op_err = 0.0
    for name, f, leaves in _elementwise_cases(rng):
        for t in leaves:
            op_err = max(op_err, C.finite_difference_check(f, t, h=1e-6))
    for name, op in OPS.items():
        x, w, b = leaf(rng.normal(size=(1, 3, 8, 8))), leaf(rng.normal(size=(4, 3, 3, 3))), leaf(rng.normal(size=4))
        wts = rng.normal(size=op(x, w, b).shape)
        for t in (x, w, b):
            op_err = max(op_err, C.finite_difference_check(lambda: (op(x, w, b) * wts).sum(), t, h=1e-5))
    x, w, b = leaf(rng.normal(size=(3, 5))), leaf(rng.normal(size=(2, 5))), leaf(rng.normal(size=2))
    wts = rng.normal(size=(3, 2))
    for t in (x, w, b):
        op_err = max(op_err, C.finite_difference_check(lambda: (C.linear(x, w, b) * wts).sum(), t, h=1e-5))
    u = leaf(rng.normal(size=(1, 2, 3, 3)))
    uw = rng.normal(size=(1, 2, 6, 6))
    op_err = max(op_err, C.finite_difference_check(lambda: (C.upsample_nearest2x(u) * uw).sum(), u, h=1e-5))

    # full objective on a 2-page (source + target) 64x64 micro-batch; the plain graph is
    # differentiated because reversal flips the backbone gradient on purpose (criterion 2)
    model = A.DomainAdaptiveModel(seed=4)
    batch = micro_batch(64, seed=5)
    _, _, frozen = A.combined_loss(model, batch, A.LossWeights(), np.random.default_rng(0))

    def objective():
        return A.combined_loss(model, batch, A.LossWeights(), np.random.default_rng(0), frozen, reverse=False)[0]

    e2e_err = 0.0
    params = model.params
    for name in (
        "backbone.s1.conv0.w", "backbone.s3.conv1.w", "backbone.s4.conv1.w", "fpn.lateral2.w", "fpn.smooth1.w",
        "rpn.obj.w", "rpn.delta.w", "head.fc1.w", "head.cls.w", "fpa1.conv0.w", "fpa4.conv1.w", "ra.fc1.w",
        "ra.fc2.w", "rla.conv0.w",
    ):
        p = params[name]
        idx = [tuple(int(rng.integers(s)) for s in p.shape) for _ in range(3)]
        e2e_err = max(e2e_err, C.finite_difference_check(objective, p, h=1e-6, indices=idx))
    seconds = time.perf_counter() - start
    ok = op_err < 1e-4 and e2e_err < 1e-3 and seconds < 60
    verdict(1, "gradient fidelity", ok, f"ops {op_err:.2e} (<1e-4), end-to-end {e2e_err:.2e} (<1e-3), {seconds:.1f}s (<60s)")
    assert ok


# -- 2. gradient reversal -------------------------------------------------------------------


def test_c02_gradient_reversal(verdict):
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    forward_ok = np.array_equal(C.grad_reverse(x).data, x.data)
    model = A.DomainAdaptiveModel(seed=3)
    batch = micro_batch(64, seed=1)
    det = model.detector
    boxes = np.array([[0, 0, 40, 30], [10, 20, 60, 60]], float)

    def loss(which, reverse):
        def f():
            _, pyr_s = det.features(batch.source.image)
            _, pyr_t = det.features(batch.target.image)
            if which == "fpa":
                return A.fpa_loss(pyr_s, pyr_t, model.heads, reverse)
            return A.ra_loss(
                pool_proposals(boxes, pyr_s), pool_proposals(boxes[::-1], pyr_t), model.heads,
                rng=np.random.default_rng(11), reverse=reverse,
            )

        return f

    worst, checked = 0.0, 0
    for which in ("fpa", "ra"):
        forward_ok &= loss(which, True)().item() == loss(which, False)().item()
        rev = _grads(loss(which, True), model.params)
        plain = _grads(loss(which, False), model.params)
        for name in det.params:
            if rev[name] is not None:
                worst = max(worst, float(np.abs(rev[name] + plain[name]).max()))
                checked += 1
    ok = forward_ok and checked > 0 and worst <= 1e-12
    verdict(2, "gradient reversal", ok, f"forward identical={forward_ok}, max |g_rev + g_plain| {worst:.1e} over {checked} leaves (<=1e-12)")
    assert ok


# -- 3. focal degeneracy --------------------------------------------------------------------


def test_c03_focal_degeneracy(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        ps = rng.uniform(0.01, 0.99, size=int(rng.integers(1, 65)))
        pt = rng.uniform(0.01, 0.99, size=int(rng.integers(1, 65)))
        bce = -np.mean(np.log(ps)) - np.mean(np.log(1 - pt))
        worst = max(worst, abs(A.focal_domain_loss(Tensor(ps), Tensor(pt), 0.0).item() - bce))
    empty = Tensor(np.zeros(0))
    g5 = A.focal_domain_loss(Tensor([0.9]), empty, 5.0).item()
    g0 = A.focal_domain_loss(Tensor([0.9]), empty, 0.0).item()
    exact = g5 == (1 - 0.9) ** 5 * g0  # the float factor (1 - D_r)^5, D_r = 0.9
    ok = worst < 1e-12 and exact and abs(g5 / g0 - 1e-5) < 1e-15
    verdict(3, "focal degeneracy", ok, f"gamma=0 vs mean BCE {worst:.1e} (<1e-12), gamma=5 ratio {g5 / g0:.15g} (exact 1e-5)")
    assert ok


# -- 4. closed-form losses --------------------------------------------------------------------


def test_c04_closed_form_losses(verdict, datasets):
    half = [Tensor(np.full((1, 1, s, s), 0.5)) for s in (8, 4, 2, 1)]
    fpa = A.fpa_loss_from_probs(half, half).item()
    uniform = Tensor(np.full((1, 3, 4, 4), 1 / 3))
    mask = np.random.default_rng(0).integers(0, 3, size=(4, 4))
    rla = A.segmentation_loss(uniform, mask, uniform, mask).item()
    cfg = T.TrainConfig(epochs=2, lr=0.005, seed=3)
    src = [T.prepare_page(p, 2) for p in T.load_split(datasets / "A", "train")]
    tgt = [T.prepare_page(p, 2) for p in T.load_split(datasets / "B", "train")]
    log = T.train(cfg, src, tgt).log
    worst = 0.0
    for rec in log:
        l1, l2, l3 = rec["lambdas"]
        assert (l1, l2, l3) == (0.1, 0.1, 0.01)
        worst = max(worst, abs(rec["total"] - (rec["l_det"] + l1 * rec["l_p"] + l2 * rec["l_r"] + l3 * rec["l_s"])))
    ok = abs(fpa - 2 * math.log(2)) <= 1e-9 and abs(rla - math.log(3)) <= 1e-9 and worst <= 1e-12
    verdict(
        4, "closed-form losses", ok,
        f"fpa {fpa:.12f} vs 2ln2, rla {rla:.12f} vs ln3, total recomposition {worst:.1e} over {len(log)} steps",
    )
    assert ok


# -- 5. pyramid contract -----------------------------------------------------------------------


def test_c05_pyramid_contract(verdict):
    h = Backbone(np.random.default_rng(0)).forward(Tensor(np.random.default_rng(1).uniform(size=(1, 1, 64, 128))))
    p = FPN(np.random.default_rng(1)).forward(h)
    shapes_ok = all(m.shape[2:] == c.shape[2:] and m.shape[1] == PYRAMID_CHANNELS for c, m in zip(h.c_maps, p.p_maps))

    rng = np.random.default_rng(5)
    c = [rng.normal(size=(1, ch) + s) for ch, s in zip(STAGE_CHANNELS, [(16, 8), (8, 4), (4, 2), (2, 1)])]
    toy = toy_fpn().forward(FeatureHierarchy([Tensor(x) for x in c]))
    lat = [x.sum(axis=1, keepdims=True) for x in c]
    ref = [None] * 4
    ref[3] = lat[3] + lat[3]  # P4 = P5 + lateral, P5 itself being the lateral projection of C4
    for i in (2, 1, 0):
        ref[i] = ref[i + 1].repeat(2, axis=-2).repeat(2, axis=-1) + lat[i]
    worst = max(float(np.abs(m.data - r).max()) for m, r in zip(toy.p_maps, ref))
    ok = shapes_ok and worst < 1e-9
    verdict(5, "pyramid contract", ok, f"dims/width match={shapes_ok}, toy cascade error {worst:.1e} (<1e-9)")
    assert ok


# -- 6. evaluation oracle -----------------------------------------------------------------------


def test_c06_evaluation_oracle(verdict):
    worst = 0.0
    for chunk in range(4):
        rng = np.random.default_rng(1000 + chunk)
        for _ in range(50):
            dets, gt = random_instance(rng)
            boxes = [E.ScoredBox(i, s, b, k) for i, s, b, k in dets]
            worst = max(worst, abs(E.average_precision(boxes, gt) - brute_force_ap(dets, gt)))
    gt = {"a": [(0, 0, 10, 10), (20, 20, 30, 30)]}
    walked = E.average_precision(
        [
            E.ScoredBox("a", 0.9, (0, 0, 10, 10), 0),
            E.ScoredBox("a", 0.8, (50, 50, 60, 60), 1),
            E.ScoredBox("a", 0.7, (20, 20, 30, 30), 2),
        ],
        gt,
    )
    ok = worst < 1e-9 and walked == 0.5 + (2 / 3) * 0.5
    verdict(6, "evaluation oracle", ok, f"200 instances max |AP - oracle| {worst:.1e} (<1e-9), hand-walked AP {walked:.6f}")
    assert ok


# -- 7. mask pipeline --------------------------------------------------------------------------


def test_c07_mask_pipeline(verdict):
    wrong = interior_total = 0
    for k in range(100):
        page = G.generate_page(G.DOMAINS["AB"[k % 2]](), np.random.default_rng(1000 + k))
        mask = M.build_mask(page.layers).classes
        reg = page.regions.astype(int)
        edge = np.zeros(reg.shape, bool)
        dy, dx = reg[1:] != reg[:-1], reg[:, 1:] != reg[:, :-1]
        edge[1:] |= dy
        edge[:-1] |= dy
        edge[:, 1:] |= dx
        edge[:, :-1] |= dx
        interior = ndimage.distance_transform_edt(~edge) >= 4
        wrong += int(((mask != reg) & interior).sum())
        interior_total += int(interior.sum())
    rng = np.random.default_rng(0)
    morph_ok = closing_ok = True
    for size in (3, 5, 9):
        for _ in range(40):
            b = (rng.random((16, 16)) < rng.uniform(0.1, 0.6)).astype(np.uint8)
            morph_ok &= np.array_equal(M.dilate(b, size), brute_dilate(b, size))
            morph_ok &= np.array_equal(M.erode(b, size), brute_erode(b, size))
            closed = M.close(b, size)
            closing_ok &= np.array_equal(M.close(closed, size), closed) and bool(np.all(closed >= b))
    ok = wrong == 0 and morph_ok and closing_ok
    verdict(
        7, "mask pipeline", ok,
        f"{wrong} wrong of {interior_total} interior px on 100 pages, morphology={morph_ok}, closing idempotent={closing_ok}",
    )
    assert ok


# -- 8. list splitting ---------------------------------------------------------------------------


def test_c08_list_splitting(verdict):
    ious, counts_ok, blocks, k = [], 0, 0, 0
    while blocks < 100:
        page = G.generate_page(G.DOMAINS["AB"[k % 2]](), np.random.default_rng(2000 + k))
        k += 1
        for ann in page.boxes:
            if ann.class_id != 1 or not ann.items or blocks == 100:
                continue
            blocks += 1
            split = M.split_list_boxes(ann.box, page.layers["text"])
            truth = np.array(ann.items, float)
            if len(split.items) == len(ann.items):
                counts_ok += 1
                ious.extend(np.diag(box_iou_matrix(np.array(split.items, float), truth)))
            else:  # best match per generator item
                ious.extend(box_iou_matrix(truth, np.array(split.items, float)).max(axis=1))
    mean_iou = float(np.mean(ious))
    ok = mean_iou >= 0.8 and counts_ok >= 95
    verdict(8, "list splitting", ok, f"mean item IoU {mean_iou:.3f} (>=0.8), correct count {counts_ok}/100 blocks (>=95)")
    assert ok


# -- 9. adaptation smoke -------------------------------------------------------------------------

# lr/momentum/clip are the desk-scale optimizer shared by both arms; everything else is default
EXPERIMENT = dict(epochs=12, lr=0.01, momentum=0.9, clip_norm=10.0)
SOURCE_ONLY = dict(enable_fpa=False, enable_ra=False, enable_rla=False)


@pytest.mark.slow
def test_c09_adaptation_smoke(verdict, tmp_path):
    start = time.perf_counter()
    for name, seed in (("A", 11), ("B", 22)):
        G.generate_dataset(G.DOMAINS[name](), 80, seed, tmp_path / name, test_fraction=0.2)
    a_pages = T.load_split(tmp_path / "A", "train")
    b_pages = T.load_split(tmp_path / "B", "train")
    b_test = T.load_split(tmp_path / "B", "test")
    src = [T.prepare_page(p, 2) for p in a_pages]
    tgt = [T.prepare_page(p, 2) for p in b_pages]
    base, full = [], []
    for seed in (0, 1, 2):
        r = T.train(T.TrainConfig(seed=seed, **EXPERIMENT, **SOURCE_ONLY), src)
        base.append(100 * T.evaluate(r.model.detector, b_test).map)
        r = T.train(T.TrainConfig(seed=seed, **EXPERIMENT), src, tgt)
        full.append(100 * T.evaluate(r.model.detector, b_test).map)
    gain = float(np.median(full) - np.median(base))

    # overfit check: 4 source pages, 200 steps, evaluated on those pages
    few = a_pages[:4]
    r = T.train(T.TrainConfig(seed=0, epochs=50, lr=0.01, momentum=0.9, clip_norm=10.0, decay_epochs=(40,), **SOURCE_ONLY),
                [T.prepare_page(p, 2, False) for p in few])
    overfit = T.evaluate(r.model.detector, few).map
    seconds = time.perf_counter() - start
    ok = len(a_pages) == len(b_pages) == 64 and gain >= 2.0 and overfit == 1.0 and seconds < 1800
    verdict(
        9, "adaptation smoke", ok,
        f"target mAP source-only {[round(v, 2) for v in base]} full {[round(v, 2) for v in full]}, "
        f"median gain {gain:+.2f} (>=+2.0); overfit mAP {overfit:.3f} (1.0); {seconds / 60:.1f} min (<30)",
    )
    assert ok


# -- 10. determinism and persistence ---------------------------------------------------------------


def test_c10_determinism_and_persistence(verdict, datasets, tmp_path):
    src = [T.prepare_page(p, 2) for p in T.load_split(datasets / "A", "train")]
    tgt = [T.prepare_page(p, 2) for p in T.load_split(datasets / "B", "train")]
    cfg = T.TrainConfig(epochs=1, lr=0.005, seed=1)
    a, b = T.train(cfg, src, tgt), T.train(cfg, src, tgt)
    worst = max(abs(x[k] - y[k]) for x, y in zip(a.log, b.log) for k in ("total", "l_det", "l_p", "l_r", "l_s"))
    T.save_model(tmp_path / "m.ckpt", a.model.detector)
    loaded, _ = T.load_model(tmp_path / "m.ckpt")
    pages = T.load_split(datasets / "B", "test") + T.load_split(datasets / "A", "test")
    same = T.predict(a.model.detector, pages) == T.predict(loaded, pages)
    bitwise = all(np.array_equal(p.data, loaded.params[n].data) for n, p in a.model.detector.params.items())
    ok = len(a.log) == len(b.log) and worst <= 1e-12 and same and bitwise
    verdict(10, "determinism and persistence", ok, f"rerun loss diff {worst:.1e} (<=1e-12), round-trip detections identical={same}")
    assert ok
