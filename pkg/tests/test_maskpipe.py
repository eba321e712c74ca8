import numpy as np
import pytest
from scipy import ndimage

from cddod import docgen as G
from cddod import maskpipe as M
from cddod.detector import box_iou_matrix


def brute_dilate(b, size):
    r = size // 2
    h, w = b.shape
    out = np.zeros_like(b)
    for i in range(h):
        for j in range(w):
            out[i, j] = any(
                b[y, x] for y in range(max(0, i - r), min(h, i + r + 1)) for x in range(max(0, j - r), min(w, j + r + 1))
            )
    return out


def brute_erode(b, size):
    """A pixel survives when every in-image pixel of its window is set (the outside counts as set)."""
    r = size // 2
    h, w = b.shape
    out = np.zeros_like(b)
    for i in range(h):
        for j in range(w):
            out[i, j] = all(
                b[y, x] for y in range(max(0, i - r), min(h, i + r + 1)) for x in range(max(0, j - r), min(w, j + r + 1))
            )
    return out


def list_page(lines_per_item, seed=0, width=300):
    rng = np.random.default_rng(seed)
    _, style = G.sample_params(G.domain_a(), rng)
    canvas = G._Canvas(G.PAGE_SIZE)
    box, items = G._list(canvas, rng, style, 40, 40, width, lines_per_item)
    return box, items, canvas.layers["text"]


# -- binarize / merge ---------------------------------------------------------------------


def test_binarize_boundaries():
    assert not M.binarize(np.full((4, 4), 255)).any()
    assert M.binarize(np.zeros((4, 4))).all()
    assert M.binarize(np.array([249, 250]), 250).tolist() == [1, 0]


def test_merge_priorities():
    t = np.array([[0, 1, 0, 1, 0]])
    v = np.array([[1, 0, 0, 1, 0]])
    r = np.array([[0, 1, 1, 0, 0]])
    assert M.merge_layers(t, v, r).tolist() == [[M.BACKGROUND, M.TEXT, M.RASTER, M.TEXT, M.BACKGROUND]]
    with pytest.raises(ValueError):
        M.merge_layers(t, v, np.zeros((2, 5)))


# -- morphology ---------------------------------------------------------------------------


@pytest.mark.parametrize("size", [3, 5, 9])
def test_morphology_matches_brute_force_on_random_grids(size):
    rng = np.random.default_rng(size)
    for _ in range(40):
        b = (rng.random((16, 16)) < rng.uniform(0.05, 0.6)).astype(np.uint8)
        d = M.dilate(b, size)
        assert np.array_equal(d, brute_dilate(b, size))
        assert np.array_equal(M.erode(b, size), brute_erode(b, size))
        c = M.close(b, size)
        assert np.array_equal(c, brute_erode(brute_dilate(b, size), size))
        assert np.all(c >= b)  # extensive
        assert np.array_equal(M.close(c, size), c)  # idempotent


def test_blobs_three_pixels_apart_merge():
    raw = np.zeros((16, 16), np.uint8)
    raw[6:10, 2:6] = M.TEXT
    raw[6:10, 9:13] = M.TEXT
    mask = M.morph(raw, M.MorphParams(dilate_size=5, close_size=3)).classes
    _, n = ndimage.label(mask == M.TEXT)
    assert n == 1


def test_empty_map_gives_empty_mask():
    assert not M.morph(np.zeros((16, 16), np.uint8)).classes.any()


def test_text_wins_after_growth():
    raw = np.zeros((16, 16), np.uint8)
    raw[4:8, 4:8] = M.RASTER
    raw[8:10, 4:8] = M.TEXT
    out = M.morph(raw, M.MorphParams(dilate_size=3, close_size=3)).classes
    assert out[8, 5] == M.TEXT and out[5, 5] == M.RASTER


def test_params_validation():
    with pytest.raises(ValueError):
        M.MorphParams(dilate_size=4)
    with pytest.raises(ValueError):
        M.MorphParams(binarize_threshold=0)


# -- downsampling ---------------------------------------------------------------------------


def test_downsample_majority_and_ties():
    m = np.zeros((32, 96), np.uint8)
    m[:, 32:64] = M.RASTER
    m[:20, 64:96] = M.TEXT  # 62.5% text
    assert M.downsample_mask(m, 32).classes.tolist() == [[0, 2, 1]]
    tie = np.zeros((32, 64), np.uint8)
    tie[:16, :32] = M.TEXT
    tie[:16, 32:] = M.RASTER
    assert M.downsample_mask(tie, 32).classes.tolist() == [[M.TEXT, M.RASTER]]
    three = np.zeros((2, 2), np.uint8)
    three[0] = [M.TEXT, M.RASTER]
    three[1] = [M.RASTER, M.TEXT]
    assert M.downsample_mask(three, 2).classes.tolist() == [[M.TEXT]]
    with pytest.raises(ValueError, match="divisible"):
        M.downsample_mask(np.zeros((30, 32), np.uint8), 32)


def test_mask_png_round_trip(tmp_path):
    classes = np.random.default_rng(0).integers(0, 3, size=(20, 24)).astype(np.uint8)
    path = M.save_mask(M.RenderMask(classes, "p7"), tmp_path)
    assert path.name == "p7.mask.png"
    back = M.load_mask(path)
    assert back.page_id == "p7" and np.array_equal(back.classes, classes)


def test_generated_page_interiors():
    for k, d in enumerate("AB"):
        page = G.generate_page(G.DOMAINS[d](), np.random.default_rng(50 + k))
        mask = M.build_mask(page.layers).classes
        reg = page.regions.astype(int)
        edge = np.zeros(reg.shape, bool)
        dy, dx = reg[1:] != reg[:-1], reg[:, 1:] != reg[:, :-1]
        edge[1:] |= dy
        edge[:-1] |= dy
        edge[:, 1:] |= dx
        edge[:, :-1] |= dx
        interior = ndimage.distance_transform_edt(~edge) >= 4
        assert not ((mask != reg) & interior).any()


# -- list splitting -------------------------------------------------------------------------


def test_three_item_list_matches_generator():
    box, items, text = list_page([2, 1, 2], seed=1)
    split = M.split_list_boxes(box, text)
    assert not split.flagged and len(split.items) == 3
    ious = np.diag(box_iou_matrix(np.array(split.items, float), np.array(items, float)))
    assert np.all(ious >= 0.8)


def test_single_item_list():
    box, items, text = list_page([2], seed=2)
    assert len(M.split_list_boxes(box, text).items) == 1


def test_empty_region_returns_box_flagged():
    text = np.full((100, 100), 255, np.uint8)
    split = M.split_list_boxes((10, 10, 60, 40), text)
    assert split.flagged and split.items == [(10, 10, 60, 40)]


def test_ink_runs_merge_small_gaps():
    flags = np.array([1, 1, 0, 1, 0, 0, 0, 1, 1], bool)
    assert M._ink_runs(flags, 3) == [(0, 4), (7, 9)]
    assert M._ink_runs(flags, 1) == [(0, 2), (3, 4), (7, 9)]
    assert M._ink_runs(np.zeros(4, bool), 1) == []
