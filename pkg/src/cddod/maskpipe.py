"""Rendering layers -> per-pixel {background, text, raster} mask, plus list-box splitting.

Vector ink is merged into the background class: thin rules carry little
semantic meaning. Where text and raster ink overlap, text wins.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

BACKGROUND, TEXT, RASTER = 0, 1, 2
MASK_PALETTE = [255, 255, 255, 0, 0, 0, 200, 60, 60]


@dataclass
class MorphParams:
    binarize_threshold: int = 250
    dilate_size: int = 5
    dilate_iterations: int = 1
    close_size: int = 9

    def __post_init__(self):
        if self.dilate_size % 2 == 0 or self.close_size % 2 == 0:
            raise ValueError("structuring elements must have odd size")
        if not 0 < self.binarize_threshold <= 255:
            raise ValueError("binarize_threshold must lie in (0, 255]")


@dataclass
class RenderMask:
    classes: np.ndarray
    page_id: str = ""


def binarize(layer: np.ndarray, threshold: int = 250) -> np.ndarray:
    """1 where the layer is darker than ``threshold`` (ink on a white background)."""
    return (np.asarray(layer) < threshold).astype(np.uint8)


def merge_layers(text_bin: np.ndarray, vector_bin: np.ndarray, raster_bin: np.ndarray) -> np.ndarray:
    if not (text_bin.shape == vector_bin.shape == raster_bin.shape):
        raise ValueError(f"layer shapes differ: {text_bin.shape}, {vector_bin.shape}, {raster_bin.shape}")
    out = np.zeros(text_bin.shape, dtype=np.uint8)
    out[raster_bin.astype(bool)] = RASTER
    out[text_bin.astype(bool)] = TEXT
    return out


def dilate(binary: np.ndarray, size: int) -> np.ndarray:
    """Square dilation; pixels outside the image count as background."""
    return ndimage.maximum_filter(binary.astype(np.uint8), size=size, mode="constant", cval=0)


def erode(binary: np.ndarray, size: int) -> np.ndarray:
    """Square erosion; pixels outside the image count as foreground, so closing stays extensive."""
    return ndimage.minimum_filter(binary.astype(np.uint8), size=size, mode="constant", cval=1)


def close(binary: np.ndarray, size: int) -> np.ndarray:
    return erode(dilate(binary, size), size)


def morph(raw: np.ndarray, params: MorphParams | None = None, page_id: str = "") -> RenderMask:
    """Dilate then close the text and raster classes separately and recombine, text on top."""
    p = params or MorphParams()
    grown = {}
    for cls in (TEXT, RASTER):
        b = (raw == cls).astype(np.uint8)
        for _ in range(p.dilate_iterations):
            b = dilate(b, p.dilate_size)
        grown[cls] = close(b, p.close_size)
    out = np.zeros(raw.shape, dtype=np.uint8)
    out[grown[RASTER].astype(bool)] = RASTER
    out[grown[TEXT].astype(bool)] = TEXT
    return RenderMask(out, page_id)


def build_mask(layers: dict[str, np.ndarray], params: MorphParams | None = None, page_id: str = "") -> RenderMask:
    p = params or MorphParams()
    raw = merge_layers(*(binarize(layers[n], p.binarize_threshold) for n in ("text", "vector", "raster")))
    return morph(raw, p, page_id)


def downsample_mask(mask: RenderMask | np.ndarray, stride: int) -> RenderMask:
    """Majority class per ``stride x stride`` block; ties go text > raster > background."""
    classes = mask.classes if isinstance(mask, RenderMask) else np.asarray(mask)
    h, w = classes.shape
    if h % stride or w % stride:
        raise ValueError(f"mask {h}x{w} is not divisible by stride {stride}")
    blocks = classes.reshape(h // stride, stride, w // stride, stride)
    priority = (TEXT, RASTER, BACKGROUND)
    counts = np.stack([(blocks == c).sum(axis=(1, 3)) for c in priority])
    out = np.asarray(priority, dtype=np.uint8)[counts.argmax(axis=0)]
    return RenderMask(out, mask.page_id if isinstance(mask, RenderMask) else "")


def save_mask(mask: RenderMask, out_dir) -> Path:
    path = Path(out_dir) / f"{mask.page_id}.mask.png"
    img = Image.fromarray(mask.classes.astype(np.uint8), mode="P")
    img.putpalette(MASK_PALETTE)
    img.save(path, format="PNG")
    return path


def load_mask(path) -> RenderMask:
    path = Path(path)
    page_id = path.name[: -len(".mask.png")] if path.name.endswith(".mask.png") else path.stem
    return RenderMask(np.asarray(Image.open(path), dtype=np.uint8), page_id)


# -- list splitting ---------------------------------------------------------------------


@dataclass
class ListSplit:
    items: list[tuple[int, int, int, int]]
    flagged: bool = False
    rows: list[tuple[int, int]] = field(default_factory=list)


def _ink_runs(flags: np.ndarray, min_gap: int) -> list[tuple[int, int]]:
    """Half-open runs of True, merging runs separated by fewer than ``min_gap`` False entries."""
    idx = np.flatnonzero(flags)
    if idx.size == 0:
        return []
    runs = []
    start = prev = int(idx[0])
    for i in idx[1:]:
        i = int(i)
        if i - prev - 1 >= min_gap:
            runs.append((start, prev + 1))
            start = i
        prev = i
    runs.append((start, prev + 1))
    return runs


def split_list_boxes(
    box,
    text_layer: np.ndarray,
    threshold: int = 250,
    min_gap: int = 3,
    bullet_band: float = 0.12,
) -> ListSplit:
    """Split a list box into item boxes using the horizontal ink projection of the text layer.

    Rows of ink are separated at blank runs of at least ``min_gap`` pixels; a row
    whose leftmost ink lies inside the left ``bullet_band`` fraction of the box
    starts a new item, any other row continues the current one.
    """
    x0, y0, x1, y1 = (int(round(v)) for v in box)
    ink = np.asarray(text_layer)[y0:y1, x0:x1] < threshold
    rows = _ink_runs(ink.any(axis=1), min_gap)
    if not rows:
        return ListSplit([(x0, y0, x1, y1)], flagged=True)
    band = bullet_band * (x1 - x0)
    groups: list[list[tuple[int, int]]] = []
    for r0, r1 in rows:
        left = int(np.flatnonzero(ink[r0:r1].any(axis=0))[0])
        if left < band or not groups:
            groups.append([(r0, r1)])
        else:
            groups[-1].append((r0, r1))
    items = []
    for g in groups:
        top, bottom = g[0][0], g[-1][1]
        cols = np.flatnonzero(ink[top:bottom].any(axis=0))
        items.append((x0 + int(cols[0]), y0 + top, x0 + int(cols[-1]) + 1, y0 + bottom))
    return ListSplit(items, rows=[(y0 + a, y0 + b) for a, b in rows])
