"""Deterministic two-domain synthetic page generator.

Pages are drawn straight into three rendering layers (text, vector, raster),
each an 8-bit grayscale raster on a white background; the page image is their
pixelwise minimum. Text is simulated with rows of character blobs, so no font
assets are needed. Every block yields a tight 5-class box; list blocks also
carry one sub-box per item.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .detector import CLASS_NAMES

PAGE_SIZE = 640
WHITE = 255
BLOCK_TYPES = ("text", "heading", "list", "table", "figure")
LAYER_NAMES = ("text", "vector", "raster")
REGION_BACKGROUND, REGION_TEXT, REGION_RASTER = 0, 1, 2


@dataclass
class LayoutParams:
    margin: int
    columns: int
    column_gap: int
    header: bool
    footer: bool
    block_gap: int
    block_weights: dict[str, float]
    max_blocks: int = 64
    page_size: int = PAGE_SIZE

    @property
    def column_width(self) -> int:
        return (self.page_size - 2 * self.margin - (self.columns - 1) * self.column_gap) // self.columns


@dataclass
class StyleParams:
    base_glyph_height: int
    heading_scale: float
    line_spacing: int
    word_gap: int
    char_gap: int
    bullet_radius: int
    table_rule_width: int
    ink_level: int
    figure_ink: tuple[int, int] = (40, 215)

    @property
    def heading_glyph_height(self) -> int:
        return max(self.base_glyph_height + 2, int(round(self.base_glyph_height * self.heading_scale)))


@dataclass
class DomainConfig:
    """Sampling distributions for one synthetic domain; ranges are inclusive ``(lo, hi)``."""

    name: str
    margin: tuple[int, int] = (28, 48)
    columns: dict[int, float] = field(default_factory=lambda: {1: 0.5, 2: 0.5})
    column_gap: tuple[int, int] = (18, 30)
    header_prob: float = 0.5
    footer_prob: float = 0.5
    block_gap: tuple[int, int] = (14, 22)
    block_weights: dict[str, float] = field(
        default_factory=lambda: {"text": 0.35, "heading": 0.2, "list": 0.15, "table": 0.15, "figure": 0.15}
    )
    glyph_height: tuple[int, int] = (10, 13)
    heading_scale: tuple[float, float] = (1.4, 1.8)
    line_spacing: tuple[int, int] = (3, 6)
    word_gap: tuple[int, int] = (5, 8)
    char_gap: tuple[int, int] = (1, 2)
    bullet_radius: tuple[int, int] = (3, 4)
    table_rule_width: tuple[int, int] = (1, 2)
    ink_level: tuple[int, int] = (0, 30)
    figure_ink: tuple[int, int] = (40, 215)
    min_column_width: int = 140

    def to_json(self) -> dict:
        out = asdict(self)
        out["columns"] = {str(k): v for k, v in self.columns.items()}
        return out


def domain_a() -> DomainConfig:
    """Source-style domain: dark ink, one or two columns, larger glyphs."""
    return DomainConfig(name="A")


def domain_b() -> DomainConfig:
    """Target-style domain: gray ink, two or three columns, smaller glyphs, more figures."""
    return DomainConfig(
        name="B",
        margin=(20, 36),
        columns={2: 0.5, 3: 0.5},
        column_gap=(16, 24),
        block_weights={"text": 0.3, "heading": 0.2, "list": 0.15, "table": 0.15, "figure": 0.2},
        glyph_height=(9, 11),
        heading_scale=(1.5, 2.0),
        line_spacing=(3, 5),
        word_gap=(4, 7),
        ink_level=(95, 135),
        figure_ink=(90, 230),
        min_column_width=150,
    )


DOMAINS = {"A": domain_a, "B": domain_b}


@dataclass
class Annotation:
    class_id: int
    box: tuple[int, int, int, int]  # x0, y0, x1, y1 with exclusive upper bounds
    items: list[tuple[int, int, int, int]] = field(default_factory=list)

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]

    def to_json(self) -> dict:
        x0, y0, x1, y1 = self.box
        out = {"class": self.class_name, "x0": x0, "y0": y0, "x1": x1, "y1": y1}
        if self.items:
            out["items"] = [{"x0": a, "y0": b, "x1": c, "y1": d} for a, b, c, d in self.items]
        return out


@dataclass
class PageSample:
    image: np.ndarray
    layers: dict[str, np.ndarray]
    boxes: list[Annotation]
    domain: str
    page_id: str = ""
    regions: np.ndarray | None = None  # intended per-pixel class over {background, text, raster}


# -- parameter sampling ----------------------------------------------------------------


def _randint(rng: np.random.Generator, bounds: tuple[int, int]) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


def sample_params(config: DomainConfig, rng: np.random.Generator, max_tries: int = 100) -> tuple[LayoutParams, StyleParams]:
    """Draw layout and style parameters; infeasible draws are redrawn up to ``max_tries`` times."""
    cols = sorted(config.columns)
    probs = np.array([config.columns[c] for c in cols], dtype=np.float64)
    probs /= probs.sum()
    for _ in range(max_tries):
        layout = LayoutParams(
            margin=_randint(rng, config.margin),
            columns=int(rng.choice(cols, p=probs)),
            column_gap=_randint(rng, config.column_gap),
            header=bool(rng.random() < config.header_prob),
            footer=bool(rng.random() < config.footer_prob),
            block_gap=_randint(rng, config.block_gap),
            block_weights=dict(config.block_weights),
        )
        glyph = _randint(rng, config.glyph_height)
        style = StyleParams(
            base_glyph_height=glyph,
            heading_scale=float(rng.uniform(*config.heading_scale)),
            line_spacing=_randint(rng, config.line_spacing),
            word_gap=_randint(rng, config.word_gap),
            char_gap=_randint(rng, config.char_gap),
            bullet_radius=min(_randint(rng, config.bullet_radius), glyph // 2),
            table_rule_width=_randint(rng, config.table_rule_width),
            ink_level=_randint(rng, config.ink_level),
            figure_ink=config.figure_ink,
        )
        if layout.column_width >= config.min_column_width and style.heading_glyph_height > glyph:
            return layout, style
    raise ValueError(f"domain {config.name!r}: no feasible layout after {max_tries} draws")


# -- drawing --------------------------------------------------------------------------


class _Canvas:
    def __init__(self, size: int):
        self.layers = {name: np.full((size, size), WHITE, dtype=np.uint8) for name in LAYER_NAMES}
        self.regions = np.zeros((size, size), dtype=np.uint8)

    def rect(self, layer: str, x0: int, y0: int, x1: int, y1: int, value: int) -> None:
        arr = self.layers[layer]
        arr[y0:y1, x0:x1] = np.minimum(arr[y0:y1, x0:x1], value)

    def region(self, x0: int, y0: int, x1: int, y1: int, cls: int) -> None:
        self.regions[y0:y1, x0:x1] = cls


def _text_line(canvas: _Canvas, rng, style: StyleParams, x0: int, y0: int, x_end: int, height: int, fill_to_end: bool):
    """Character blobs from ``x0`` up to ``x_end``; returns the inked extent (x0, x1)."""
    x = x0
    last_end = x0
    min_char = max(2, int(0.45 * height))
    max_char = max(min_char + 1, int(0.75 * height))
    while True:
        n_chars = int(rng.integers(2, 9))
        widths = rng.integers(min_char, max_char + 1, size=n_chars)
        word_w = int(widths.sum() + style.char_gap * (n_chars - 1))
        if x + word_w > x_end:
            room = x_end - x
            if x == x0 and not fill_to_end:
                # never leave a line empty: keep the leading characters that fit
                ends = np.cumsum(widths + style.char_gap) - style.char_gap
                keep = max(1, int((ends <= room).sum()))
                widths = widths[:keep].copy()
                widths[-1] = max(1, min(int(widths[-1]), room - int(ends[keep - 1] - widths[keep - 1])))
            elif fill_to_end and room >= min_char:
                # a final short word ends exactly at x_end
                n_chars = max(1, (room + style.char_gap) // (min_char + style.char_gap))
                widths = np.full(n_chars, (room - style.char_gap * (n_chars - 1)) // n_chars)
                widths[-1] += room - int(widths.sum() + style.char_gap * (n_chars - 1))
            elif fill_to_end and last_end > x0:
                canvas.rect("text", last_end, y0, x_end, y0 + height, style.ink_level)
                return x0, x_end
            else:
                break
        for wch in widths:
            top = y0 + int(rng.integers(0, max(1, height // 4)))
            canvas.rect("text", x, top, x + int(wch), y0 + height, style.ink_level)
            x += int(wch) + style.char_gap
        last_end = x - style.char_gap
        x = last_end + style.word_gap
        if x >= x_end:
            break
    return x0, last_end


def _paragraph(canvas, rng, style, x0, y0, width, n_lines, height=None, last_frac=None):
    """Justified paragraph; returns (box, line rects)."""
    g = height or style.base_glyph_height
    lines = []
    y = y0
    for i in range(n_lines):
        last = i == n_lines - 1
        if last and n_lines > 1:
            frac = last_frac if last_frac is not None else float(rng.uniform(0.3, 0.9))
            end = x0 + max(g, int(width * frac))
            a, b = _text_line(canvas, rng, style, x0, y, end, g, fill_to_end=False)
        else:
            a, b = _text_line(canvas, rng, style, x0, y, x0 + width, g, fill_to_end=True)
        lines.append((a, y, b, y + g))
        y += g + style.line_spacing
    for a, b, c, d in lines:
        canvas.region(a, b, c, d, REGION_TEXT)
    box = (min(l[0] for l in lines), y0, max(l[2] for l in lines), lines[-1][3])
    return box, lines


def _bullet(canvas, style, cx: int, cy: int, r: int) -> tuple[int, int, int, int]:
    """Square bullet dot of side 2r+1 centred on (cx, cy)."""
    box = (cx - r, cy - r, cx + r + 1, cy + r + 1)
    canvas.rect("text", *box, style.ink_level)
    canvas.region(*box, REGION_TEXT)
    return box


def list_block_height(style: StyleParams, lines_per_item: list[int]) -> int:
    g, s = style.base_glyph_height, style.line_spacing
    total = sum(n * g + (n - 1) * s for n in lines_per_item)
    return total + (len(lines_per_item) - 1) * item_gap(style)


def item_gap(style: StyleParams) -> int:
    return style.line_spacing + 2


def list_bullet_radius(style: StyleParams) -> int:
    """Bullet radius for lists: large enough that stacked one-line items leave at most 8 px
    between bullets, a gap the mask closing fills without creating a background interior."""
    g = style.base_glyph_height
    need = int(np.ceil((g + item_gap(style) - 9) / 2))
    return min(max(style.bullet_radius, need), g // 2)


def _list(canvas, rng, style, x0, y0, width, lines_per_item):
    g = style.base_glyph_height
    r = list_bullet_radius(style)
    indent = int(np.ceil(0.12 * width)) + 2 * r + 4
    items = []
    y = y0
    for n in lines_per_item:
        bb = _bullet(canvas, style, x0 + r, y + g // 2, r)
        _, lines = _paragraph(canvas, rng, style, x0 + indent, y, width - indent, n)
        items.append(
            (bb[0], min(bb[1], y), max(l[2] for l in lines), max(bb[3], lines[-1][3]))
        )
        y = lines[-1][3] + item_gap(style)
    box = (min(i[0] for i in items), items[0][1], max(i[2] for i in items), items[-1][3])
    return box, items


def _table(canvas, rng, style, x0, y0, width, n_rows, n_cols):
    g = style.base_glyph_height
    pad = 7
    rw = style.table_rule_width
    cell_h = g + 2 * pad
    cell_w = (width - rw) // n_cols
    width = cell_w * n_cols + rw
    height = cell_h * n_rows + rw
    for r in range(n_rows + 1):
        canvas.rect("vector", x0, y0 + r * cell_h, x0 + width, y0 + r * cell_h + rw, style.ink_level)
    for c in range(n_cols + 1):
        canvas.rect("vector", x0 + c * cell_w, y0, x0 + c * cell_w + rw, y0 + height, style.ink_level)
    for r in range(n_rows):
        for c in range(n_cols):
            inner = cell_w - rw - 2 * pad
            if inner < g:
                continue
            tx = x0 + c * cell_w + rw + pad
            ty = y0 + r * cell_h + rw + pad - rw // 2
            end = tx + max(g, int(inner * rng.uniform(0.3, 1.0)))
            a, b = _text_line(canvas, rng, style, tx, ty, end, g, fill_to_end=False)
            if b > a:
                canvas.region(a, ty, b, ty + g, REGION_TEXT)
    return (x0, y0, x0 + width, y0 + height)


def _figure(canvas, rng, style, x0, y0, width, height):
    lo, hi = style.figure_ink
    cells = (max(2, height // 12), max(2, width // 12))
    coarse = rng.uniform(lo, hi, size=cells)
    tex = np.kron(coarse, np.ones((12, 12)))[:height, :width]
    tex = np.pad(tex, ((0, max(0, height - tex.shape[0])), (0, max(0, width - tex.shape[1]))), mode="edge")
    tex += rng.normal(0.0, 8.0, size=tex.shape)
    tex = np.clip(tex, lo, hi).astype(np.uint8)
    # a few white specks: holes the closing step is meant to fill
    for _ in range(int(rng.integers(0, 6))):
        sy = int(rng.integers(2, max(3, height - 6)))
        sx = int(rng.integers(2, max(3, width - 6)))
        s = int(rng.integers(2, 5))
        tex[sy : sy + s, sx : sx + s] = WHITE
    arr = canvas.layers["raster"]
    arr[y0 : y0 + height, x0 : x0 + width] = np.minimum(arr[y0 : y0 + height, x0 : x0 + width], tex)
    canvas.region(x0, y0, x0 + width, y0 + height, REGION_RASTER)
    return (x0, y0, x0 + width, y0 + height)


def _block_height(kind: str, style: StyleParams, spec: dict) -> int:
    g, s = style.base_glyph_height, style.line_spacing
    if kind == "text":
        return spec["n_lines"] * g + (spec["n_lines"] - 1) * s
    if kind == "heading":
        return style.heading_glyph_height
    if kind == "list":
        return list_block_height(style, spec["lines_per_item"])
    if kind == "table":
        return (g + 14) * spec["n_rows"] + style.table_rule_width
    return spec["height"]


def _draw_block_spec(kind: str, rng, style: StyleParams, width: int) -> dict:
    if kind == "text":
        return {"n_lines": int(rng.integers(2, 9))}
    if kind == "heading":
        return {"frac": float(rng.uniform(0.3, 0.8))}
    if kind == "list":
        return {"lines_per_item": [int(rng.integers(1, 3)) for _ in range(int(rng.integers(2, 7)))]}
    if kind == "table":
        return {"n_rows": int(rng.integers(2, 6)), "n_cols": int(rng.integers(2, 5))}
    return {"height": int(rng.integers(60, 181)), "frac": float(rng.uniform(0.6, 1.0))}


def compose_page(
    layout: LayoutParams,
    style: StyleParams,
    rng: np.random.Generator,
    domain: str = "",
    page_id: str = "",
) -> PageSample:
    """Fill the columns top to bottom with randomly chosen blocks; blocks that do not fit are skipped."""
    size = layout.page_size
    canvas = _Canvas(size)
    boxes: list[Annotation] = []
    m = layout.margin
    top, bottom = m, size - m
    g = style.base_glyph_height
    small = max(7, g - 2)
    if layout.header:
        hw = int((size - 2 * m) * rng.uniform(0.2, 0.5))
        box, _ = _paragraph(canvas, rng, style, m, m, hw, 1, height=small)
        canvas.rect("vector", m, m + small + 4, size - m, m + small + 4 + style.table_rule_width, style.ink_level)
        boxes.append(Annotation(0, box))
        top = m + small + 4 + style.table_rule_width + layout.block_gap
    if layout.footer:
        fw = int((size - 2 * m) * rng.uniform(0.05, 0.2))
        fy = size - m - small
        box, _ = _paragraph(canvas, rng, style, (size - fw) // 2, fy, max(fw, small), 1, height=small)
        boxes.append(Annotation(0, box))
        bottom = fy - layout.block_gap
    kinds = [k for k in BLOCK_TYPES if layout.block_weights.get(k, 0) > 0]
    weights = np.array([layout.block_weights[k] for k in kinds], dtype=np.float64)
    weights /= weights.sum()
    col_w = layout.column_width
    n_blocks = 0
    for col in range(layout.columns):
        x0 = m + col * (col_w + layout.column_gap)
        y = top
        misses = 0
        while misses < 3 and n_blocks < layout.max_blocks:
            kind = kinds[int(rng.choice(len(kinds), p=weights))]
            spec = _draw_block_spec(kind, rng, style, col_w)
            h = _block_height(kind, style, spec)
            if y + h > bottom:
                misses += 1
                continue
            boxes.append(_draw_block(canvas, rng, style, kind, spec, x0, y, col_w))
            n_blocks += 1
            y += h + layout.block_gap
    image = np.minimum.reduce([canvas.layers[n] for n in LAYER_NAMES])
    return PageSample(image, canvas.layers, boxes, domain, page_id, canvas.regions)


def _draw_block(canvas, rng, style, kind, spec, x0, y, col_w) -> Annotation:
    if kind == "text":
        box, _ = _paragraph(canvas, rng, style, x0, y, col_w, spec["n_lines"])
        return Annotation(0, box)
    if kind == "heading":
        gh = style.heading_glyph_height
        width = max(gh, int(col_w * spec["frac"]))
        box, _ = _paragraph(canvas, rng, style, x0, y, width, 1, height=gh)
        return Annotation(2, box)
    if kind == "list":
        box, items = _list(canvas, rng, style, x0, y, col_w, spec["lines_per_item"])
        return Annotation(1, box, items)
    if kind == "table":
        return Annotation(3, _table(canvas, rng, style, x0, y, col_w, spec["n_rows"], spec["n_cols"]))
    width = max(24, int(col_w * spec["frac"]))
    return Annotation(4, _figure(canvas, rng, style, x0, y, width, spec["height"]))


def generate_page(config: DomainConfig, rng: np.random.Generator, page_id: str = "") -> PageSample:
    layout, style = sample_params(config, rng)
    return compose_page(layout, style, rng, config.name, page_id)


def ink_fraction(image: np.ndarray) -> float:
    """Mean darkness of a page, 0 for blank white, 1 for solid black."""
    return float(1.0 - image.astype(np.float64).mean() / WHITE)


def detection_targets(page: PageSample) -> tuple[np.ndarray, np.ndarray]:
    """Boxes and class ids for training; list blocks contribute one 'list' box per item."""
    boxes, classes = [], []
    for ann in page.boxes:
        if ann.class_id == 1 and ann.items:
            for it in ann.items:
                boxes.append(it)
                classes.append(1)
        else:
            boxes.append(ann.box)
            classes.append(ann.class_id)
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(classes, dtype=np.int64)


# -- datasets on disk -------------------------------------------------------------------


def page_seeds(seed: int, n_pages: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n_pages)


def _save_png(arr: np.ndarray, path: Path) -> None:
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def generate_dataset(
    config: DomainConfig,
    n_pages: int,
    seed: int,
    out_dir,
    test_fraction: float = 0.25,
) -> dict:
    """Write ``n_pages`` pages, their layers and ``manifest.json`` under ``out_dir``; return the manifest.

    Each page gets its own seed spawned from ``seed``, so page k is the same no
    matter how many pages are requested. The last ``round(n * test_fraction)``
    pages form the test split.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    n_test = int(round(n_pages * test_fraction))
    pages = []
    for k, ss in enumerate(page_seeds(seed, n_pages)):
        page_id = f"{config.name}{k:05d}"
        page = generate_page(config, np.random.default_rng(ss), page_id)
        entry = {
            "id": page_id,
            "image_path": f"{page_id}.png",
            "layer_paths": {name: f"{page_id}.{name}.png" for name in LAYER_NAMES},
            "domain": config.name,
            "boxes": [a.to_json() for a in page.boxes],
            "split": "test" if k >= n_pages - n_test else "train",
        }
        try:
            _save_png(page.image, out / entry["image_path"])
            for name in LAYER_NAMES:
                _save_png(page.layers[name], out / entry["layer_paths"][name])
        except OSError as exc:
            raise OSError(f"page {k} ({page_id}): {exc}") from exc
        pages.append(entry)
    manifest = {"domain": config.name, "seed": seed, "config": config.to_json(), "pages": pages}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    manifest = json.loads(path.read_text())
    manifest["root"] = str(path.parent)
    return manifest


def load_page(manifest: dict, entry: dict) -> PageSample:
    root = Path(manifest["root"])
    image = np.asarray(Image.open(root / entry["image_path"]), dtype=np.uint8)
    layers = {n: np.asarray(Image.open(root / p), dtype=np.uint8) for n, p in entry["layer_paths"].items()}
    boxes = []
    for b in entry["boxes"]:
        items = [(i["x0"], i["y0"], i["x1"], i["y1"]) for i in b.get("items", [])]
        boxes.append(Annotation(CLASS_NAMES.index(b["class"]), (b["x0"], b["y0"], b["x1"], b["y1"]), items))
    return PageSample(image, layers, boxes, entry["domain"], entry["id"])
