"""Training loop, evaluation driver, ablation and checkpoint plumbing."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .alignment import DomainAdaptiveModel, DomainBatch, LossWeights, PageInput, combined_loss
from .backbone import STAGE_STRIDES
from .compute import SGD, Tensor, load_checkpoint, save_checkpoint
from .detector import CLASS_NAMES, Detection, Detector
from .docgen import PageSample, detection_targets, load_manifest, load_page
from .evaluation import EvalReport, mean_ap, write_overlay
from .maskpipe import RenderMask, build_mask, downsample_mask

ABLATION_ROWS = (
    ("FPN (source-only)", (False, False, False)),
    ("FPN + FPA", (True, False, False)),
    ("FPN + FPA + RA", (True, True, False)),
    ("FPN + FPA + RA + RLA", (True, True, True)),
)


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    source_manifest: str = ""
    target_manifest: str = ""
    epochs: int = 12
    lr: float = 0.001
    decay_epochs: tuple[int, ...] = (8,)
    momentum: float = 0.0
    clip_norm: float = 0.0  # 0 = no clipping
    head_lr_scale: float = 1.0  # learning-rate multiplier for the alignment heads
    lambda_fpa: float = 0.1
    lambda_ra: float = 0.1
    lambda_rla: float = 0.01
    gamma: float = 5.0
    seed: int = 0
    enable_fpa: bool = True
    enable_ra: bool = True
    enable_rla: bool = True
    input_scale: int = 2
    max_pages: int = 0  # 0 = the whole train split

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        self.validate()

    def validate(self) -> None:
        if min(self.lambda_fpa, self.lambda_ra, self.lambda_rla) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be non-negative")
        if self.head_lr_scale <= 0:
            raise ValueError("head_lr_scale must be positive")
        if self.input_scale < 1:
            raise ValueError("input_scale must be a positive integer")

    @property
    def adapted(self) -> bool:
        return self.enable_fpa or self.enable_ra or self.enable_rla

    def weights(self) -> LossWeights:
        return LossWeights(
            self.lambda_fpa, self.lambda_ra, self.lambda_rla, self.gamma,
            self.enable_fpa, self.enable_ra, self.enable_rla,
        )

    def to_json(self) -> dict:
        out = asdict(self)
        out["decay_epochs"] = list(self.decay_epochs)
        return out

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, raw in values.items():
            default = getattr(cls, key, None) if key != "decay_epochs" else (8,)
            kwargs[key] = _coerce(raw, default)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_mapping(read_kv(path))


def read_kv(path) -> dict[str, str]:
    """Flat ``key = value`` file; blank lines and ``#`` comments ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(raw, default):
    if not isinstance(raw, str):
        return raw
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace("[", "").replace("]", "").split(",") if v.strip())
    return raw


# -- data ---------------------------------------------------------------------------


def downscale(image: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return image.astype(np.float64)
    h, w = image.shape
    return image.reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))


def prepare_page(page: PageSample, scale: int = 2, with_mask: bool = True, full_mask: RenderMask | None = None) -> PageInput:
    """Network input for a page: darkness in [0, 1] at 1/scale resolution, labels and a C4-sized mask.

    ``full_mask`` is a page-resolution mask built earlier (e.g. by ``maskgen``);
    without it the mask is built from the page's layers.
    """
    x = 1.0 - downscale(page.image, scale) / 255.0
    boxes, classes = detection_targets(page)
    mask = None
    if with_mask:
        full = full_mask if full_mask is not None else build_mask(page.layers, page_id=page.page_id)
        mask = downsample_mask(full, scale * STAGE_STRIDES[-1]).classes
    return PageInput(Tensor(x[None, None]), boxes / scale, classes, mask, page.page_id)


def load_split(manifest_path, split: str = "train", limit: int = 0) -> list[PageSample]:
    manifest = load_manifest(manifest_path)
    entries = [e for e in manifest["pages"] if e["split"] == split]
    if limit:
        entries = entries[:limit]
    return [load_page(manifest, e) for e in entries]


# -- training -----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: DomainAdaptiveModel
    log: list[dict] = field(default_factory=list)
    seconds: float = 0.0


def epoch_pairs(
    source_rng: np.random.Generator, target_rng: np.random.Generator, n_source: int, n_target: int
) -> list[tuple[int, int | None]]:
    """One epoch: the smaller split's size, each side shuffled by its own generator.

    Separate streams keep the source order independent of whether target pages
    are drawn at all, so switching alignment on does not reshuffle the source.
    """
    n = min(n_source, n_target) if n_target else n_source
    src = source_rng.permutation(n_source)[:n]
    tgt = target_rng.permutation(n_target)[:n] if n_target else [None] * n
    return [(int(s), None if t is None else int(t)) for s, t in zip(src, tgt)]


def train(
    cfg: TrainConfig,
    source: Sequence[PageInput],
    target: Sequence[PageInput] = (),
    log_path=None,
    checkpoint_dir=None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """SGD over paired (source, target) pages; one JSON record per step."""
    if not source:
        raise ValueError("no source training pages")
    if cfg.adapted and not target:
        raise ValueError("alignment losses are enabled but there are no target pages")
    model = DomainAdaptiveModel(cfg.seed)
    params = model.params if cfg.adapted else model.detector.params
    scale = {n: cfg.head_lr_scale for n in model.heads.params} if cfg.adapted and cfg.head_lr_scale != 1.0 else None
    opt = SGD(params, cfg.lr, cfg.decay_epochs, momentum=cfg.momentum, clip_norm=cfg.clip_norm or None, lr_scale=scale)
    weights = cfg.weights()
    source_rng = np.random.default_rng(cfg.seed + 1)
    target_rng = np.random.default_rng(cfg.seed + 3)
    drop_rng = np.random.default_rng(cfg.seed + 2)
    if checkpoint_dir:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
    log_file = open(log_path, "w") if log_path else None
    records: list[dict] = []
    start = time.perf_counter()
    step = 0
    try:
        for epoch in range(cfg.epochs):
            lr = opt.set_epoch(epoch)
            for s, t in epoch_pairs(source_rng, target_rng, len(source), len(target)):
                batch = DomainBatch(source[s], target[t] if (t is not None and cfg.adapted) else None)
                try:
                    total, report, _ = combined_loss(model, batch, weights, drop_rng)
                    total.backward()
                    opt.step()
                except FloatingPointError as exc:
                    raise TrainingAborted(f"step {step}: {exc}") from exc
                rec = {"step": step, "epoch": epoch, "lr": lr, "source": source[s].page_id,
                       "target": batch.target.page_id if batch.target else None, **report.to_json()}
                records.append(rec)
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                if on_step:
                    on_step(rec)
                step += 1
            if checkpoint_dir:
                save_model(Path(checkpoint_dir) / f"epoch{epoch + 1:02d}.ckpt", model.detector, cfg, epoch + 1)
    finally:
        if log_file:
            log_file.close()
    return TrainResult(model, records, time.perf_counter() - start)


# -- checkpoints --------------------------------------------------------------------


def save_model(path, detector: Detector, cfg: TrainConfig | None = None, epoch: int = 0) -> None:
    meta = {"class_names": list(CLASS_NAMES), "num_classes": len(CLASS_NAMES), "epoch": epoch}
    if cfg is not None:
        meta["config"] = cfg.to_json()
    save_checkpoint(path, detector.params, meta)


def load_model(path, class_names: Sequence[str] = CLASS_NAMES) -> tuple[Detector, dict]:
    arrays, meta = load_checkpoint(path)
    if meta.get("num_classes") != len(class_names) or list(meta.get("class_names", [])) != list(class_names):
        raise ValueError(
            f"checkpoint classes {meta.get('class_names')} do not match configured classes {list(class_names)}"
        )
    det = Detector(0)
    params = det.params
    if set(arrays) != set(params):
        missing, extra = sorted(set(params) - set(arrays)), sorted(set(arrays) - set(params))
        raise ValueError(f"checkpoint parameters differ from the model: missing {missing}, unexpected {extra}")
    for name, value in arrays.items():
        if value.shape != params[name].data.shape:
            raise ValueError(f"shape mismatch for {name}: {value.shape} vs {params[name].data.shape}")
        params[name].data[...] = value
    return det, meta


# -- evaluation ---------------------------------------------------------------------


def predict(detector: Detector, pages: Sequence[PageSample], scale: int = 2) -> dict[str, list[Detection]]:
    out = {}
    for page in pages:
        x = 1.0 - downscale(page.image, scale) / 255.0
        out[page.page_id] = detector.infer(Tensor(x[None, None]), scale=float(scale))
    return out


def ground_truth(pages: Sequence[PageSample]) -> dict[str, list[tuple[int, tuple]]]:
    gt = {}
    for page in pages:
        boxes, classes = detection_targets(page)
        gt[page.page_id] = [(int(c), tuple(b)) for b, c in zip(boxes.tolist(), classes)]
    return gt


def evaluate(detector: Detector, pages: Sequence[PageSample], scale: int = 2, overlay_dir=None) -> EvalReport:
    dets = predict(detector, pages, scale)
    gt = ground_truth(pages)
    report = mean_ap(dets, gt)
    if overlay_dir:
        Path(overlay_dir).mkdir(parents=True, exist_ok=True)
        for page in pages:
            write_overlay(Path(overlay_dir) / f"{page.page_id}.overlay.png", page.image, gt[page.page_id], dets[page.page_id])
    return report


# -- experiments --------------------------------------------------------------------


@dataclass
class AblationRow:
    label: str
    maps: list[float]

    @property
    def median(self) -> float:
        return float(np.median(self.maps))


def ablate(
    base: TrainConfig,
    source: Sequence[PageInput],
    target: Sequence[PageInput],
    target_test: Sequence[PageSample],
    seeds: Sequence[int] = (0, 1, 2),
    rows=ABLATION_ROWS,
    progress: Callable[[str], None] | None = None,
) -> list[AblationRow]:
    """Target-test mAP for each module combination, same seeds for every row."""
    out = []
    for label, (fpa, ra, rla) in rows:
        maps = []
        for seed in seeds:
            cfg = TrainConfig(**{**base.to_json(), "seed": seed, "enable_fpa": fpa, "enable_ra": ra, "enable_rla": rla})
            res = train(cfg, source, target if cfg.adapted else ())
            m = evaluate(res.model.detector, target_test, cfg.input_scale).map
            maps.append(m)
            if progress:
                progress(f"{label} seed={seed} mAP={100 * m:.2f} ({res.seconds:.0f}s)")
        out.append(AblationRow(label, maps))
    return out


def format_table(rows: Sequence[AblationRow]) -> str:
    width = max(len(r.label) for r in rows)
    lines = [f"{'Method':<{width}}  median mAP  per-seed"]
    for r in rows:
        seeds = ", ".join(f"{100 * m:.1f}" for m in r.maps)
        lines.append(f"{r.label:<{width}}  {100 * r.median:10.2f}  [{seeds}]")
    return "\n".join(lines)
