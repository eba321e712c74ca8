"""Domain-alignment losses: pyramid (FPA), region (RA), rendering-layer (RLA) and the combined objective.

Convention: the source domain is labelled 1 and the target domain 0, which
fixes where log(D) and log(1 - D) appear in the pyramid and region losses.
FPA and RA pass features through a gradient-reversal node; RLA is a plain
supervised segmentation loss on both domains.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .backbone import PYRAMID_CHANNELS, STAGE_CHANNELS, FeaturePyramid, ParamGroup
from .compute import (
    PROB_EPS,
    Tensor,
    bce_loss,
    ce_loss,
    clamp,
    conv2d,
    dropout,
    grad_reverse,
    linear,
    log,
    no_grad,
    power,
    relu,
    sigmoid,
    softmax,
)
from .detector import POOL_SIZE, Detector, ProposalSet, pool_proposals

RLA_CLASSES = 3


@dataclass
class LossWeights:
    lambda_fpa: float = 0.1
    lambda_ra: float = 0.1
    lambda_rla: float = 0.01
    gamma: float = 5.0
    enable_fpa: bool = True
    enable_ra: bool = True
    enable_rla: bool = True
    ra_dropout: float = 0.5


@dataclass
class LossReport:
    l_det: float
    l_p: float
    l_r: float
    l_s: float
    total: float
    lambdas: tuple[float, float, float]
    gamma: float
    parts: dict[str, float] = field(default_factory=dict)

    def recomposed(self) -> float:
        l1, l2, l3 = self.lambdas
        return self.l_det + l1 * self.l_p + l2 * self.l_r + l3 * self.l_s

    def to_json(self) -> dict:
        out = asdict(self)
        out["lambdas"] = list(self.lambdas)
        return out


class AlignHeads(ParamGroup):
    """Four pixel domain classifiers, one proposal domain classifier and the segmentation head."""

    def __init__(self, rng: np.random.Generator, d: int = PYRAMID_CHANNELS, fpa_width: int = 32, rla_width: int = 64):
        super().__init__()
        self.d = d
        for i in range(1, 5):
            self.add_conv(rng, f"fpa{i}.conv0", fpa_width, d, 1)
            self.add_conv(rng, f"fpa{i}.conv1", fpa_width, fpa_width, 1)
            self.add_conv(rng, f"fpa{i}.conv2", 1, fpa_width, 1)
        self.add_linear(rng, "ra.fc1", 128, d * POOL_SIZE * POOL_SIZE)
        self.add_linear(rng, "ra.fc2", 64, 128)
        self.add_linear(rng, "ra.fc3", 1, 64)
        c4 = STAGE_CHANNELS[-1]
        self.add_conv(rng, "rla.conv0", rla_width, c4, 3)
        self.add_conv(rng, "rla.conv1", rla_width, rla_width, 3)
        self.add_conv(rng, "rla.conv2", RLA_CLASSES, rla_width, 1)

    def pixel_domain(self, level: int, p: Tensor, reverse: bool = True) -> Tensor:
        """D_i: per-pixel source probability for pyramid level ``level`` (1..4)."""
        if p.shape[1] != self.d:
            raise ValueError(f"pyramid level has {p.shape[1]} channels, classifier expects {self.d}")
        x = grad_reverse(p) if reverse else p
        x = relu(self.conv(f"fpa{level}.conv0", x))
        x = relu(self.conv(f"fpa{level}.conv1", x))
        return sigmoid(self.conv(f"fpa{level}.conv2", x))

    def region_domain(
        self, pooled: Tensor, rng: np.random.Generator | None, training: bool = True, rate: float = 0.5, reverse: bool = True
    ) -> Tensor:
        """D_r: source probability per pooled proposal, shape (R,)."""
        x = grad_reverse(pooled) if reverse else pooled
        x = x.reshape(x.shape[0], -1)
        x = dropout(relu(linear(x, self.params["ra.fc1.w"], self.params["ra.fc1.b"])), rate, training, rng)
        x = dropout(relu(linear(x, self.params["ra.fc2.w"], self.params["ra.fc2.b"])), rate, training, rng)
        return sigmoid(linear(x, self.params["ra.fc3.w"], self.params["ra.fc3.b"])).reshape(-1)

    def segment(self, c4: Tensor) -> Tensor:
        """Per-pixel class probabilities (N x 3 x h x w) over background / text / raster."""
        x = relu(self.conv("rla.conv0", c4, padding=1))
        x = relu(self.conv("rla.conv1", x, padding=1))
        return softmax(self.conv("rla.conv2", x), axis=1)


# -- losses on classifier outputs --------------------------------------------------------


def fpa_loss_from_probs(source_probs: list[Tensor], target_probs: list[Tensor]) -> Tensor:
    """Pixel-averaged -log D on source maps and -log(1 - D) on target maps, averaged over levels."""
    n = len(source_probs)
    src = sum((bce_loss(p, 1.0) for p in source_probs), Tensor(0.0))
    tgt = sum((bce_loss(p, 0.0) for p in target_probs), Tensor(0.0))
    return src * (1.0 / n) + tgt * (1.0 / len(target_probs))


def focal_domain_loss(source_probs: Tensor, target_probs: Tensor, gamma: float) -> Tensor:
    """-(1/R) sum (1 - D)^g log D over source proposals - (1/R) sum D^g log(1 - D) over target ones."""
    total = Tensor(0.0)
    if source_probs.size:
        ps = clamp(source_probs, PROB_EPS, 1.0 - PROB_EPS)
        total = total - (power(1.0 - ps, gamma) * log(ps)).mean()
    if target_probs.size:
        pt = clamp(target_probs, PROB_EPS, 1.0 - PROB_EPS)
        total = total - (power(pt, gamma) * log(1.0 - pt)).mean()
    return total


def pixel_ce(probs: Tensor, mask: np.ndarray) -> Tensor:
    """Mean per-pixel cross-entropy of an N x C x h x w probability map against an h x w class map."""
    mask = np.asarray(mask)
    if probs.shape[2:] != mask.shape[-2:]:
        raise ValueError(f"mask {mask.shape} does not match prediction {probs.shape[2:]}")
    c = probs.shape[1]
    flat = probs.transpose(0, 2, 3, 1).reshape(-1, c)
    return ce_loss(flat, mask.reshape(-1))


def segmentation_loss(source_probs: Tensor, source_mask, target_probs: Tensor, target_mask) -> Tensor:
    """Average of the two domains' mean pixel cross-entropies."""
    return (pixel_ce(source_probs, source_mask) + pixel_ce(target_probs, target_mask)) * 0.5


# -- losses on features ---------------------------------------------------------------


def fpa_loss(source: FeaturePyramid, target: FeaturePyramid, heads: AlignHeads, reverse: bool = True) -> Tensor:
    src = [heads.pixel_domain(i, p, reverse) for i, p in enumerate(source.p_maps, start=1)]
    tgt = [heads.pixel_domain(i, p, reverse) for i, p in enumerate(target.p_maps, start=1)]
    return fpa_loss_from_probs(src, tgt)


class RAStats:
    empty_batches = 0


def ra_loss(
    source_pooled: Tensor | None,
    target_pooled: Tensor | None,
    heads: AlignHeads,
    gamma: float = 5.0,
    rng: np.random.Generator | None = None,
    training: bool = True,
    rate: float = 0.5,
    reverse: bool = True,
) -> Tensor:
    """Focal domain loss on pooled proposal features; an empty side contributes 0."""
    empty = np.zeros(0)
    ds = heads.region_domain(source_pooled, rng, training, rate, reverse) if _nonempty(source_pooled) else Tensor(empty)
    dt = heads.region_domain(target_pooled, rng, training, rate, reverse) if _nonempty(target_pooled) else Tensor(empty)
    if ds.size == 0 and dt.size == 0:
        RAStats.empty_batches += 1
    return focal_domain_loss(ds, dt, gamma)


def _nonempty(t: Tensor | None) -> bool:
    return t is not None and t.shape[0] > 0


def rla_loss(c4_source: Tensor, mask_source, c4_target: Tensor, mask_target, heads: AlignHeads) -> Tensor:
    return segmentation_loss(heads.segment(c4_source), mask_source, heads.segment(c4_target), mask_target)


# -- combined objective -------------------------------------------------------------


@dataclass
class PageInput:
    """One page prepared for the network: image at input scale, labels in input pixels, C4-sized mask."""

    image: Tensor
    gt_boxes: np.ndarray
    gt_classes: np.ndarray
    mask: np.ndarray | None = None
    page_id: str = ""


@dataclass
class DomainBatch:
    source: PageInput
    target: PageInput | None = None


class DomainAdaptiveModel:
    """Detector plus the alignment heads used only during training."""

    def __init__(self, seed: int = 0, detector: Detector | None = None):
        self.detector = detector or Detector(seed)
        self.heads = AlignHeads(np.random.default_rng(seed + 7919))

    @property
    def params(self) -> dict[str, Tensor]:
        out = dict(self.detector.params)
        out.update(self.heads.params)
        return out


def combined_loss(
    model: DomainAdaptiveModel,
    batch: DomainBatch,
    weights: LossWeights,
    rng: np.random.Generator | None = None,
    frozen: dict[str, ProposalSet] | None = None,
    reverse: bool = True,
) -> tuple[Tensor, LossReport, dict[str, ProposalSet]]:
    """L = L_det + l1 L_p + l2 L_r + l3 L_s for one (source, target) pair.

    Returns the differentiable total, a float report, and the proposals used
    (pass them back as ``frozen`` to evaluate the same graph again).
    """
    det = model.detector
    frozen = dict(frozen or {})
    src = batch.source
    hier_s, pyr_s = det.features(src.image)
    rpn_s = det.rpn.forward(pyr_s)
    if "source" not in frozen:
        frozen["source"] = det.proposals(rpn_s, src.image.shape[2:])
    props_s = frozen["source"]
    det_loss = det.detection_loss(pyr_s, rpn_s, props_s, src.gt_boxes, src.gt_classes)
    l_det = det_loss.total

    need_target = weights.enable_fpa or weights.enable_ra or weights.enable_rla
    if need_target and batch.target is None:
        raise ValueError("alignment losses need a target page")
    zero = Tensor(0.0)
    l_p = l_r = l_s = zero
    if need_target:
        tgt = batch.target
        hier_t, pyr_t = det.features(tgt.image)
        if weights.enable_fpa:
            l_p = fpa_loss(pyr_s, pyr_t, model.heads, reverse)
        if weights.enable_ra:
            if "target" not in frozen:
                with no_grad():
                    frozen["target"] = det.proposals(det.rpn.forward(pyr_t), tgt.image.shape[2:])
            props_t = frozen["target"]
            n = len(props_s)
            src_pooled = det_loss.pooled[np.arange(n)] if n else None
            tgt_pooled = pool_proposals(props_t.boxes, pyr_t) if len(props_t) else None
            l_r = ra_loss(src_pooled, tgt_pooled, model.heads, weights.gamma, rng, True, weights.ra_dropout, reverse)
        if weights.enable_rla:
            l_s = rla_loss(hier_s.c_maps[3], src.mask, hier_t.c_maps[3], tgt.mask, model.heads)

    values = {"l_det": l_det.item(), "l_p": l_p.item(), "l_r": l_r.item(), "l_s": l_s.item()}
    for name, v in values.items():
        if not np.isfinite(v):
            raise FloatingPointError(f"non-finite loss component {name}={v}")
    total = l_det + l_p * weights.lambda_fpa + l_r * weights.lambda_ra + l_s * weights.lambda_rla
    report = LossReport(
        total=total.item(),
        lambdas=(weights.lambda_fpa, weights.lambda_ra, weights.lambda_rla),
        gamma=weights.gamma,
        parts=dict(det_loss.parts),
        **values,
    )
    return total, report, frozen
