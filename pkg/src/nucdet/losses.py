"""The composite training objective: Hungarian-matched candidate loss,
denoising-positive reconstruction, denoising-negative no-object suppression,
deep supervision over every decoder layer plus the first stage, and
per-dataset weighting.

Classification uses a focal-modulated cross-entropy over t_d + 1 classes
(last = no-object). Geometry uses coordinate-wise L1 in normalized units by
default; the stated alternative reading (true Euclidean distance) is exposed
behind ``l1_mode="euclidean"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import matching
from .errors import ConfigError, NumericalError
from .model import HeadOutput
from .registry import CategoryRegistry

__all__ = ["LossWeights", "LossBreakdown", "focal_term", "l1_term", "hungarian_loss", "cdn_loss", "total_loss"]

PART_NAMES = ("hungarian_cls", "hungarian_l1", "cdn_pos_l1", "cdn_pos_cls", "cdn_neg_cls")


@dataclass(frozen=True)
class LossWeights:
    cls_weight: float = 1.0
    l1_weight: float = 5.0
    match_cls_weight: float = 2.0
    match_l1_weight: float = 5.0
    focal_alpha: float | None = 0.25
    focal_gamma: float = 2.0
    l1_mode: str = "l1"

    def __post_init__(self):
        if self.l1_mode not in ("l1", "euclidean"):
            raise ConfigError(f"l1_mode must be 'l1' or 'euclidean', got {self.l1_mode!r}")
        if self.focal_gamma < 0:
            raise ConfigError(f"focal_gamma must be >= 0, got {self.focal_gamma}")

    def weight_of(self, part: str) -> float:
        return self.l1_weight if part.endswith("_l1") else self.cls_weight


@dataclass
class LossBreakdown:
    """Raw per-term values plus the weighted total used for backprop."""

    total: torch.Tensor
    parts: dict[str, float]
    per_layer: list[dict[str, float]] = field(default_factory=list)

    def scalar_parts(self) -> dict[str, float]:
        return dict(self.parts, total=float(self.total.detach()))


def focal_term(
    logits: torch.Tensor,
    targets: torch.Tensor,
    alpha: float | None = 0.25,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Focal-modulated cross-entropy, averaged per query.

    ``targets`` may include the no-object index t_d. With ``alpha`` set, real
    classes are weighted alpha and no-object 1 - alpha; ``alpha=None`` and
    ``gamma=0`` reduce exactly to plain cross-entropy.
    """
    if logits.ndim != 2:
        raise ValueError(f"logits must be (n, t_d + 1), got {tuple(logits.shape)}")
    n, width = logits.shape
    if n == 0:
        return logits.sum() * 0.0
    if targets.min() < 0 or targets.max() >= width:
        raise ValueError(f"target index out of range for {width} classes")
    logp = torch.log_softmax(logits, dim=-1)
    idx = torch.arange(n, device=logits.device)
    logpt = logp[idx, targets]
    pt = logpt.exp()
    loss = -((1.0 - pt) ** gamma) * logpt
    if alpha is not None:
        no_object = width - 1
        w = torch.where(targets == no_object, 1.0 - alpha, alpha)
        loss = loss * w
    return loss.mean()


def l1_term(pred: torch.Tensor, gt: torch.Tensor, mode: str = "l1") -> torch.Tensor:
    """Mean coordinate error over aligned pairs, in normalized units."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if pred.shape[0] == 0:
        return pred.sum() * 0.0
    diff = pred - gt
    if mode == "euclidean":
        return diff.pow(2).sum(dim=-1).sqrt().mean()
    return diff.abs().sum(dim=-1).mean()


def hungarian_loss(
    head: HeadOutput,
    gt_coords: torch.Tensor,
    gt_classes: torch.Tensor,
    t_d: int,
    weights: LossWeights,
) -> tuple[dict[str, torch.Tensor], matching.Assignment]:
    """Match queries to annotations at minimum cost, then score the matching.

    Matched queries incur the focal term toward their annotation's class plus
    the geometry term; unmatched queries incur the focal term toward
    no-object. With zero annotations everything is no-object.
    """
    n_q = len(head)
    n_c = gt_coords.shape[0]
    if n_q < n_c:
        raise ConfigError(f"{n_q} queries cannot cover {n_c} annotations")
    targets = torch.full((n_q,), t_d, dtype=torch.long, device=head.logits.device)
    if n_c == 0:
        cls = focal_term(head.logits, targets, weights.focal_alpha, weights.focal_gamma)
        return (
            {"hungarian_cls": cls, "hungarian_l1": head.coords.sum() * 0.0},
            matching.Assignment((), tuple(range(n_q)), ()),
        )
    with torch.no_grad():
        probs = torch.softmax(head.logits, dim=-1).cpu().double().numpy()
        cost = matching.loss_cost(
            probs,
            head.coords.detach().cpu().double().numpy(),
            gt_coords.detach().cpu().double().numpy(),
            gt_classes.cpu().numpy(),
            w_cls=weights.match_cls_weight,
            w_l1=weights.match_l1_weight,
            alpha=weights.focal_alpha if weights.focal_alpha is not None else 1.0,
            gamma=weights.focal_gamma,
        )
        assignment = matching.hungarian(cost)
    rows = [i for i, _ in assignment.pairs]
    cols = [j for _, j in assignment.pairs]
    targets[rows] = gt_classes[cols]
    cls = focal_term(head.logits, targets, weights.focal_alpha, weights.focal_gamma)
    l1 = l1_term(head.coords[rows], gt_coords[cols], weights.l1_mode)
    return {"hungarian_cls": cls, "hungarian_l1": l1}, assignment


def cdn_loss(
    pos: HeadOutput,
    neg: HeadOutput,
    provenance: np.ndarray,
    gt_coords: torch.Tensor,
    gt_classes: torch.Tensor,
    t_d: int,
    weights: LossWeights,
) -> dict[str, torch.Tensor]:
    """Score denoising queries without any matching: each positive copy
    reconstructs its own annotation (index-aligned through ``provenance``);
    every negative copy is pushed toward no-object."""
    prov = torch.as_tensor(provenance, dtype=torch.long, device=gt_coords.device)
    if prov.shape[0] != len(pos) or len(pos) != len(neg):
        raise ValueError(
            f"misaligned denoising outputs: {len(pos)} positives, {len(neg)} negatives, "
            f"{prov.shape[0]} provenance entries"
        )
    pos_l1 = l1_term(pos.coords, gt_coords[prov], weights.l1_mode)
    pos_cls = focal_term(pos.logits, gt_classes[prov], weights.focal_alpha, weights.focal_gamma)
    neg_targets = torch.full((len(neg),), t_d, dtype=torch.long, device=neg.logits.device)
    neg_cls = focal_term(neg.logits, neg_targets, weights.focal_alpha, weights.focal_gamma)
    return {"cdn_pos_l1": pos_l1, "cdn_pos_cls": pos_cls, "cdn_neg_cls": neg_cls}


def total_loss(
    outputs: dict,
    gt_coords: torch.Tensor,
    gt_classes: torch.Tensor,
    d: int,
    registry: CategoryRegistry,
    weights: LossWeights,
) -> LossBreakdown:
    """Deep-supervised objective for one sample: every decoder layer plus the
    first stage gets the matched loss; decoder layers also get the denoising
    terms. The sample total is scaled by its dataset's loss weight."""
    ds = registry.descriptor(d)
    t_d = ds.num_classes
    n_cdn = outputs.get("n_cdn", 0)
    prov = None
    if n_cdn:
        n_pos = n_cdn // 2
        n_gt = gt_coords.shape[0]
        prov = np.tile(np.arange(n_gt), n_pos // n_gt)

    stages: list[tuple[str, dict[str, torch.Tensor]]] = []
    try:
        fs_parts, _ = hungarian_loss(outputs["first_stage"], gt_coords, gt_classes, t_d, weights)
        stages.append(("first_stage", fs_parts))
        for li, entry in enumerate(outputs["layers"]):
            parts, _ = hungarian_loss(entry["candidates"], gt_coords, gt_classes, t_d, weights)
            if "cdn_pos" in entry:
                parts.update(cdn_loss(entry["cdn_pos"], entry["cdn_neg"], prov, gt_coords, gt_classes, t_d, weights))
            stages.append((f"decoder_layer_{li}", parts))
    except NumericalError as exc:
        raise NumericalError(f"hungarian/cdn stage {len(stages)}: {exc}") from exc

    total = gt_coords.new_zeros(())
    agg: dict[str, float] = {name: 0.0 for name in PART_NAMES}
    per_layer: list[dict[str, float]] = []
    for stage_name, parts in stages:
        layer_log: dict[str, float] = {}
        for name, value in parts.items():
            if not torch.isfinite(value):
                raise NumericalError(f"loss term {name!r} is non-finite at {stage_name}")
            total = total + weights.weight_of(name) * value
            agg[name] += float(value.detach())
            layer_log[name] = float(value.detach())
        per_layer.append(layer_log)
    total = ds.loss_weight * total
    return LossBreakdown(total=total, parts=agg, per_layer=per_layer)
