"""Attack objectives.

Detection-suppression losses for the two victim families, the 2D objectness
sum, and the combined objective with Laplacian smoothing.  IoU weights use
the current forward pass's predicted box against ground truth and are
treated as constants (no gradient through IoU).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geom import Box3D, iou_3d, iou_bev
from .meshes import AdvMesh, laplacian_loss, laplacian_loss_tensor

SCORE_EPS = 1e-7
PROPOSAL_THRESHOLD = 0.1


@dataclass
class SegmentationOutput:
    """Per-point segmentation of a frustum cloud plus one predicted box."""

    scores: ad.Tensor | np.ndarray  # (N,) in (0,1)
    mask: np.ndarray  # (N,) bool, predicted car points
    box: Box3D | None

    def score_values(self) -> np.ndarray:
        return self.scores.values if isinstance(self.scores, ad.Tensor) else self.scores


@dataclass
class ProposalSet:
    """Scored 3D box proposals; the relevant set Y is scores > 0.1, frozen
    at forward-pass time."""

    scores: ad.Tensor | np.ndarray  # (P,)
    boxes: list[Box3D]
    threshold: float = PROPOSAL_THRESHOLD

    def score_values(self) -> np.ndarray:
        return self.scores.values if isinstance(self.scores, ad.Tensor) else self.scores

    def relevant_indices(self) -> np.ndarray:
        return np.nonzero(self.score_values() > self.threshold)[0]


@dataclass(frozen=True)
class LossConfig:
    lap_weight: float = 0.001  # Laplacian smoothing weight
    iou_kind: str = "3d"  # "3d" or "bev"
    score_eps: float = SCORE_EPS

    def __post_init__(self):
        if self.lap_weight < 0:
            raise ValueError("lap_weight must be nonnegative")
        if self.iou_kind not in ("3d", "bev"):
            raise ValueError("iou_kind must be '3d' or 'bev'")


def _iou(cfg: LossConfig, a: Box3D, b: Box3D) -> float:
    return iou_3d(a, b) if cfg.iou_kind == "3d" else iou_bev(a, b)


def _clamped(scores, eps: float):
    if isinstance(scores, ad.Tensor):
        return ad.clip(scores, eps, 1.0 - eps)
    return np.clip(scores, eps, 1.0 - eps)


def loss_fpn_pc(seg: SegmentationOutput, y_gt: Box3D, cfg: LossConfig = LossConfig()):
    """Segmentation-max suppression: -log(1 - m) * IoU(y_gt, y_hat).

    m is the maximum score over predicted car points (lowest index on ties).
    With no car-masked points there is nothing left to suppress: returns
    (0, True).  Second element of the returned pair is the success flag.
    """
    mask = np.asarray(seg.mask, dtype=bool)
    if not mask.any():
        return ad.Tensor(0.0), True
    weight = _iou(cfg, y_gt, seg.box) if seg.box is not None else 1.0
    scores = seg.scores if isinstance(seg.scores, ad.Tensor) else ad.Tensor(seg.scores)
    car_scores = ad.gather_rows(scores, np.nonzero(mask)[0])
    m = ad.max_(_clamped(car_scores, cfg.score_eps))
    loss = ad.mul(ad.neg(ad.log(ad.sub(ad.Tensor(1.0), m))), ad.Tensor(weight))
    return loss, False


def loss_epnet(props: ProposalSet, y_gt: Box3D, cfg: LossConfig = LossConfig()):
    """Proposal suppression: mean over Y of -log(1 - s) * IoU(y_gt, y_hat).

    Empty Y contributes zero loss and counts as currently suppressed.
    """
    rel = props.relevant_indices()
    if len(rel) == 0:
        return ad.Tensor(0.0), True
    scores = props.scores if isinstance(props.scores, ad.Tensor) else ad.Tensor(props.scores)
    sel = _clamped(ad.gather_rows(scores, rel), cfg.score_eps)
    weights = np.array([_iou(cfg, y_gt, props.boxes[i]) for i in rel])
    terms = ad.mul(ad.neg(ad.log(ad.sub(ad.Tensor(1.0), sel))), ad.Tensor(weights))
    return ad.mean(terms), False


def loss_objectness_2d(detections, scores: ad.Tensor | None = None):
    """Sum of objectness over car-class detections.

    ``detections`` is a sequence of (class_name, objectness).  When a tape
    tensor of the same objectness values is supplied the differentiable sum
    is taken over it (car rows only).
    """
    car_idx = [i for i, (cls, _) in enumerate(detections) if cls == "Car"]
    if scores is not None:
        if not car_idx:
            return ad.Tensor(0.0)
        return ad.sum_(ad.gather_rows(scores, np.asarray(car_idx)))
    return ad.Tensor(float(sum(detections[i][1] for i in car_idx)))


def total_loss(base, mesh: AdvMesh, cfg: LossConfig = LossConfig(), displacements: ad.Tensor | None = None):
    """base + lap_weight * laplacian(mesh); differentiable when given the
    displacement tensor."""
    if cfg.lap_weight == 0.0:
        return base if isinstance(base, ad.Tensor) else ad.Tensor(base)
    if displacements is not None:
        lap = laplacian_loss_tensor(mesh, displacements)
    else:
        lap = ad.Tensor(laplacian_loss(mesh))
    base_t = base if isinstance(base, ad.Tensor) else ad.Tensor(base)
    return ad.add(base_t, ad.mul(ad.Tensor(cfg.lap_weight), lap))
