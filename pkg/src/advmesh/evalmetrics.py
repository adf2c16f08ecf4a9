"""Detection metrics and reports.

Average precision at 40 recall points per KITTI difficulty bucket, attack
success rate, recall-vs-IoU curves, and JSON/CSV report emission.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .dataio import DIFFICULTY_NAMES, ObjectLabel, assign_difficulty
from .geom import Box3D, iou_3d, iou_bev


class NoGroundTruth(ValueError):
    """AP is undefined without any counted ground-truth object."""


class NoVictims(ValueError):
    """ASR is undefined when nothing was detected before the attack."""


@dataclass(frozen=True)
class ScoredBox:
    """One detection: lidar-frame box, confidence, optional 2D footprint."""

    box: Box3D
    score: float
    bbox2d: tuple[float, float, float, float] | None = None


def _iou_fn(kind: str):
    if kind == "bev":
        return iou_bev
    if kind == "3d":
        return iou_3d
    raise ValueError(f"unknown iou kind {kind!r}")


def _bbox_overlap_frac(det_bbox, dc_bbox) -> float:
    """Intersection area over detection area for 2D ignore-region tests."""
    l = max(det_bbox[0], dc_bbox[0])
    t = max(det_bbox[1], dc_bbox[1])
    r = min(det_bbox[2], dc_bbox[2])
    b = min(det_bbox[3], dc_bbox[3])
    if r <= l or b <= t:
        return 0.0
    area = (det_bbox[2] - det_bbox[0]) * (det_bbox[3] - det_bbox[1])
    if area <= 0:
        return 0.0
    return (r - l) * (b - t) / area


def _split_gts(gts: list[ObjectLabel], difficulty: int | None):
    """Counted boxes, ignored boxes (harder buckets), DontCare 2D regions."""
    counted, ignored, dontcare = [], [], []
    for lab in gts:
        if lab.ignore or lab.box is None:
            dontcare.append(lab.bbox)
            continue
        if lab.cls != "Car":
            continue
        d = assign_difficulty(lab)
        if difficulty is None or (0 <= d <= difficulty):
            counted.append(lab.box)
        else:
            ignored.append(lab.box)
    return counted, ignored, dontcare


def match_scene(
    dets: list[ScoredBox],
    gts: list[ObjectLabel],
    iou_thr: float,
    difficulty: int | None = None,
    kind: str = "bev",
):
    """Greedy per-scene matching by descending score.

    Returns (flags, n_gt) where flags[i] is 'tp', 'fp', or 'ignore' for the
    i-th detection in descending-score order, alongside that ordering.
    """
    iou = _iou_fn(kind)
    counted, ignored, dontcare = _split_gts(gts, difficulty)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(counted)
    flags = []
    for i in order:
        det = dets[i]
        best_j, best_iou = -1, iou_thr
        for j, gt in enumerate(counted):
            if taken[j]:
                continue
            v = iou(det.box, gt)
            if v >= best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            taken[best_j] = True
            flags.append("tp")
            continue
        if any(iou(det.box, g) >= iou_thr for g in ignored):
            flags.append("ignore")
            continue
        if det.bbox2d is not None and any(
            _bbox_overlap_frac(det.bbox2d, dc) > 0.5 for dc in dontcare
        ):
            flags.append("ignore")
            continue
        flags.append("fp")
    return flags, order, len(counted)


def compute_ap(
    dets_per_scene: list[list[ScoredBox]],
    gts_per_scene: list[list[ObjectLabel]],
    iou_thr: float = 0.7,
    difficulty: int | None = None,
    n_recall: int = 40,
    kind: str = "bev",
) -> float:
    """Average precision (percent) at n_recall interpolated recall points."""
    if len(dets_per_scene) != len(gts_per_scene):
        raise ValueError("detections and ground truths must align per scene")
    records = []  # (score, is_tp) over all scenes, fps as is_tp=False
    n_gt = 0
    for dets, gts in zip(dets_per_scene, gts_per_scene):
        flags, order, scene_gt = match_scene(dets, gts, iou_thr, difficulty, kind)
        n_gt += scene_gt
        for flag, i in zip(flags, order):
            if flag == "ignore":
                continue
            records.append((dets[i].score, flag == "tp"))
    if n_gt == 0:
        raise NoGroundTruth("no counted ground-truth cars at this difficulty")
    if not records:
        return 0.0
    records.sort(key=lambda r: -r[0])
    tps = np.cumsum([1 if t else 0 for _, t in records])
    fps = np.cumsum([0 if t else 1 for _, t in records])
    recall = tps / n_gt
    precision = tps / np.maximum(tps + fps, 1)
    # interpolated precision: max precision at recall >= r
    ap = 0.0
    for k in range(1, n_recall + 1):
        r = k / n_recall
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return 100.0 * ap / n_recall


def compute_asr(victims_detected_before: int, hidden_after: int) -> float:
    """Percentage of previously detected vehicles now missed."""
    if victims_detected_before <= 0:
        raise NoVictims("attack success rate needs at least one detected vehicle")
    if not 0 <= hidden_after <= victims_detected_before:
        raise ValueError("hidden count must be within [0, before]")
    return 100.0 * hidden_after / victims_detected_before


def recall_curve(
    dets_per_scene: list[list[ScoredBox]],
    gts_per_scene: list[list[ObjectLabel]],
    thresholds,
    kind: str = "bev",
):
    """Recall per IoU threshold, thresholds ascending."""
    thresholds = list(thresholds)
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be ascending")
    recalls = []
    for thr in thresholds:
        matched = 0
        n_gt = 0
        for dets, gts in zip(dets_per_scene, gts_per_scene):
            flags, _, scene_gt = match_scene(dets, gts, thr, None, kind)
            n_gt += scene_gt
            matched += sum(1 for f in flags if f == "tp")
        recalls.append(matched / n_gt if n_gt else 0.0)
    return list(zip(thresholds, recalls))


@dataclass
class EvalReport:
    """Aggregated metrics for one evaluation run."""

    ap_bev: dict  # difficulty name -> percent or None
    ap_3d: dict
    asr: float | None
    recall: list  # (iou threshold, recall) pairs
    counts: dict  # gt / detections / matches
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "ap_bev": self.ap_bev,
            "ap_3d": self.ap_3d,
            "asr": self.asr,
            "recall_curve": [[t, r] for t, r in self.recall],
            "counts": self.counts,
            "config": self.config,
        }


def evaluate(
    dets_per_scene,
    gts_per_scene,
    iou_thr: float = 0.7,
    thresholds=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
    asr_counts: tuple[int, int] | None = None,
    config: dict | None = None,
) -> EvalReport:
    """Build a full report; AP entries absent (None) when undefined."""
    ap_bev, ap_3d = {}, {}
    for level, name in enumerate(DIFFICULTY_NAMES):
        for out, kind in ((ap_bev, "bev"), (ap_3d, "3d")):
            try:
                out[name] = compute_ap(
                    dets_per_scene, gts_per_scene, iou_thr, level, kind=kind)
            except NoGroundTruth:
                out[name] = None
    asr = None
    if asr_counts is not None:
        asr = compute_asr(*asr_counts)
    curve = recall_curve(dets_per_scene, gts_per_scene, thresholds)
    n_gt = sum(len([l for l in gts if not l.ignore and l.cls == "Car"])
               for gts in gts_per_scene)
    n_det = sum(len(d) for d in dets_per_scene)
    matched = 0
    for dets, gts in zip(dets_per_scene, gts_per_scene):
        flags, _, _ = match_scene(dets, gts, iou_thr)
        matched += sum(1 for f in flags if f == "tp")
    return EvalReport(
        ap_bev=ap_bev,
        ap_3d=ap_3d,
        asr=asr,
        recall=curve,
        counts={"gt": n_gt, "detections": n_det, "matches": matched},
        config=config or {},
    )


def emit_report(report: EvalReport, json_path, csv_path=None) -> None:
    """Write the JSON report and, optionally, the recall curve CSV."""
    with open(json_path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iou_threshold", "recall"])
            for t, r in report.recall:
                writer.writerow([repr(float(t)), repr(float(r))])
