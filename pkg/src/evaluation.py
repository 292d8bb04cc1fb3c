"""
Evaluation Module
=================
Per-class average precision and mAP at a configurable IoU threshold, plus
the class-agnostic non-maximum suppression applied to raw detections.

Detections are ranked by confidence (ties: lower scene id, then input order)
and greedily matched to the unmatched same-scene ground-truth box of highest
IoU at or above the threshold. AP is the all-point area under the
precision-envelope of the precision/recall curve.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data.scene import Scene
from .errors import InvalidConfigError, UnknownClassError
from .geometry import BoundingBox3D, box_iou, make_box
from .models.detector import ProposalSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Detection:
    scene_id: str
    box: BoundingBox3D
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def class_id(self) -> int:
        return self.box.class_id


@dataclass(frozen=True)
class ClassPartition:
    """Disjoint base and novel class sets with display names."""

    base: tuple[int, ...]
    novel: tuple[int, ...]
    names: Mapping[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if set(self.base) & set(self.novel):
            raise InvalidConfigError(f"base {self.base} and novel {self.novel} classes overlap", stage="eval")

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.base) | set(self.novel)))

    def name(self, class_id: int) -> str:
        return self.names.get(class_id, f"class{class_id}")


def detections_from_proposals(proposals: ProposalSet, scene_id: str) -> list[Detection]:
    """Confidence = objectness x max class probability; class = argmax."""
    probs = proposals.class_probs
    cls = probs.argmax(axis=1)
    conf = np.clip(proposals.objectness * probs.max(axis=1), 0.0, 1.0)
    return [
        Detection(scene_id, make_box(proposals.center[i], proposals.size[i], 0.0, int(cls[i])), float(conf[i]))
        for i in range(len(proposals))
    ]


def suppress_overlaps(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Class-agnostic greedy 3D NMS within each scene.

    Detections are visited by descending confidence (input order on ties)
    and dropped when their box overlaps an already kept box of the same scene
    with IoU above ``iou_threshold``. Kept detections stay in input order. A
    threshold <= 0 keeps everything.
    """
    if iou_threshold <= 0.0:
        return list(dets)
    kept: dict[str, list[BoundingBox3D]] = {}
    keep = np.zeros(len(dets), dtype=bool)
    for i in sorted(range(len(dets)), key=lambda i: -dets[i].confidence):
        det = dets[i]
        boxes = kept.setdefault(det.scene_id, [])
        if all(box_iou(det.box, other) <= iou_threshold for other in boxes):
            boxes.append(det.box)
            keep[i] = True
    return [d for d, k in zip(dets, keep) if k]


def rank_detections(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, dets[i].scene_id, i))


def match_detections(
    dets: Sequence[Detection],
    gts: Mapping[str, Sequence[BoundingBox3D]],
    iou_threshold: float,
) -> tuple[list[int], np.ndarray]:
    """Greedy TP/FP assignment for one class.

    Returns:
        The ranking (indices into ``dets``) and the TP flag of each ranked detection.
    """
    order = rank_detections(dets)
    matched = {scene_id: np.zeros(len(boxes), dtype=bool) for scene_id, boxes in gts.items()}
    flags = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        det = dets[i]
        boxes = gts.get(det.scene_id, ())
        best, best_iou = -1, -1.0
        for j, gt in enumerate(boxes):
            if matched[det.scene_id][j]:
                continue
            iou = box_iou(det.box, gt)
            if iou > best_iou:
                best, best_iou = j, iou
        if best >= 0 and best_iou >= iou_threshold:
            matched[det.scene_id][best] = True
            flags[rank] = True
    return order, flags


def pr_curve(flags: np.ndarray, num_gt: int) -> tuple[np.ndarray, np.ndarray]:
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt if num_gt > 0 else np.zeros(len(flags))
    precision = tp / np.maximum(tp + fp, 1)
    return recall.astype(np.float64), precision.astype(np.float64)


def average_precision(flags: Sequence[bool] | np.ndarray, num_gt: int) -> float | None:
    """All-point AP with a monotone precision envelope.

    Returns 0 when ``num_gt == 0`` but detections exist, and ``None`` (class
    excluded from means) when there are neither ground truths nor detections.
    """
    flags = np.asarray(flags, dtype=bool)
    if num_gt == 0:
        return 0.0 if flags.size else None
    if flags.size == 0:
        return 0.0
    recall, precision = pr_curve(flags, num_gt)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _mean(values: Iterable[float | None]) -> float:
    kept = [v for v in values if v is not None]
    return float(np.mean(kept)) if kept else math.nan


@dataclass
class EvalReport:
    """Per-class AP and partition means at one IoU threshold."""

    iou_threshold: float
    partition: ClassPartition
    class_ap: dict[int, float | None]
    num_gt: dict[int, int]
    num_detections: dict[int, int]
    curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    @property
    def map_base(self) -> float:
        return _mean(self.class_ap[c] for c in self.partition.base)

    @property
    def map_novel(self) -> float:
        return _mean(self.class_ap[c] for c in self.partition.novel)

    @property
    def map_all(self) -> float:
        return _mean(self.class_ap[c] for c in self.partition.all_classes)

    def to_dict(self, suffix: str = "") -> dict[str, str]:
        """Fixed key names; ``suffix`` (e.g. ``@0.25``) is appended to every key."""
        out: dict[str, str] = {}
        for c in self.partition.all_classes:
            out[f"class_ap.{self.partition.name(c)}{suffix}"] = format_metric(self.class_ap[c])
        out[f"map.base{suffix}"] = format_metric(self.map_base)
        out[f"map.novel{suffix}"] = format_metric(self.map_novel)
        out[f"map.all{suffix}"] = format_metric(self.map_all)
        return out

    def to_text(self) -> str:
        lines = [f"iou_threshold={self.iou_threshold:g}"]
        lines.extend(f"{k}={v}" for k, v in self.to_dict().items())
        for c in self.partition.all_classes:
            name = self.partition.name(c)
            lines.append(f"count.gt.{name}={self.num_gt[c]}")
            lines.append(f"count.detections.{name}={self.num_detections[c]}")
        return "\n".join(lines) + "\n"


def format_metric(value: float | None) -> str:
    if value is None:
        return "excluded"
    if math.isnan(value):
        return "nan"
    return f"{value:.6f}"


def evaluate(
    detections: Sequence[Detection],
    gt_scenes: Sequence[Scene],
    partition: ClassPartition,
    iou_threshold: float = 0.25,
) -> EvalReport:
    """Per-class AP over held-out scenes.

    Raises:
        UnknownClassError: A detection's class is in neither partition set.
    """
    known = set(partition.all_classes)
    for det in detections:
        if det.class_id not in known:
            raise UnknownClassError(f"detection class {det.class_id} is not in the class partition")

    class_ap: dict[int, float | None] = {}
    num_gt: dict[int, int] = {}
    num_det: dict[int, int] = {}
    curves: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for c in partition.all_classes:
        gts = {s.scene_id: [b for b in s.boxes if b.class_id == c] for s in gt_scenes}
        dets = [d for d in detections if d.class_id == c]
        n_gt = sum(len(v) for v in gts.values())
        _, flags = match_detections(dets, gts, iou_threshold)
        ap = average_precision(flags, n_gt)
        if ap is None:
            logger.warning("Class %s has no ground truth and no detections; excluded from means", partition.name(c))
        class_ap[c], num_gt[c], num_det[c] = ap, n_gt, len(dets)
        curves[c] = pr_curve(flags, n_gt)
    report = EvalReport(iou_threshold, partition, class_ap, num_gt, num_det, curves)
    logger.info(
        "mAP@%g: base %.4f, novel %.4f, all %.4f",
        iou_threshold, report.map_base, report.map_novel, report.map_all,
    )
    return report


def write_report(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_text(), encoding="utf-8")
    return path
