"""
Training Objectives
===================
Proposal pairing, bounding-box-level consistency (center, class, size),
logit distillation on base classes, a simplified supervised multi-task loss,
vote regression toward box centers and the weighted total. Every loss returns its exact gradient with respect to
the student's proposal outputs; teacher outputs are constants.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from ..errors import AlignmentError, EmptyProposalsError, InvalidConfigError, InvalidDistributionError, ShapeError
from ..geometry import BoundingBox3D, rotation_z
from .detector import ProposalGrads, ProposalSet, log_softmax, sigmoid, softmax

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-8
SIMPLEX_TOLERANCE = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Loss weights and the supervised assignment radius.

    Attributes:
        sup: Weight of the supervised loss in the total.
        dis: Weight of the logit distillation loss in the total.
        con: Weight of the consistency loss in the total.
        cls: Weight of the class term inside the consistency loss.
        size: Weight of the size term inside the consistency loss.
        vote: Weight of the vote regression added to the supervised loss.
        assignment_radius: A proposal within this distance of a label center is positive.
        vote_margin: Seeds this close outside a label box still vote for it.
    """

    sup: float = 10.0
    dis: float = 1.0
    con: float = 10.0
    cls: float = 1.0
    size: float = 1.0
    vote: float = 1.0
    assignment_radius: float = 0.3
    vote_margin: float = 0.05

    def __post_init__(self) -> None:
        if min(self.sup, self.dis, self.con, self.cls, self.size, self.vote, self.vote_margin) < 0.0:
            raise InvalidConfigError(f"loss weights must be non-negative: {self}", stage="train")
        if self.assignment_radius <= 0.0:
            raise InvalidConfigError("assignment_radius must be positive", stage="train")


@dataclass
class LossResult:
    value: float
    grads: ProposalGrads
    components: dict[str, float] = field(default_factory=dict)


class PairDirection(str, Enum):
    TEACHER_TO_STUDENT = "teacher_to_student"
    STUDENT_TO_TEACHER = "student_to_teacher"


@dataclass(frozen=True, eq=False)
class PairSet:
    """Nearest-center pairs; one entry per anchor, duplicates allowed on the matched side."""

    teacher_indices: np.ndarray
    student_indices: np.ndarray
    direction: PairDirection

    def __len__(self) -> int:
        return int(self.teacher_indices.size)

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(t), int(s)) for t, s in zip(self.teacher_indices, self.student_indices)]


def _centers(x: ProposalSet | np.ndarray) -> np.ndarray:
    return x.center if isinstance(x, ProposalSet) else np.asarray(x, dtype=np.float64).reshape(-1, 3)


def nearest_indices(anchors: ProposalSet | np.ndarray, candidates: ProposalSet | np.ndarray) -> np.ndarray:
    """For each anchor, the candidate with minimal squared center distance (lower index on ties).

    Raises:
        EmptyProposalsError: Either set is empty.
    """
    a, c = _centers(anchors), _centers(candidates)
    if len(a) == 0 or len(c) == 0:
        raise EmptyProposalsError("pairing needs non-empty anchor and candidate sets")
    d = np.sum((a[:, None, :] - c[None, :, :]) ** 2, axis=2)
    return np.argmin(d, axis=1)


def pair_proposals(
    anchors: ProposalSet | np.ndarray,
    candidates: ProposalSet | np.ndarray,
    direction: PairDirection = PairDirection.TEACHER_TO_STUDENT,
) -> PairSet:
    """Pair each anchor with its nearest candidate.

    With the default direction anchors are teacher proposals (Pair_M);
    ``STUDENT_TO_TEACHER`` treats anchors as student proposals (Pair_N).
    """
    matched = nearest_indices(anchors, candidates)
    anchor_idx = np.arange(len(matched))
    if direction == PairDirection.TEACHER_TO_STUDENT:
        return PairSet(anchor_idx, matched, direction)
    return PairSet(matched, anchor_idx, direction)


# ──────────────────────────────────────────────────────────────
# Bounding-box-level consistency
# ──────────────────────────────────────────────────────────────

def center_loss(student: ProposalSet, teacher: ProposalSet) -> LossResult:
    """Mean squared center distance over Pair_N plus the same over Pair_M."""
    grads = ProposalGrads.zeros_like(student)
    value = 0.0
    for direction in PairDirection:
        if direction == PairDirection.TEACHER_TO_STUDENT:
            pairs = pair_proposals(teacher, student, direction)
        else:
            pairs = pair_proposals(student, teacher, direction)
        diff = student.center[pairs.student_indices] - teacher.center[pairs.teacher_indices]
        n = len(pairs)
        value += float(np.sum(diff**2)) / n
        np.add.at(grads.d_center, pairs.student_indices, 2.0 * diff / n)
    return LossResult(value, grads, {"center": value})


def check_simplex(probs: np.ndarray, what: str = "distribution") -> None:
    if np.any(~np.isfinite(probs)) or np.any(probs < 0.0):
        raise InvalidDistributionError(f"{what} has negative or non-finite entries")
    if np.any(np.abs(probs.sum(axis=-1) - 1.0) > SIMPLEX_TOLERANCE):
        raise InvalidDistributionError(f"{what} rows do not sum to 1")


def kl_divergence(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """KL(p || q) per row, with ``q`` clamped below at :data:`PROB_FLOOR`."""
    p, q = np.atleast_2d(p), np.atleast_2d(q)
    check_simplex(p, "p")
    check_simplex(q, "q")
    q = np.maximum(q, PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * (np.log(p) - np.log(q)), 0.0)
    return terms.sum(axis=1)


def class_loss(student: ProposalSet, teacher: ProposalSet, pairs: PairSet) -> LossResult:
    """(1/M) Σ over Pair_M of KL(student probs || teacher probs)."""
    q = teacher.class_probs
    check_simplex(q, "teacher class probabilities")
    m = len(pairs)
    z = student.class_logits[pairs.student_indices]
    log_p = log_softmax(z)
    p = np.exp(log_p)
    log_q = np.log(np.maximum(q[pairs.teacher_indices], PROB_FLOOR))
    u = log_p - log_q
    value = float(np.sum(p * u)) / m
    dz = p * (u - np.sum(p * u, axis=1, keepdims=True)) / m
    grads = ProposalGrads.zeros_like(student)
    np.add.at(grads.d_class_logits, pairs.student_indices, dz)
    return LossResult(value, grads, {"class": value})


def size_loss(student: ProposalSet, teacher: ProposalSet, pairs: PairSet) -> LossResult:
    """(1/M) Σ over Pair_M of the mean squared size difference over the three dimensions."""
    m = len(pairs)
    diff = student.size[pairs.student_indices] - teacher.size[pairs.teacher_indices]
    value = float(np.sum(np.mean(diff**2, axis=1))) / m
    grads = ProposalGrads.zeros_like(student)
    np.add.at(grads.d_size, pairs.student_indices, 2.0 * diff / (3.0 * m))
    return LossResult(value, grads, {"size": value})


def consistency_loss(student: ProposalSet, teacher: ProposalSet, weights: LossWeights | None = None) -> LossResult:
    """L_center + cls * L_class + size * L_size against a constant teacher."""
    weights = weights or LossWeights()
    center = center_loss(student, teacher)
    pairs = pair_proposals(teacher, student)
    cls = class_loss(student, teacher, pairs)
    size = size_loss(student, teacher, pairs)
    value = center.value + weights.cls * cls.value + weights.size * size.value
    grads = center.grads + cls.grads.scaled(weights.cls) + size.grads.scaled(weights.size)
    return LossResult(value, grads, {"center": center.value, "class": cls.value, "size": size.value})


# ──────────────────────────────────────────────────────────────
# Distillation and supervision
# ──────────────────────────────────────────────────────────────

def distillation_loss(
    student_logits: np.ndarray,
    teacher_logits: np.ndarray,
    base_class_ids: Sequence[int],
) -> tuple[float, np.ndarray]:
    """Mean over proposals of the squared logit difference on base-class dimensions.

    Returns:
        The loss and its gradient with respect to ``student_logits``.

    Raises:
        AlignmentError: The two logit arrays are not aligned one-to-one.
    """
    if student_logits.shape != teacher_logits.shape:
        raise AlignmentError(
            f"student logits {student_logits.shape} and teacher logits {teacher_logits.shape} are not aligned"
        )
    n = student_logits.shape[0]
    grad = np.zeros_like(student_logits)
    if n == 0:
        return 0.0, grad
    base = np.asarray(sorted(set(base_class_ids)), dtype=np.int64)
    diff = student_logits[:, base] - teacher_logits[:, base]
    grad[:, base] = 2.0 * diff / n
    return float(np.sum(diff**2)) / n, grad


def distillation_grads(proposals: ProposalSet, d_logits: np.ndarray) -> ProposalGrads:
    grads = ProposalGrads.zeros_like(proposals)
    grads.d_class_logits += d_logits
    return grads


def assign_labels(proposals: ProposalSet, labels: Sequence[BoundingBox3D], radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Nearest label per proposal and whether it lies within ``radius``."""
    if not labels:
        m = len(proposals)
        return np.zeros(m, dtype=np.int64), np.zeros(m, dtype=bool)
    label_centers = np.array([b.center for b in labels], dtype=np.float64)
    nearest = nearest_indices(proposals, label_centers)
    dist = np.sqrt(np.sum((proposals.center - label_centers[nearest]) ** 2, axis=1))
    return nearest, dist <= radius


def supervised_loss(
    proposals: ProposalSet,
    labels: Sequence[BoundingBox3D],
    assignment_radius: float = 0.3,
) -> LossResult:
    """BCE on objectness over all proposals plus, averaged over positives,
    squared center error + squared size error + class cross-entropy.

    A proposal is positive when its center is within ``assignment_radius`` of
    the nearest label center. With no labels every proposal is negative.
    """
    m = len(proposals)
    num_classes = proposals.class_logits.shape[1]
    if any(b.class_id >= num_classes for b in labels):
        raise ShapeError(f"label class id outside the detector's {num_classes} classes")
    grads = ProposalGrads.zeros_like(proposals)
    nearest, positive = assign_labels(proposals, labels, assignment_radius)

    x = proposals.objectness_logit
    y = positive.astype(np.float64)
    obj = float(np.sum(np.logaddexp(0.0, x) - y * x)) / m
    grads.d_objectness_logit[:] = (sigmoid(x) - y) / m

    center = size = cls = 0.0
    pos = np.flatnonzero(positive)
    if pos.size:
        n_pos = pos.size
        gt = [labels[int(i)] for i in nearest[pos]]
        gt_center = np.array([b.center for b in gt])
        gt_size = np.array([b.size for b in gt])
        gt_cls = np.array([b.class_id for b in gt], dtype=np.int64)
        dc = proposals.center[pos] - gt_center
        ds = proposals.size[pos] - gt_size
        z = proposals.class_logits[pos]
        log_p = log_softmax(z)
        rows = np.arange(n_pos)
        center = float(np.sum(dc**2)) / n_pos
        size = float(np.sum(ds**2)) / n_pos
        cls = float(-np.sum(log_p[rows, gt_cls])) / n_pos
        grads.d_center[pos] = 2.0 * dc / n_pos
        grads.d_size[pos] = 2.0 * ds / n_pos
        d_logits = softmax(z)
        d_logits[rows, gt_cls] -= 1.0
        grads.d_class_logits[pos] = d_logits / n_pos

    value = obj + center + size + cls
    components = {"objectness": obj, "center": center, "size": size, "class": cls, "positives": float(pos.size)}
    return LossResult(value, grads, components)


def vote_loss(
    votes: np.ndarray,
    seed_xyz: np.ndarray,
    labels: Sequence[BoundingBox3D],
    margin: float = 0.05,
) -> tuple[float, np.ndarray]:
    """Smooth-L1 between each object seed's vote and the center of its box.

    A seed belongs to the first label box (in its heading-aligned frame) that
    contains it once every side is grown by ``margin``. The loss averages over the coordinates of those
    seeds; seeds outside every box are ignored.

    Returns:
        The loss and its gradient with respect to ``votes``.

    Raises:
        ShapeError: ``votes`` and ``seed_xyz`` are not both ``(S, 3)``.
    """
    votes = np.asarray(votes, dtype=np.float64)
    seed_xyz = np.asarray(seed_xyz, dtype=np.float64)
    if votes.shape != seed_xyz.shape or votes.ndim != 2 or votes.shape[1] != 3:
        raise ShapeError(f"votes {votes.shape} and seeds {seed_xyz.shape} must both be (S, 3)")
    grad = np.zeros_like(votes)
    target = np.zeros_like(votes)
    owned = np.zeros(len(votes), dtype=bool)
    for box in labels:
        local = (seed_xyz - box.center_array) @ rotation_z(box.heading)
        inside = ~owned & np.all(np.abs(local) <= box.size_array / 2.0 + margin, axis=1)
        target[inside] = box.center
        owned |= inside
    if not owned.any():
        return 0.0, grad
    diff = votes[owned] - target[owned]
    n = 3.0 * float(owned.sum())
    abs_diff = np.abs(diff)
    value = float(np.sum(np.where(abs_diff < 1.0, 0.5 * diff**2, abs_diff - 0.5))) / n
    grad[owned] = np.clip(diff, -1.0, 1.0) / n
    return value, grad


def total_loss(l_sup: float, l_dis: float, l_con: float, weights: LossWeights | None = None) -> float:
    weights = weights or LossWeights()
    return weights.sup * l_sup + weights.dis * l_dis + weights.con * l_con
