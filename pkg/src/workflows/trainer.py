"""
Training Workflow
=================
The three-stage incremental schedule plus the forgetting baseline:

    pretrain_base         source scenes, supervised only
    finetune_sequential   X_in(source) then X_cross, supervised only
    train_dual_teacher    student + EMA in-domain teacher + frozen cross-domain teacher
    finetune_baseline     novel-class supervision only, no teachers

Each dual-teacher step builds pseudo labels with the frozen teacher, mixes
them with novel ground truth under one scene transform, and combines the
supervised, distillation and consistency losses before a single Adam step
on the student and an EMA update of the in-domain teacher.

With shared statistics the student and the cross-domain teacher normalize
with the in-domain teacher's running statistics. The student still folds the
batch moments it sees on target scenes into its own statistics, and the EMA
carries them into the shared ones; the final student takes the shared
statistics so it is evaluated the way it was trained.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from ..data.scene import Scene
from ..errors import BatchCompositionError, EmptyCorpusError, InvalidConfigError, ShapeError
from ..geometry import BoundingBox3D, SceneTransform, make_box
from ..models.detector import (
    BN_LAYERS,
    DetectorConfig,
    DetectorState,
    ForwardResult,
    ProposalGrads,
    absorb_batch_moments,
    backward,
    copy_state,
    export_bn_stats,
    forward,
    freeze,
    import_bn_stats,
    init_state,
)
from ..models.losses import (
    LossWeights,
    consistency_loss,
    distillation_grads,
    distillation_loss,
    supervised_loss,
    total_loss,
    vote_loss,
)
from ..models.optim import AdamOptimizer
from ..telemetry import record_loss, trace_step

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Schedule and optimization settings.

    Attributes:
        epochs_base: Epochs of base pre-training.
        epochs_finetune: Epochs on X_in(source), then on X_cross.
        epochs_dual: Epochs of dual-teacher training (also used by the baseline).
        batch_size: Scenes per step in supervised stages.
        batch_in_target: X_in(target) scenes per dual-teacher step.
        batch_cross: X_cross scenes per dual-teacher step.
        lr: Initial learning rate.
        lr_decay_epochs: Epochs at which the learning rate drops by ``lr_decay_factor``.
        lr_decay_factor: Learning-rate multiplier at each decay epoch.
        ema_alpha: In-domain teacher decay.
        pseudo_threshold: Minimum objectness for a pseudo label.
        scene_augment: Draw a random scene transform per scene and step.
        flip_prob: Probability of flipping over x.
        rot_range: Scene rotation drawn from [-rot_range, rot_range] radians.
        scale_range: Uniform range of the scene scale.
        share_bn: Normalize student and cross-domain teacher with the in-domain teacher's statistics.
        base_classes: Old classes (source domain).
        novel_classes: New classes (target domain).
        seed: Seed of every random draw made by the trainer.
    """

    epochs_base: int = 30
    epochs_finetune: tuple[int, int] = (5, 5)
    epochs_dual: int = 20
    batch_size: int = 2
    batch_in_target: int = 3
    batch_cross: int = 1
    lr: float = 1e-3
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    ema_alpha: float = 0.999
    pseudo_threshold: float = 0.5
    scene_augment: bool = True
    flip_prob: float = 0.5
    rot_range: float = math.radians(5.0)
    scale_range: tuple[float, float] = (0.95, 1.05)
    share_bn: bool = True
    base_classes: tuple[int, ...] = (0, 1, 2)
    novel_classes: tuple[int, ...] = (3, 4)
    seed: int = 0

    def __post_init__(self) -> None:
        epochs = (self.epochs_base, *self.epochs_finetune, self.epochs_dual)
        if min(epochs) < 0:
            raise InvalidConfigError(f"epochs must be non-negative: {epochs}", stage="train")
        if self.batch_size < 1 or self.batch_in_target < 1 or self.batch_cross < 0:
            raise InvalidConfigError("batch sizes must be positive", stage="train")
        if self.lr < 0.0 or not 0.0 <= self.ema_alpha <= 1.0:
            raise InvalidConfigError("lr must be >= 0 and ema_alpha in [0, 1]", stage="train")
        if not 0.0 < self.pseudo_threshold < 1.0:
            raise InvalidConfigError("pseudo_threshold must lie in (0, 1)", stage="train")
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi or not 0.0 <= self.flip_prob <= 1.0 or self.rot_range < 0.0:
            raise InvalidConfigError("invalid scene augmentation ranges", stage="train")
        if set(self.base_classes) & set(self.novel_classes):
            raise InvalidConfigError("base and novel classes overlap", stage="train")


# ──────────────────────────────────────────────────────────────
# Records
# ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class EpochRecord:
    stage: str
    epoch: int
    l_sup: float
    l_dis: float
    l_con: float
    l_total: float
    lr: float


class MetricsLog:
    """Epoch records kept in memory and appended as JSON lines to ``path``."""

    def __init__(self, path: str | Path | None = None) -> None:
        self.path = Path(path) if path is not None else None
        self.records: list[EpochRecord] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)
        logger.info(
            "[%s] epoch %d: l_sup=%.4f l_dis=%.4f l_con=%.4f l_total=%.4f lr=%.2g",
            record.stage, record.epoch, record.l_sup, record.l_dis, record.l_con, record.l_total, record.lr,
        )
        for component in ("l_sup", "l_dis", "l_con", "l_total"):
            record_loss(record.stage, component, getattr(record, component))
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(json.dumps(asdict(record), sort_keys=True) + "\n")


@dataclass
class StageResult:
    state: DetectorState
    history: list[EpochRecord] = field(default_factory=list)
    stage_log: list[str] = field(default_factory=list)


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(stage.encode("utf-8"))])


# ──────────────────────────────────────────────────────────────
# Scene transforms and labels
# ──────────────────────────────────────────────────────────────

def draw_scene_transform(rng: np.random.Generator, cfg: TrainConfig) -> SceneTransform:
    if not cfg.scene_augment:
        return SceneTransform()
    flip = bool(rng.uniform() < cfg.flip_prob)
    rot = float(rng.uniform(-cfg.rot_range, cfg.rot_range))
    scale = float(rng.uniform(*cfg.scale_range))
    return SceneTransform(flip, rot, scale)


class LabelSource(str, Enum):
    PSEUDO = "pseudo"
    GT = "gt"


@dataclass(frozen=True)
class MixedLabels:
    boxes: tuple[BoundingBox3D, ...]
    provenance: tuple[LabelSource, ...]

    def of(self, source: LabelSource) -> tuple[BoundingBox3D, ...]:
        return tuple(b for b, p in zip(self.boxes, self.provenance) if p == source)


def generate_pseudo_labels(
    cross_teacher: DetectorState,
    scene: Scene,
    threshold: float,
    base_classes: Sequence[int],
) -> list[BoundingBox3D]:
    """Boxes from teacher proposals whose objectness reaches ``threshold``.

    The class is the argmax over base-class probabilities only.
    """
    proposals = forward(cross_teacher, scene.cloud, mode="eval").proposals
    base = np.asarray(sorted(base_classes), dtype=np.int64)
    keep = np.flatnonzero(proposals.objectness >= threshold)
    probs = proposals.class_probs[:, base]
    return [
        make_box(proposals.center[i], proposals.size[i], 0.0, int(base[int(np.argmax(probs[i]))]))
        for i in keep
    ]


def make_mixed_labels(
    pseudo: Sequence[BoundingBox3D],
    novel_gt: Sequence[BoundingBox3D],
    scene_transform: SceneTransform,
    cloud: np.ndarray,
) -> tuple[np.ndarray, MixedLabels]:
    """Apply one scene transform to the student's input and to every label."""
    boxes = tuple(scene_transform.apply_box(b) for b in (*pseudo, *novel_gt))
    provenance = (LabelSource.PSEUDO,) * len(pseudo) + (LabelSource.GT,) * len(novel_gt)
    return scene_transform.apply_points(cloud), MixedLabels(boxes, provenance)


# ──────────────────────────────────────────────────────────────
# EMA
# ──────────────────────────────────────────────────────────────

def ema_update(teacher: DetectorState, student: DetectorState, alpha: float) -> DetectorState:
    """In place: teacher <- alpha * teacher + (1 - alpha) * student, parameters and BN statistics.

    Raises:
        ShapeError: The two states have different configurations.
        FrozenStateError: The teacher is frozen.
    """
    if teacher.config != student.config:
        raise ShapeError("EMA needs teacher and student of identical configuration")
    teacher.ensure_mutable()
    rate = 1.0 - alpha
    for name, param in teacher.params.items():
        param += rate * (student.params[name] - param)
    for name in BN_LAYERS:
        teacher.bn_mean[name] = teacher.bn_mean[name] + rate * (student.bn_mean[name] - teacher.bn_mean[name])
        teacher.bn_var[name] = teacher.bn_var[name] + rate * (student.bn_var[name] - teacher.bn_var[name])
    return teacher


# ──────────────────────────────────────────────────────────────
# Supervised stages
# ──────────────────────────────────────────────────────────────

def _average(grads: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    n = len(grads)
    return {name: sum(g[name] for g in grads) / n for name in grads[0]}


def _supervised_grads(
    result: ForwardResult,
    boxes: Sequence[BoundingBox3D],
    weights: LossWeights,
) -> tuple[float, ProposalGrads, np.ndarray | None]:
    """L_sup of one forward: the supervised loss plus the weighted vote regression.

    Returns the value and the unscaled gradients on proposals and votes;
    callers apply ``weights.sup``.
    """
    sup = supervised_loss(result.proposals, boxes, weights.assignment_radius)
    if weights.vote == 0.0:
        return sup.value, sup.grads, None
    value, d_votes = vote_loss(result.cache.votes, result.cache.seed_xyz, boxes, weights.vote_margin)  # type: ignore[arg-type]
    return sup.value + weights.vote * value, sup.grads, d_votes * weights.vote


def _scaled(d_votes: np.ndarray | None, factor: float) -> np.ndarray | None:
    return None if d_votes is None else d_votes * factor


def _supervised_phase(
    state: DetectorState,
    scenes: Sequence[Scene],
    epochs: int,
    stage: str,
    cfg: TrainConfig,
    weights: LossWeights,
    optimizer: AdamOptimizer,
    rng: np.random.Generator,
    metrics: MetricsLog,
    label_classes: Sequence[int] | None = None,
) -> list[EpochRecord]:
    history: list[EpochRecord] = []
    step = 0
    for epoch in range(epochs):
        lr = optimizer.set_epoch(epoch)
        order = rng.permutation(len(scenes))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [scenes[int(i)] for i in order[start : start + cfg.batch_size]]
            with trace_step(stage, step):
                grads = []
                for scene in batch:
                    boxes = scene.boxes if label_classes is None else scene.restrict_labels(label_classes).boxes
                    t = draw_scene_transform(rng, cfg)
                    result = forward(state, t.apply_points(scene.cloud), mode="train")
                    value, d_props, d_votes = _supervised_grads(result, [t.apply_box(b) for b in boxes], weights)
                    grads.append(backward(result.cache, d_props.scaled(weights.sup), _scaled(d_votes, weights.sup)))
                    losses.append(value)
                optimizer.step(_average(grads))
            step += 1
        l_sup = float(np.mean(losses)) if losses else 0.0
        record = EpochRecord(stage, epoch, l_sup, 0.0, 0.0, total_loss(l_sup, 0.0, 0.0, weights), lr)
        metrics.append(record)
        history.append(record)
    return history


def _optimizer(state: DetectorState, cfg: TrainConfig) -> AdamOptimizer:
    return AdamOptimizer(state, lr=cfg.lr, decay_epochs=cfg.lr_decay_epochs, decay_factor=cfg.lr_decay_factor)


def pretrain_base(
    source_scenes: Sequence[Scene],
    cfg: TrainConfig,
    det_cfg: DetectorConfig | None = None,
    weights: LossWeights | None = None,
    metrics: MetricsLog | None = None,
) -> StageResult:
    """Base model trained on source scenes with the supervised loss.

    Raises:
        EmptyCorpusError: No source scenes.
    """
    if not source_scenes:
        raise EmptyCorpusError("pre-training needs at least one source scene", stage="pretrain")
    weights = weights or LossWeights()
    metrics = metrics or MetricsLog()
    state = init_state(det_cfg or DetectorConfig(), seed=cfg.seed)
    rng = stage_rng(cfg.seed, "pretrain")
    history = _supervised_phase(
        state, source_scenes, cfg.epochs_base, "pretrain", cfg, weights, _optimizer(state, cfg), rng, metrics,
        label_classes=cfg.base_classes,
    )
    return StageResult(state, history, ["pretrain"])


def finetune_sequential(
    state: DetectorState,
    in_source_scenes: Sequence[Scene],
    cross_scenes: Sequence[Scene],
    cfg: TrainConfig,
    weights: LossWeights | None = None,
    metrics: MetricsLog | None = None,
) -> StageResult:
    """Fine-tune a copy of ``state`` on X_in(source), then on X_cross (base labels only).

    Raises:
        EmptyCorpusError: A phase with epochs to run has no scenes.
    """
    weights = weights or LossWeights()
    metrics = metrics or MetricsLog()
    tuned = copy_state(state)
    optimizer = _optimizer(tuned, cfg)
    rng = stage_rng(cfg.seed, "finetune")
    result = StageResult(tuned)
    for phase, scenes, epochs in (
        ("in_source", in_source_scenes, cfg.epochs_finetune[0]),
        ("cross", cross_scenes, cfg.epochs_finetune[1]),
    ):
        if epochs == 0:
            continue
        if not scenes:
            raise EmptyCorpusError(f"fine-tuning phase '{phase}' has no scenes", stage="finetune")
        logger.info("Fine-tuning on %s for %d epochs", phase, epochs)
        result.history += _supervised_phase(
            tuned, scenes, epochs, f"finetune.{phase}", cfg, weights, optimizer, rng, metrics,
            label_classes=cfg.base_classes,
        )
        result.stage_log.append(phase)
    return result


def finetune_baseline(
    state: DetectorState,
    target_scenes: Sequence[Scene],
    cfg: TrainConfig,
    weights: LossWeights | None = None,
    metrics: MetricsLog | None = None,
) -> StageResult:
    """Plain fine-tuning on novel-class labels; no teachers, no pseudo labels.

    Raises:
        EmptyCorpusError: Epochs to run but no target scenes.
    """
    weights = weights or LossWeights()
    metrics = metrics or MetricsLog()
    tuned = copy_state(state)
    if cfg.epochs_dual == 0:
        return StageResult(tuned, [], [])
    if not target_scenes:
        raise EmptyCorpusError("baseline fine-tuning needs target scenes", stage="baseline")
    history = _supervised_phase(
        tuned, target_scenes, cfg.epochs_dual, "baseline", cfg, weights, _optimizer(tuned, cfg),
        stage_rng(cfg.seed, "baseline"), metrics, label_classes=cfg.novel_classes,
    )
    return StageResult(tuned, history, ["baseline"])


# ──────────────────────────────────────────────────────────────
# Dual-teacher stage
# ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DualBatch:
    in_target: tuple[Scene, ...]
    cross: tuple[Scene, ...] = ()


@dataclass(frozen=True)
class StepBreakdown:
    l_sup: float
    l_dis: float
    l_con: float
    l_total: float
    pseudo_labels: int
    transforms: tuple[SceneTransform, ...] = ()
    supervised_labels: tuple[tuple[BoundingBox3D, ...], ...] = ()


def dual_teacher_step(
    student: DetectorState,
    in_teacher: DetectorState,
    cross_teacher: DetectorState,
    batch: DualBatch,
    cfg: TrainConfig,
    weights: LossWeights | None = None,
    optimizer: AdamOptimizer | None = None,
    rng: np.random.Generator | None = None,
) -> StepBreakdown:
    """One optimizer step on the student followed by the EMA teacher update.

    Raises:
        BatchCompositionError: No in_target scenes, or more scenes than configured.
    """
    if not batch.in_target:
        raise BatchCompositionError("dual-teacher batch needs at least one in_target scene", stage="train")
    if len(batch.in_target) > cfg.batch_in_target or len(batch.cross) > cfg.batch_cross:
        raise BatchCompositionError(
            f"batch has {len(batch.in_target)} in_target and {len(batch.cross)} cross scenes, "
            f"at most {cfg.batch_in_target} and {cfg.batch_cross} allowed",
            stage="train",
        )
    weights = weights or LossWeights()
    optimizer = optimizer or _optimizer(student, cfg)
    rng = rng or stage_rng(cfg.seed, "train")
    base = cfg.base_classes
    bn = export_bn_stats(in_teacher) if cfg.share_bn else None

    grads: list[dict[str, np.ndarray]] = []
    sup_vals, dis_vals, con_vals = [], [], []
    transforms: list[SceneTransform] = []
    supervised: list[tuple[BoundingBox3D, ...]] = []
    n_pseudo = 0

    def distill(result, cloud_t) -> tuple[float, ProposalGrads]:
        if weights.dis == 0.0:
            return 0.0, ProposalGrads.zeros_like(result.proposals)
        teacher = forward(cross_teacher, cloud_t, mode="eval", trace_in=result.trace, bn_source=bn)
        value, d_logits = distillation_loss(result.proposals.class_logits, teacher.proposals.class_logits, base)
        return value, distillation_grads(result.proposals, d_logits)

    for scene in batch.in_target:
        novel_gt = scene.restrict_labels(cfg.novel_classes).boxes
        pseudo = generate_pseudo_labels(cross_teacher, scene, cfg.pseudo_threshold, base)
        n_pseudo += len(pseudo)
        t = draw_scene_transform(rng, cfg)
        cloud_t, mixed = make_mixed_labels(pseudo, novel_gt, t, scene.cloud)
        transforms.append(t)
        supervised.append(mixed.boxes)

        result = forward(student, cloud_t, mode="train", bn_source=bn)
        if bn is not None:
            absorb_batch_moments(student, result.cache)
        sup_value, d_props, d_votes = _supervised_grads(result, mixed.boxes, weights)
        upstream = d_props.scaled(weights.sup)
        dis_value, dis_grads = distill(result, cloud_t)
        upstream = upstream + dis_grads.scaled(weights.dis)
        con_value = 0.0
        if weights.con > 0.0:
            teacher_view = forward(in_teacher, scene.cloud, mode="eval").proposals.transformed(t)
            con = consistency_loss(result.proposals, teacher_view, weights)
            con_value = con.value
            upstream = upstream + con.grads.scaled(weights.con)
        grads.append(backward(result.cache, upstream, _scaled(d_votes, weights.sup)))
        sup_vals.append(sup_value)
        dis_vals.append(dis_value)
        con_vals.append(con_value)

    for scene in batch.cross:
        t = draw_scene_transform(rng, cfg)
        boxes = tuple(t.apply_box(b) for b in scene.restrict_labels(base).boxes)
        cloud_t = t.apply_points(scene.cloud)
        transforms.append(t)
        supervised.append(boxes)

        result = forward(student, cloud_t, mode="train", bn_source=bn)
        if bn is not None:
            absorb_batch_moments(student, result.cache)
        sup_value, d_props, d_votes = _supervised_grads(result, boxes, weights)
        dis_value, dis_grads = distill(result, cloud_t)
        upstream = d_props.scaled(weights.sup) + dis_grads.scaled(weights.dis)
        grads.append(backward(result.cache, upstream, _scaled(d_votes, weights.sup)))
        sup_vals.append(sup_value)
        dis_vals.append(dis_value)

    optimizer.step(_average(grads))
    ema_update(in_teacher, student, cfg.ema_alpha)

    l_sup = float(np.mean(sup_vals))
    l_dis = float(np.mean(dis_vals))
    l_con = float(np.mean(con_vals))
    logger.debug("dual step: l_sup=%.4f l_dis=%.4f l_con=%.4f pseudo=%d", l_sup, l_dis, l_con, n_pseudo)
    return StepBreakdown(
        l_sup, l_dis, l_con, total_loss(l_sup, l_dis, l_con, weights), n_pseudo, tuple(transforms), tuple(supervised)
    )


@dataclass
class DualTeacherResult:
    student: DetectorState
    in_teacher: DetectorState
    cross_teacher: DetectorState
    history: list[EpochRecord] = field(default_factory=list)
    stage_log: list[str] = field(default_factory=list)


def train_dual_teacher(
    state: DetectorState,
    in_target_scenes: Sequence[Scene],
    cross_scenes: Sequence[Scene],
    cfg: TrainConfig,
    weights: LossWeights | None = None,
    metrics: MetricsLog | None = None,
) -> DualTeacherResult:
    """Dual-teacher incremental training starting from the fine-tuned base model.

    Student and in-domain teacher start as copies of ``state``; the
    cross-domain teacher is a frozen copy and never changes.

    Raises:
        EmptyCorpusError: No in_target scenes.
    """
    if not in_target_scenes:
        raise EmptyCorpusError("dual-teacher training needs X_in(target) scenes", stage="train")
    weights = weights or LossWeights()
    metrics = metrics or MetricsLog()
    student = copy_state(state)
    in_teacher = copy_state(state)
    cross_teacher = freeze(state)
    optimizer = _optimizer(student, cfg)
    rng = stage_rng(cfg.seed, "train")
    result = DualTeacherResult(student, in_teacher, cross_teacher, stage_log=["dual_teacher"])

    step = 0
    cross_cursor = 0
    cross_order = rng.permutation(len(cross_scenes)) if cross_scenes else np.zeros(0, dtype=np.int64)
    for epoch in range(cfg.epochs_dual):
        lr = optimizer.set_epoch(epoch)
        order = rng.permutation(len(in_target_scenes))
        breakdowns = []
        for start in range(0, len(order), cfg.batch_in_target):
            in_target = tuple(in_target_scenes[int(i)] for i in order[start : start + cfg.batch_in_target])
            cross: list[Scene] = []
            for _ in range(cfg.batch_cross if cross_scenes else 0):
                if cross_cursor == len(cross_order):
                    cross_order, cross_cursor = rng.permutation(len(cross_scenes)), 0
                cross.append(cross_scenes[int(cross_order[cross_cursor])])
                cross_cursor += 1
            with trace_step("train", step):
                breakdowns.append(
                    dual_teacher_step(
                        student, in_teacher, cross_teacher, DualBatch(in_target, tuple(cross)),
                        cfg, weights, optimizer, rng,
                    )
                )
            step += 1
        record = EpochRecord(
            "train",
            epoch,
            float(np.mean([b.l_sup for b in breakdowns])),
            float(np.mean([b.l_dis for b in breakdowns])),
            float(np.mean([b.l_con for b in breakdowns])),
            float(np.mean([b.l_total for b in breakdowns])),
            lr,
        )
        metrics.append(record)
        result.history.append(record)
    if cfg.share_bn:
        import_bn_stats(student, export_bn_stats(in_teacher))
    return result
