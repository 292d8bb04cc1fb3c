"""
Trainer Tests
=============
Tests for the EMA update, pseudo labels, label mixing, the dual-teacher step,
statistics sharing and the supervised stages. The desk-corpus checks at the
end train real models and are marked slow.
"""

import dataclasses
import math
from pathlib import Path

import numpy as np
import pytest

from src.data.augment import PasteConfig, augment_corpus
from src.data.gtdb import build_database
from src.data.scene import Scene
from src.data.synth import BASE_CLASSES, NOVEL_CLASSES, default_source_spec, default_target_spec, synth_domain
from src.errors import BatchCompositionError, EmptyCorpusError, FrozenStateError, InvalidConfigError, ShapeError
from src.evaluation import evaluate
from src.geometry import SceneTransform, make_box, points_in_box
from src.models.checkpoint import encode_state
from src.models.detector import DetectorConfig, copy_state, export_bn_stats, freeze, init_state
from src.models.gradcheck import small_config
from src.models.losses import LossWeights
from src.workflows.experiment import class_partition, detect_scenes
from src.workflows.trainer import (
    DualBatch,
    LabelSource,
    MetricsLog,
    TrainConfig,
    draw_scene_transform,
    dual_teacher_step,
    ema_update,
    finetune_baseline,
    finetune_sequential,
    generate_pseudo_labels,
    make_mixed_labels,
    pretrain_base,
    stage_rng,
    train_dual_teacher,
)


@pytest.fixture(scope="module")
def target_scenes() -> list[Scene]:
    return synth_domain(default_target_spec(), 4, np.random.default_rng(0), prefix="target")


@pytest.fixture(scope="module")
def source_scenes() -> list[Scene]:
    return synth_domain(default_source_spec(), 3, np.random.default_rng(1), prefix="source")


@pytest.fixture
def cfg() -> TrainConfig:
    return TrainConfig(epochs_base=1, epochs_finetune=(1, 1), epochs_dual=1, batch_size=2, batch_in_target=2)


def _filled(value: float, seed: int = 0):
    state = init_state(small_config(), seed)
    for arr in (*state.params.values(), *state.bn_mean.values(), *state.bn_var.values()):
        arr[...] = value
    return state


class TestTrainConfig:
    """Tests for schedule validation."""

    def test_defaults(self) -> None:
        c = TrainConfig()
        assert (c.ema_alpha, c.pseudo_threshold, c.batch_in_target, c.batch_cross) == (0.999, 0.5, 3, 1)
        assert (c.epochs_base, c.epochs_finetune, c.epochs_dual, c.batch_size, c.lr) == (30, (5, 5), 20, 2, 1e-3)
        assert c.share_bn

    def test_rejects_overlapping_classes(self) -> None:
        with pytest.raises(InvalidConfigError):
            TrainConfig(base_classes=(0, 1), novel_classes=(1, 2))

    def test_rejects_bad_alpha(self) -> None:
        with pytest.raises(InvalidConfigError):
            TrainConfig(ema_alpha=1.5)


class TestEmaUpdate:
    """Tests for the in-domain teacher update."""

    def test_fixed_point(self) -> None:
        teacher, student = init_state(small_config(), 0), init_state(small_config(), 0)
        before = teacher.parameter_vector()
        ema_update(teacher, student, 0.7)
        assert np.array_equal(teacher.parameter_vector(), before)

    def test_half_alpha_averages(self) -> None:
        teacher = ema_update(_filled(2.0), _filled(4.0), 0.5)
        assert np.all(teacher.parameter_vector() == 3.0)
        assert np.all(teacher.statistics_vector() == 3.0)

    def test_high_alpha_moves_slowly(self) -> None:
        teacher = ema_update(_filled(1.0), _filled(0.0), 0.999)
        np.testing.assert_allclose(teacher.parameter_vector(), 0.999, rtol=1e-12)

    def test_config_mismatch(self) -> None:
        other = init_state(DetectorConfig(num_seeds=16, knn=8, hidden=8, num_proposals=4), 0)
        with pytest.raises(ShapeError):
            ema_update(init_state(small_config(), 0), other, 0.9)

    def test_frozen_teacher_rejected(self) -> None:
        with pytest.raises(FrozenStateError):
            ema_update(freeze(init_state(small_config(), 0)), init_state(small_config(), 0), 0.9)


class TestLabels:
    """Tests for pseudo labels and label mixing."""

    def test_threshold_one_gives_no_labels(self, target_scenes) -> None:
        teacher = freeze(init_state(small_config(), 0))
        assert generate_pseudo_labels(teacher, target_scenes[0], 1.0, (0, 1, 2)) == []

    def test_threshold_zero_keeps_every_proposal(self, target_scenes) -> None:
        cfg = small_config()
        labels = generate_pseudo_labels(freeze(init_state(cfg, 0)), target_scenes[0], 0.0, (0, 1, 2))
        assert len(labels) == cfg.num_proposals
        assert all(b.class_id in (0, 1, 2) for b in labels)

    def test_mixed_labels_identity(self) -> None:
        pseudo = [make_box((1, 0, 0), (1, 1, 1), 0.0, 0)]
        gt = [make_box((0, 2, 0), (1, 2, 1), 0.0, 3), make_box((0, -2, 0), (1, 1, 1), 0.0, 4)]
        cloud = np.random.default_rng(0).normal(size=(10, 3))
        cloud_t, mixed = make_mixed_labels(pseudo, gt, SceneTransform(), cloud)
        assert np.array_equal(cloud_t, cloud)
        assert mixed.boxes == (*pseudo, *gt)
        assert mixed.of(LabelSource.PSEUDO) == tuple(pseudo)
        assert mixed.of(LabelSource.GT) == tuple(gt)

    def test_boxes_keep_their_points_under_random_transforms(self, target_scenes) -> None:
        cfg = TrainConfig(flip_prob=0.5, rot_range=math.pi, scale_range=(0.5, 2.0))
        rng = np.random.default_rng(7)
        for scene in target_scenes:
            for _ in range(10):
                t = draw_scene_transform(rng, cfg)
                cloud_t, mixed = make_mixed_labels([], scene.boxes, t, scene.cloud)
                for box, moved in zip(scene.boxes, mixed.boxes):
                    inside = points_in_box(scene.cloud, box)
                    assert np.array_equal(points_in_box(cloud_t, moved), inside)
                    assert moved.class_id == box.class_id

    def test_mixed_labels_share_the_flip(self) -> None:
        pseudo = [make_box((1, 0.5, 0), (1, 1, 1), 0.0, 0)]
        gt = [make_box((2, -1, 0), (1, 1, 1), 0.0, 3)]
        cloud = np.array([[1.0, 0.5, 0.0], [2.0, -1.0, 0.0]])
        cloud_t, mixed = make_mixed_labels(pseudo, gt, SceneTransform(flip_x=True), cloud)
        np.testing.assert_allclose(cloud_t[:, 0], [-1.0, -2.0])
        assert [b.center[0] for b in mixed.boxes] == [-1.0, -2.0]
        np.testing.assert_allclose(cloud_t, [b.center_array for b in mixed.boxes])


class TestDualTeacherStep:
    """Tests for one dual-teacher optimization step."""

    def _states(self):
        base = init_state(small_config(), 3)
        return copy_state(base), copy_state(base), freeze(base)

    def test_zero_weights_leave_student(self, target_scenes, cfg) -> None:
        student, in_teacher, cross = self._states()
        before = student.parameter_vector()
        breakdown = dual_teacher_step(
            student, in_teacher, cross, DualBatch(tuple(target_scenes[:2])), cfg,
            LossWeights(sup=0.0, dis=0.0, con=0.0),
        )
        assert breakdown.l_total == 0.0
        assert np.array_equal(student.parameter_vector(), before)

    def test_cross_teacher_never_changes(self, target_scenes, source_scenes, cfg) -> None:
        student, in_teacher, cross = self._states()
        before = cross.parameter_vector().copy()
        stats = cross.statistics_vector().copy()
        dual_teacher_step(student, in_teacher, cross, DualBatch(tuple(target_scenes[:2]), (source_scenes[0],)), cfg)
        assert np.array_equal(cross.parameter_vector(), before)
        assert np.array_equal(cross.statistics_vector(), stats)

    def test_in_teacher_follows_ema(self, target_scenes, cfg) -> None:
        student, in_teacher, cross = self._states()
        teacher_before = in_teacher.parameter_vector().copy()
        dual_teacher_step(student, in_teacher, cross, DualBatch(tuple(target_scenes[:2])), cfg)
        expected = cfg.ema_alpha * teacher_before + (1.0 - cfg.ema_alpha) * student.parameter_vector()
        np.testing.assert_allclose(in_teacher.parameter_vector(), expected, rtol=1e-10, atol=1e-14)
        assert not np.array_equal(student.parameter_vector(), teacher_before)

    def test_zero_lr_leaves_student(self, target_scenes) -> None:
        cfg = TrainConfig(lr=0.0, batch_in_target=2)
        student, in_teacher, cross = self._states()
        before = student.parameter_vector()
        dual_teacher_step(student, in_teacher, cross, DualBatch(tuple(target_scenes[:2])), cfg)
        assert np.array_equal(student.parameter_vector(), before)

    def test_breakdown_combines_weights(self, target_scenes, cfg) -> None:
        student, in_teacher, cross = self._states()
        b = dual_teacher_step(student, in_teacher, cross, DualBatch((target_scenes[0],)), cfg)
        assert b.l_total == pytest.approx(10.0 * b.l_sup + 1.0 * b.l_dis + 10.0 * b.l_con)
        assert len(b.transforms) == len(b.supervised_labels) == 1

    def test_empty_batch_rejected(self, cfg) -> None:
        student, in_teacher, cross = self._states()
        with pytest.raises(BatchCompositionError):
            dual_teacher_step(student, in_teacher, cross, DualBatch(()), cfg)

    def test_oversized_batch_rejected(self, target_scenes, cfg) -> None:
        student, in_teacher, cross = self._states()
        with pytest.raises(BatchCompositionError):
            dual_teacher_step(student, in_teacher, cross, DualBatch(tuple(target_scenes[:3])), cfg)


class TestSharedStatistics:
    """Tests for running statistics under statistics-level consistency."""

    def _states(self):
        base = init_state(small_config(), 3)
        return copy_state(base), copy_state(base), freeze(base)

    def test_step_folds_target_moments_into_student(self, target_scenes, cfg) -> None:
        student, in_teacher, cross = self._states()
        before = student.statistics_vector().copy()
        teacher_before = in_teacher.statistics_vector().copy()
        dual_teacher_step(student, in_teacher, cross, DualBatch(tuple(target_scenes[:2])), cfg)
        assert not np.array_equal(student.statistics_vector(), before)
        expected = cfg.ema_alpha * teacher_before + (1.0 - cfg.ema_alpha) * student.statistics_vector()
        np.testing.assert_allclose(in_teacher.statistics_vector(), expected, rtol=1e-10, atol=1e-14)

    def test_step_without_sharing_uses_own_batches(self, target_scenes, cfg) -> None:
        student, in_teacher, cross = self._states()
        before = student.statistics_vector().copy()
        teacher_before = in_teacher.statistics_vector().copy()
        dual_teacher_step(
            student, in_teacher, cross, DualBatch(tuple(target_scenes[:2])), dataclasses.replace(cfg, share_bn=False)
        )
        assert not np.array_equal(student.statistics_vector(), before)
        assert not np.array_equal(in_teacher.statistics_vector(), teacher_before)

    def test_final_student_takes_shared_statistics(self, target_scenes, source_scenes, cfg) -> None:
        result = train_dual_teacher(init_state(small_config(), 0), target_scenes, source_scenes, cfg)
        assert np.array_equal(result.student.statistics_vector(), result.in_teacher.statistics_vector())
        shared = export_bn_stats(result.in_teacher)
        assert all(np.array_equal(result.student.bn_mean[n], shared.mean[n]) for n in shared.mean)

    def test_without_sharing_student_keeps_own_statistics(self, target_scenes, source_scenes, cfg) -> None:
        cfg = dataclasses.replace(cfg, share_bn=False)
        result = train_dual_teacher(init_state(small_config(), 0), target_scenes, source_scenes, cfg)
        assert not np.array_equal(result.student.statistics_vector(), result.in_teacher.statistics_vector())


class TestStages:
    """Tests for the supervised stages and the dual-teacher loop."""

    def test_pretrain_logs_one_record_per_epoch(self, tmp_path: Path, source_scenes, cfg) -> None:
        metrics = MetricsLog(tmp_path / "metrics.jsonl")
        result = pretrain_base(source_scenes, cfg, small_config(), metrics=metrics)
        assert [r.stage for r in result.history] == ["pretrain"]
        assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 1

    def test_pretrain_needs_scenes(self, cfg) -> None:
        with pytest.raises(EmptyCorpusError):
            pretrain_base([], cfg, small_config())

    def test_finetune_without_epochs_is_a_copy(self, source_scenes) -> None:
        state = init_state(small_config(), 0)
        result = finetune_sequential(state, [], [], TrainConfig(epochs_finetune=(0, 0)))
        assert np.array_equal(result.state.parameter_vector(), state.parameter_vector())
        assert result.state is not state
        assert result.stage_log == []

    def test_finetune_runs_both_phases(self, source_scenes, cfg) -> None:
        result = finetune_sequential(init_state(small_config(), 0), source_scenes, source_scenes, cfg)
        assert result.stage_log == ["in_source", "cross"]

    def test_baseline_without_epochs_is_a_copy(self) -> None:
        state = init_state(small_config(), 0)
        result = finetune_baseline(state, [], TrainConfig(epochs_dual=0))
        assert np.array_equal(result.state.parameter_vector(), state.parameter_vector())

    def test_dual_teacher_needs_target_scenes(self, cfg) -> None:
        with pytest.raises(EmptyCorpusError):
            train_dual_teacher(init_state(small_config(), 0), [], [], cfg)

    def test_pretrain_loss_decreases_on_one_scene(self, source_scenes) -> None:
        cfg = TrainConfig(epochs_base=6, batch_size=1, lr=2e-4, scene_augment=False)
        result = pretrain_base(source_scenes[:1], cfg, small_config())
        losses = [r.l_sup for r in result.history]
        assert len(losses) == 6
        assert all(later < earlier for earlier, later in zip(losses, losses[1:])), losses

    def test_fixed_seed_gives_identical_checkpoints(self, source_scenes, target_scenes, cfg) -> None:
        first = pretrain_base(source_scenes, cfg, small_config())
        second = pretrain_base(source_scenes, cfg, small_config())
        assert encode_state(first.state) == encode_state(second.state)
        a = train_dual_teacher(first.state, target_scenes, source_scenes, cfg)
        b = train_dual_teacher(second.state, target_scenes, source_scenes, cfg)
        assert encode_state(a.student) == encode_state(b.student)

    def test_seed_changes_the_checkpoint(self, source_scenes, cfg) -> None:
        first = pretrain_base(source_scenes, cfg, small_config())
        other = pretrain_base(source_scenes, dataclasses.replace(cfg, seed=1), small_config())
        assert encode_state(first.state) != encode_state(other.state)

    def test_vote_weight_zero_skips_vote_regression(self, source_scenes, cfg) -> None:
        cfg = dataclasses.replace(cfg, batch_size=len(source_scenes))
        with_votes = pretrain_base(source_scenes, cfg, small_config())
        without = pretrain_base(source_scenes, cfg, small_config(), LossWeights(vote=0.0))
        assert with_votes.history[0].l_sup > without.history[0].l_sup

    def test_dual_teacher_is_deterministic(self, target_scenes, source_scenes, cfg) -> None:
        state = init_state(small_config(), 0)
        a = train_dual_teacher(state, target_scenes, source_scenes, cfg)
        b = train_dual_teacher(state, target_scenes, source_scenes, cfg)
        assert np.array_equal(a.student.parameter_vector(), b.student.parameter_vector())
        assert a.history == b.history
        assert np.array_equal(a.cross_teacher.parameter_vector(), state.parameter_vector())


class TestRandomness:
    """Tests for per-stage generators and scene transforms."""

    def test_stage_rng_is_reproducible(self) -> None:
        assert stage_rng(3, "train").integers(1 << 30) == stage_rng(3, "train").integers(1 << 30)
        assert stage_rng(3, "train").integers(1 << 30) != stage_rng(3, "pretrain").integers(1 << 30)

    def test_augmentation_off_gives_identity(self) -> None:
        t = draw_scene_transform(np.random.default_rng(0), TrainConfig(scene_augment=False))
        assert t.is_identity()

    def test_drawn_transform_within_ranges(self) -> None:
        cfg = TrainConfig()
        rng = np.random.default_rng(1)
        for _ in range(50):
            t = draw_scene_transform(rng, cfg)
            assert abs(t.rotation_z) <= cfg.rot_range
            assert cfg.scale_range[0] <= t.scale <= cfg.scale_range[1]


@pytest.fixture(scope="module")
def desk_corpus() -> dict[str, list[Scene]]:
    """A small source/target split with augmented corpora, as the pipeline builds it."""
    source = synth_domain(default_source_spec(), 24, np.random.default_rng(100), prefix="source")
    target_full = synth_domain(default_target_spec(), 24, np.random.default_rng(101), prefix="target")
    held_out = synth_domain(default_target_spec(), 12, np.random.default_rng(102), prefix="test")
    target_train = [s.restrict_labels(NOVEL_CLASSES) for s in target_full]
    source_db = build_database(source, BASE_CLASSES)
    paste = PasteConfig()
    return {
        "source": source,
        "target_train": target_train,
        "target_test": held_out,
        "in_source": [s for s, _ in augment_corpus(source, source_db, "in-source", paste, 0)],
        "cross": [s for s, _ in augment_corpus(target_train, source_db, "cross", paste, 0)],
        "cross_held_out": [
            s for s, _ in augment_corpus([h.restrict_labels(NOVEL_CLASSES) for h in held_out], source_db, "cross", paste, 1)
        ],
    }


@pytest.fixture(scope="module")
def desk_models(desk_corpus) -> dict[str, object]:
    cfg = TrainConfig(epochs_base=15, epochs_finetune=(5, 5), epochs_dual=15)
    base = pretrain_base(desk_corpus["source"], cfg).state
    tuned = finetune_sequential(base, desk_corpus["in_source"], desk_corpus["cross"], cfg).state
    baseline = finetune_baseline(tuned, desk_corpus["target_train"], cfg).state
    return {"base": base, "tuned": tuned, "baseline": baseline}


@pytest.mark.slow
class TestDeskCorpus:
    """Training on a small synthetic corpus moves mAP the expected way."""

    def _map(self, state, scenes, part: str) -> float:
        detections = detect_scenes(state, scenes, nms_iou=0.25)
        return getattr(evaluate(detections, scenes, class_partition(), 0.25), f"map_{part}")

    def test_pretraining_learns_base_classes(self, desk_corpus, desk_models) -> None:
        assert self._map(desk_models["base"], desk_corpus["source"][:12], "base") > 0.05

    def test_sequential_finetune_keeps_trained_classes(self, desk_corpus, desk_models) -> None:
        held_out = desk_corpus["cross_held_out"]
        before = self._map(desk_models["base"], held_out, "base")
        after = self._map(desk_models["tuned"], held_out, "base")
        assert after >= before, (before, after)

    def test_baseline_trades_base_for_novel(self, desk_corpus, desk_models) -> None:
        scenes = desk_corpus["target_test"]
        novel = self._map(desk_models["baseline"], scenes, "novel")
        base = self._map(desk_models["baseline"], scenes, "base")
        assert novel > base, (novel, base)
        assert base < self._map(desk_models["tuned"], scenes, "base")
