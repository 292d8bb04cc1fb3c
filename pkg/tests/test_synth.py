"""
Synthetic Domain Tests
======================
Tests for the two-domain scene generator.
"""

import itertools

import numpy as np
import pytest

from src.data.scene import DomainTag
from src.data.synth import (
    BASE_CLASSES,
    NOVEL_CLASSES,
    ClassSpec,
    DomainSpec,
    default_source_spec,
    default_target_spec,
    synth_domain,
)
from src.errors import GenerationError, InvalidConfigError
from src.geometry import box_iou, points_in_box


def _mean_volumes(spec: DomainSpec, n: int, seed: int) -> dict[int, float]:
    scenes = synth_domain(spec, n, np.random.default_rng(seed))
    by_class: dict[int, list[float]] = {}
    for box in (b for s in scenes for b in s.boxes):
        by_class.setdefault(box.class_id, []).append(box.volume)
    return {c: float(np.mean(v)) for c, v in by_class.items()}


class TestSynthDomain:
    """Tests for synth_domain."""

    def test_fixed_size_single_class(self) -> None:
        cls = ClassSpec(0, "crate", "box", (0.4, 0.6, 0.5), spread=0.0)
        spec = DomainSpec(DomainTag.SOURCE, (cls,), objects_per_scene=(1, 1))
        (scene,) = synth_domain(spec, 1, np.random.default_rng(0))
        assert len(scene.boxes) == 1
        np.testing.assert_allclose(scene.boxes[0].size_array, [0.4, 0.6, 0.5])

    def test_boxes_never_overlap(self) -> None:
        for scene in synth_domain(default_target_spec(), 20, np.random.default_rng(1)):
            for a, b in itertools.combinations(scene.boxes, 2):
                assert box_iou(a, b) == 0.0

    def test_objects_have_points(self) -> None:
        for scene in synth_domain(default_source_spec(), 10, np.random.default_rng(2)):
            assert 2 <= len(scene.boxes) <= 5
            for box in scene.boxes:
                assert len(points_in_box(scene.cloud, box)) >= 24

    def test_source_has_base_classes_only(self) -> None:
        for scene in synth_domain(default_source_spec(), 10, np.random.default_rng(3)):
            assert scene.class_ids() <= set(BASE_CLASSES)
            assert scene.domain_tag == DomainTag.SOURCE

    def test_deterministic(self) -> None:
        a = synth_domain(default_target_spec(), 3, np.random.default_rng(4))
        b = synth_domain(default_target_spec(), 3, np.random.default_rng(4))
        assert all(x.equals(y) for x, y in zip(a, b))

    def test_scene_ids(self) -> None:
        scenes = synth_domain(default_source_spec(), 2, np.random.default_rng(0), prefix="src")
        assert [s.scene_id for s in scenes] == ["src-0000", "src-0001"]

    def test_size_shift_scales_volume(self) -> None:
        base_only = tuple(c for c in default_target_spec().classes if c.class_id in BASE_CLASSES)
        source = DomainSpec(DomainTag.SOURCE, base_only)
        target = DomainSpec(DomainTag.TARGET, base_only, size_multiplier={c: 1.3 for c in BASE_CLASSES})
        src_volumes = _mean_volumes(source, 200, 5)
        tgt_volumes = _mean_volumes(target, 200, 5)
        for class_id in BASE_CLASSES:
            assert tgt_volumes[class_id] / src_volumes[class_id] == pytest.approx(1.3**3, rel=0.10)

    def test_size_shift_is_monotone(self) -> None:
        classes = default_source_spec().classes
        volumes = [
            _mean_volumes(DomainSpec(DomainTag.TARGET, classes, size_multiplier={c: m for c in BASE_CLASSES}), 60, 6)
            for m in (0.9, 1.1, 1.3)
        ]
        for class_id in BASE_CLASSES:
            per_class = [v[class_id] for v in volumes]
            assert per_class == sorted(per_class)

    def test_target_contains_novel_classes(self) -> None:
        scenes = synth_domain(default_target_spec(), 30, np.random.default_rng(7))
        seen = set().union(*(s.class_ids() for s in scenes))
        assert seen & set(NOVEL_CLASSES)


class TestDomainSpecValidation:
    """Tests for spec validation and infeasible placements."""

    def test_rejects_non_positive_size(self) -> None:
        with pytest.raises(InvalidConfigError):
            ClassSpec(0, "bad", "box", (0.0, 1.0, 1.0))

    def test_rejects_empty_class_list(self) -> None:
        with pytest.raises(InvalidConfigError):
            DomainSpec(DomainTag.SOURCE, ())

    def test_infeasible_placement_raises(self) -> None:
        huge = ClassSpec(0, "wall", "box", (3.0, 3.0, 1.0), spread=0.0)
        spec = DomainSpec(DomainTag.SOURCE, (huge,), objects_per_scene=(2, 2), max_retries=5)
        with pytest.raises(GenerationError):
            synth_domain(spec, 1, np.random.default_rng(0))
