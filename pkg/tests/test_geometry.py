"""
Geometry Tests
==============
Tests for boxes, similarity transforms, point-in-box and box IoU.
"""

import math

import numpy as np
import pytest

from src.errors import InvalidTransformError
from src.geometry import (
    BoundingBox3D,
    SceneTransform,
    SimilarityTransform,
    apply_transform,
    box_iou,
    center_distance_sq,
    make_box,
    points_in_box,
    wrap_heading,
)


def _unit_box(center=(0.0, 0.0, 0.0)) -> BoundingBox3D:
    return make_box(center, (1.0, 1.0, 1.0))


def _monte_carlo_iou(a: BoundingBox3D, b: BoundingBox3D, n: int, rng: np.random.Generator) -> float:
    a_min, a_max = a.extents()
    b_min, b_max = b.extents()
    lo, hi = np.minimum(a_min, b_min), np.maximum(a_max, b_max)
    pts = rng.uniform(lo, hi, size=(n, 3))
    in_a = np.all((pts >= a_min) & (pts <= a_max), axis=1)
    in_b = np.all((pts >= b_min) & (pts <= b_max), axis=1)
    union = np.count_nonzero(in_a | in_b)
    return np.count_nonzero(in_a & in_b) / union if union else 0.0


class TestBoundingBox:
    """Tests for box construction and validation."""

    def test_rejects_non_positive_size(self) -> None:
        with pytest.raises(ValueError):
            make_box((0, 0, 0), (1.0, 0.0, 1.0))

    def test_rejects_heading_out_of_range(self) -> None:
        with pytest.raises(ValueError):
            BoundingBox3D((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), heading=4.0)

    def test_rejects_negative_class(self) -> None:
        with pytest.raises(ValueError):
            make_box((0, 0, 0), (1, 1, 1), class_id=-1)

    def test_box_is_frozen(self) -> None:
        box = _unit_box()
        with pytest.raises(AttributeError):
            box.heading = 1.0  # type: ignore[misc]

    def test_wrap_heading_range(self) -> None:
        for angle in np.linspace(-10.0, 10.0, 41):
            wrapped = wrap_heading(float(angle))
            assert -math.pi < wrapped <= math.pi
        assert wrap_heading(math.pi) == math.pi
        assert wrap_heading(-math.pi) == math.pi


class TestApplyTransform:
    """Tests for object-crop similarity transforms."""

    def test_identity_is_bit_exact(self) -> None:
        rng = np.random.default_rng(0)
        box = make_box((0.3, -0.2, 0.5), (1.0, 0.8, 0.6), 0.4, 2)
        pts = rng.uniform(-0.3, 0.3, size=(20, 3)) + box.center_array
        moved, new_box = apply_transform(pts, box, SimilarityTransform())
        assert moved.tobytes() == pts.tobytes()
        assert new_box == box

    def test_pure_scaling(self) -> None:
        moved, box = apply_transform(np.array([[0.4, 0.0, 0.0]]), _unit_box(), SimilarityTransform(scale=2.0))
        assert box.size == (2.0, 2.0, 2.0)
        np.testing.assert_allclose(moved, [[0.8, 0.0, 0.0]])

    def test_quarter_turn(self) -> None:
        moved, box = apply_transform(
            np.array([[0.3, 0.0, 0.0]]), _unit_box(), SimilarityTransform(rotation_z=math.pi / 2)
        )
        np.testing.assert_allclose(moved, [[0.0, 0.3, 0.0]], atol=1e-12)
        assert box.heading == pytest.approx(math.pi / 2)

    def test_translation_moves_center(self) -> None:
        _, box = apply_transform(np.zeros((1, 3)), _unit_box(), SimilarityTransform(translation=(1.0, 2.0, 3.0)))
        assert box.center == (1.0, 2.0, 3.0)

    def test_non_positive_scale_raises(self) -> None:
        with pytest.raises(InvalidTransformError):
            apply_transform(np.zeros((1, 3)), _unit_box(), SimilarityTransform(scale=0.0))

    def test_preserves_count_and_membership(self) -> None:
        rng = np.random.default_rng(7)
        for _ in range(50):
            box = make_box(rng.uniform(-2, 2, 3), rng.uniform(0.2, 1.5, 3), rng.uniform(-3, 3), 1)
            local = rng.uniform(-0.5, 0.5, size=(30, 3)) * box.size_array
            c, s = math.cos(box.heading), math.sin(box.heading)
            rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            pts = local @ rot.T + box.center_array
            assert len(points_in_box(pts, box)) == 30
            t = SimilarityTransform(rng.uniform(0.5, 2.0), rng.uniform(-1, 1), tuple(rng.uniform(-1, 1, 3)))
            moved, new_box = apply_transform(pts, box, t)
            assert len(moved) == 30
            assert len(points_in_box(moved, new_box)) == 30

    def test_inverse_recovers_input(self) -> None:
        rng = np.random.default_rng(3)
        box = make_box((0.5, 0.5, 0.5), (1.0, 2.0, 0.5), 0.2, 0)
        pts = rng.uniform(-0.2, 0.2, size=(15, 3)) + box.center_array
        t = SimilarityTransform(1.7, 0.6, (0.3, -0.8, 0.1))
        moved, moved_box = apply_transform(pts, box, t)
        back, back_box = apply_transform(moved, moved_box, t.inverse())
        np.testing.assert_allclose(back, pts, atol=1e-9)
        np.testing.assert_allclose(back_box.center_array, box.center_array, atol=1e-9)
        np.testing.assert_allclose(back_box.size_array, box.size_array, atol=1e-9)
        assert back_box.heading == pytest.approx(box.heading, abs=1e-9)


class TestPointsInBox:
    """Tests for heading-aware point membership."""

    def test_unit_box(self) -> None:
        idx = points_in_box(np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]), _unit_box())
        assert idx.tolist() == [0]

    def test_rotated_box(self) -> None:
        box = make_box((0, 0, 0), (2.0, 0.2, 1.0), math.pi / 2)
        assert points_in_box(np.array([[0.0, 0.9, 0.0]]), box).tolist() == [0]
        assert points_in_box(np.array([[0.9, 0.0, 0.0]]), box).tolist() == []

    def test_empty_cloud(self) -> None:
        assert points_in_box(np.zeros((0, 3)), _unit_box()).size == 0

    def test_face_points_are_inside(self) -> None:
        idx = points_in_box(np.array([[0.5, 0.5, -0.5]]), _unit_box())
        assert idx.tolist() == [0]


class TestBoxIou:
    """Tests for axis-aligned box IoU."""

    def test_identical_boxes(self) -> None:
        box = make_box((0.1, 0.2, 0.3), (0.7, 1.3, 0.9))
        assert box_iou(box, box) == 1.0

    def test_disjoint_boxes(self) -> None:
        assert box_iou(_unit_box(), _unit_box((2.0, 0.0, 0.0))) == 0.0

    def test_touching_faces_do_not_overlap(self) -> None:
        assert box_iou(_unit_box(), _unit_box((1.0, 0.0, 0.0))) == 0.0

    def test_half_offset(self) -> None:
        assert box_iou(_unit_box(), _unit_box((0.5, 0.0, 0.0))) == pytest.approx(1.0 / 3.0)

    def test_symmetric_and_bounded(self) -> None:
        rng = np.random.default_rng(11)
        for _ in range(200):
            a = make_box(rng.uniform(-1, 1, 3), rng.uniform(0.1, 2, 3))
            b = make_box(rng.uniform(-1, 1, 3), rng.uniform(0.1, 2, 3))
            assert box_iou(a, b) == box_iou(b, a)
            assert 0.0 <= box_iou(a, b) <= 1.0

    def test_matches_monte_carlo_volume(self) -> None:
        rng = np.random.default_rng(5)
        checked = 0
        while checked < 5:
            a = make_box(rng.uniform(-0.5, 0.5, 3), rng.uniform(0.5, 1.5, 3))
            b = make_box(rng.uniform(-0.5, 0.5, 3), rng.uniform(0.5, 1.5, 3))
            iou = box_iou(a, b)
            if iou == 0.0:
                continue
            assert abs(iou - _monte_carlo_iou(a, b, 1_000_000, rng)) < 0.02
            checked += 1


class TestCenterDistance:
    """Tests for squared center distance."""

    @pytest.mark.parametrize(
        "a, b, expected",
        [
            ((0, 0, 0), (0, 0, 0), 0.0),
            ((0, 0, 0), (1, 2, 2), 9.0),
            ((0, 0, 0), (0.3, 0.4, 0), 0.25),
        ],
    )
    def test_examples(self, a, b, expected) -> None:
        assert center_distance_sq(_unit_box(a), _unit_box(b)) == pytest.approx(expected)


class TestSceneTransform:
    """Tests for scene-level flip, rotation and scale."""

    def test_identity_returns_equal_copy(self) -> None:
        pts = np.arange(12, dtype=float).reshape(4, 3)
        out = SceneTransform().apply_points(pts)
        assert out.tobytes() == pts.tobytes()
        assert out is not pts

    def test_flip_negates_x(self) -> None:
        box = make_box((0.5, 1.0, 0.2), (0.4, 0.6, 0.4), 0.0, 3)
        flipped = SceneTransform(flip_x=True).apply_box(box)
        assert flipped.center == (-0.5, 1.0, 0.2)
        assert flipped.size == box.size
        assert flipped.class_id == 3

    def test_scale_scales_sizes(self) -> None:
        box = make_box((1.0, 0.0, 0.0), (1.0, 2.0, 3.0))
        scaled = SceneTransform(scale=1.5).apply_box(box)
        np.testing.assert_allclose(scaled.size_array, [1.5, 3.0, 4.5])
        np.testing.assert_allclose(scaled.center_array, [1.5, 0.0, 0.0])
