"""
Ground-Truth Database Tests
===========================
Tests for object extraction, sampling and persistence.
"""

from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from src.data.gtdb import build_database, load_database, sample_objects, save_database
from src.data.scene import DomainTag, Scene
from src.errors import CorruptFileError, EmptyDatabaseError, InvalidConfigError
from src.geometry import BoundingBox3D, make_box, points_in_box


def _object_points(box: BoundingBox3D, n: int, rng: np.random.Generator) -> np.ndarray:
    return box.center_array + rng.uniform(-0.45, 0.45, size=(n, 3)) * box.size_array


def _scene(specs: list[tuple[tuple[float, float, float], int, int]], seed: int, scene_id: str) -> Scene:
    """Scene with one box per (center, class_id, point count) spec plus far-away floor points."""
    rng = np.random.default_rng(seed)
    boxes, parts = [], [rng.uniform(8.0, 9.0, size=(10, 3))]
    for center, class_id, n in specs:
        box = make_box(center, (0.5, 0.5, 0.5), 0.0, class_id)
        boxes.append(box)
        parts.append(_object_points(box, n, rng))
    return Scene(np.concatenate(parts), tuple(boxes), DomainTag.SOURCE, scene_id)


class TestBuildDatabase:
    """Tests for build_database."""

    def test_single_object(self) -> None:
        db = build_database([_scene([((0, 0, 0), 1, 50)], 0, "s0")], classes={1}, min_points=5)
        assert len(db) == 1
        obj = db.objects(1)[0]
        assert obj.num_points == 50
        assert obj.box.center == (0.0, 0.0, 0.0)
        assert obj.source_scene_id == "s0"

    def test_sparse_box_is_skipped(self) -> None:
        db = build_database([_scene([((0, 0, 0), 1, 3)], 0, "s0")], classes={1}, min_points=5)
        assert len(db) == 0

    def test_empty_class_set_raises(self) -> None:
        with pytest.raises(InvalidConfigError):
            build_database([], classes=set(), min_points=5)

    def test_counts_match_enumeration(self) -> None:
        scenes = [
            _scene([((0, 0, 0), 0, 20), ((2, 0, 0), 1, 4), ((-2, 0, 0), 1, 30)], 1, "a"),
            _scene([((0, 2, 0), 0, 6), ((0, -2, 0), 2, 40), ((2, 2, 0), 1, 12)], 2, "b"),
        ]
        db = build_database(scenes, classes={0, 1}, min_points=5)
        expected: Counter[int] = Counter()
        for scene in scenes:
            for box in scene.boxes:
                if box.class_id in {0, 1} and len(points_in_box(scene.cloud, box)) >= 5:
                    expected[box.class_id] += 1
        assert db.counts() == {0: expected[0], 1: expected[1]}

    def test_objects_lie_inside_their_boxes(self) -> None:
        db = build_database([_scene([((1, 1, 0), 0, 25), ((-1, -1, 0), 2, 25)], 4, "s")], {0, 2})
        for obj in db.objects():
            assert len(points_in_box(obj.points, obj.box)) == obj.num_points

    def test_scene_permutation_preserves_multiset(self) -> None:
        scenes = [_scene([((0, 0, 0), 0, 10 + i)], i, f"s{i}") for i in range(4)]
        forward = build_database(scenes, {0})
        backward = build_database(scenes[::-1], {0})
        key = lambda o: (o.source_scene_id, o.points.tobytes())  # noqa: E731
        assert sorted(map(key, forward.objects())) == sorted(map(key, backward.objects()))


class TestSampleObjects:
    """Tests for sample_objects."""

    def _db(self, n_objects: int):
        scenes = [_scene([((0, 0, 0), 0, 10)], i, f"s{i}") for i in range(n_objects)]
        return build_database(scenes, {0})

    def test_single_object(self) -> None:
        db = self._db(1)
        assert sample_objects(db, 1, np.random.default_rng(0))[0] is db.objects()[0]

    def test_same_seed_same_sequence(self) -> None:
        db = self._db(4)
        a = sample_objects(db, 3, np.random.default_rng(9))
        b = sample_objects(db, 3, np.random.default_rng(9))
        assert [id(o) for o in a] == [id(o) for o in b]

    def test_no_repeats_within_call(self) -> None:
        db = self._db(4)
        picks = sample_objects(db, 4, np.random.default_rng(1))
        assert len({id(o) for o in picks}) == 4

    def test_uniform_frequency(self) -> None:
        db = self._db(4)
        rng = np.random.default_rng(2)
        counts = Counter(id(sample_objects(db, 1, rng)[0]) for _ in range(10_000))
        for count in counts.values():
            assert abs(count / 10_000 - 0.25) < 0.05
        assert len(counts) == 4

    def test_empty_database_raises(self) -> None:
        db = build_database([], {0})
        with pytest.raises(EmptyDatabaseError):
            sample_objects(db, 1, np.random.default_rng(0))


class TestPersistence:
    """Tests for save_database / load_database."""

    def test_round_trip(self, tmp_path: Path) -> None:
        scenes = [
            _scene([((0, 0, 0), 0, 12), ((2, 0, 0), 1, 9)], 5, "a"),
            _scene([((0, 2, 0), 1, 15)], 6, "b"),
        ]
        db = build_database(scenes, {0, 1})
        save_database(db, tmp_path)
        loaded = load_database(tmp_path)
        assert loaded.counts() == db.counts()
        assert loaded.min_points == db.min_points
        assert all(a.equals(b) for a, b in zip(db.objects(), loaded.objects()))

    def test_missing_index_raises(self, tmp_path: Path) -> None:
        with pytest.raises(CorruptFileError):
            load_database(tmp_path)
