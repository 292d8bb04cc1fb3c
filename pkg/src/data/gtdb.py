"""
Ground-Truth Database
=====================
Harvests object crops (points + box) from labeled scenes and samples them
for copy-paste augmentation.

Crops are stored in their box frame: the box center sits at the origin and
points are expressed relative to it. On disk the database is a directory with
one scene file per object plus ``index.json`` mapping class ids to files.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import CorruptFileError, EmptyDatabaseError, InvalidConfigError
from ..geometry import BoundingBox3D, PointCloud, make_box, points_in_box
from .scene import DomainTag, Scene
from .scene_io import load_scene, save_scene

logger = logging.getLogger(__name__)

DEFAULT_MIN_POINTS = 5
INDEX_FILE = "index.json"


@dataclass(frozen=True, eq=False)
class GtObject:
    """One object crop in box-frame coordinates."""

    points: PointCloud
    box: BoundingBox3D
    source_scene_id: str
    domain_tag: DomainTag = DomainTag.SOURCE

    @property
    def class_id(self) -> int:
        return self.box.class_id

    @property
    def num_points(self) -> int:
        return int(self.points.shape[0])

    def to_scene(self, object_id: str) -> Scene:
        return Scene(self.points, (self.box,), self.domain_tag, object_id)

    def equals(self, other: GtObject) -> bool:
        return (
            self.box == other.box
            and self.source_scene_id == other.source_scene_id
            and self.points.tobytes() == other.points.tobytes()
        )


class GtDatabase:
    """Immutable per-class collection of :class:`GtObject` crops."""

    def __init__(self, objects: Iterable[GtObject], classes: Iterable[int], min_points: int) -> None:
        self.classes: tuple[int, ...] = tuple(sorted(set(classes)))
        self.min_points = min_points
        grouped: dict[int, list[GtObject]] = {c: [] for c in self.classes}
        for obj in objects:
            grouped[obj.class_id].append(obj)
        self._by_class = {c: tuple(objs) for c, objs in grouped.items()}
        # flat order: class ascending, then insertion order
        self._flat = tuple(obj for c in self.classes for obj in self._by_class[c])

    def __len__(self) -> int:
        return len(self._flat)

    def objects(self, class_id: int | None = None) -> tuple[GtObject, ...]:
        if class_id is None:
            return self._flat
        return self._by_class.get(class_id, ())

    def counts(self) -> dict[int, int]:
        return {c: len(objs) for c, objs in self._by_class.items()}

    def get(self, class_id: int, index: int) -> GtObject:
        return self._by_class[class_id][index]

    def locate(self, obj: GtObject) -> tuple[int, int]:
        """(class_id, index within class) of a stored object."""
        for i, candidate in enumerate(self._by_class[obj.class_id]):
            if candidate is obj:
                return obj.class_id, i
        raise KeyError("object is not stored in this database")


# ──────────────────────────────────────────────────────────────
# Operations
# ──────────────────────────────────────────────────────────────

def extract_object(scene: Scene, box: BoundingBox3D) -> GtObject:
    """Crop the points inside ``box`` and re-express them in the box frame."""
    idx = points_in_box(scene.cloud, box)
    local = scene.cloud[idx] - box.center_array
    local_box = make_box((0.0, 0.0, 0.0), box.size, box.heading, box.class_id)
    return GtObject(local, local_box, scene.scene_id, scene.domain_tag)


def build_database(
    scenes: Sequence[Scene],
    classes: Iterable[int],
    min_points: int = DEFAULT_MIN_POINTS,
) -> GtDatabase:
    """Extract every qualifying labeled object, in scene then box order.

    Raises:
        InvalidConfigError: If ``classes`` is empty.
    """
    class_set = set(classes)
    if not class_set:
        raise InvalidConfigError("ground-truth database needs at least one class", stage="gtdb")
    objects: list[GtObject] = []
    skipped = 0
    for scene in scenes:
        for box in scene.boxes:
            if box.class_id not in class_set:
                continue
            obj = extract_object(scene, box)
            if obj.num_points < min_points:
                skipped += 1
                continue
            objects.append(obj)
    db = GtDatabase(objects, class_set, min_points)
    logger.info(
        "Built ground-truth database: %d objects %s (%d sparse boxes skipped)",
        len(db), db.counts(), skipped,
    )
    return db


def sample_objects(db: GtDatabase, n: int, rng: np.random.Generator) -> list[GtObject]:
    """Draw ``n`` objects uniformly; without replacement when ``n <= len(db)``.

    Raises:
        EmptyDatabaseError: If the database holds no objects.
    """
    if len(db) == 0:
        raise EmptyDatabaseError("cannot sample from an empty ground-truth database")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    pool = db.objects()
    picks = rng.choice(len(pool), size=n, replace=n > len(pool))
    return [pool[int(i)] for i in picks]


# ──────────────────────────────────────────────────────────────
# Persistence
# ──────────────────────────────────────────────────────────────

def save_database(db: GtDatabase, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index: dict[str, list[dict[str, str]]] = {}
    for class_id in db.classes:
        entries = []
        for i, obj in enumerate(db.objects(class_id)):
            name = f"class{class_id:03d}_{i:05d}.scene"
            save_scene(obj.to_scene(f"class{class_id:03d}_{i:05d}"), directory / name)
            entries.append({"file": name, "source_scene_id": obj.source_scene_id})
        index[str(class_id)] = entries
    payload = {"min_points": db.min_points, "classes": index}
    path = directory / INDEX_FILE
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("Saved ground-truth database (%d objects) to %s", len(db), directory)
    return path


def load_database(directory: str | Path) -> GtDatabase:
    directory = Path(directory)
    try:
        payload = json.loads((directory / INDEX_FILE).read_text(encoding="utf-8"))
        index = payload["classes"]
        min_points = int(payload["min_points"])
    except (OSError, ValueError, KeyError) as e:
        raise CorruptFileError(f"unreadable database index in {directory}: {e}", stage="gtdb") from e
    objects: list[GtObject] = []
    for class_key in sorted(index, key=int):
        for entry in index[class_key]:
            scene = load_scene(directory / entry["file"])
            if len(scene.boxes) != 1 or scene.boxes[0].class_id != int(class_key):
                raise CorruptFileError(f"object file {entry['file']} does not match its index entry")
            objects.append(GtObject(scene.cloud, scene.boxes[0], entry["source_scene_id"], scene.domain_tag))
    return GtDatabase(objects, (int(k) for k in index), min_points)
