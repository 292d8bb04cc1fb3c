"""
Copy-Paste Augmentation
=======================
Builds the augmented domains used for training:

    cross      source objects pasted into target scenes (intermediate domain)
    in_source  source objects pasted into source scenes
    in_target  target novel-class objects pasted into target scenes

Each pasted object gets a random scale and z-rotation, is placed in the left
(x < 0) or right (x > 0) half of the scene alternately, and must not overlap
any existing box. Every paste is written to a :class:`TransformRecord` that
replays the augmentation bit-exactly.
"""

from __future__ import annotations

import json
import logging
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import EmptyDatabaseError, InvalidConfigError
from ..geometry import BoundingBox3D, SimilarityTransform, apply_transform, box_iou, points_in_box
from ..telemetry import record_paste
from .gtdb import GtDatabase, GtObject, sample_objects
from .scene import DomainTag, Scene, scene_bounds

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PasteConfig:
    """Copy-paste settings.

    Attributes:
        n_objects_min: Fewest objects pasted per scene.
        n_objects_max: Most objects pasted per scene.
        scale_range: Uniform range of the per-object scale factor.
        rot_range: Per-object z-rotation is drawn from [-rot_range, rot_range] radians.
        max_rejections: Placement attempts per object before it is skipped.
        remove_occluded: Delete scene points inside a pasted box before pasting.
    """

    n_objects_min: int = 1
    n_objects_max: int = 2
    scale_range: tuple[float, float] = (0.9, 1.1)
    rot_range: float = math.radians(10.0)
    max_rejections: int = 20
    remove_occluded: bool = True

    def __post_init__(self) -> None:
        if not 1 <= self.n_objects_min <= self.n_objects_max:
            raise InvalidConfigError(
                f"need 1 <= n_objects_min <= n_objects_max, got {self.n_objects_min}..{self.n_objects_max}",
                stage="augment",
            )
        lo, hi = self.scale_range
        if not 0.0 < lo <= hi:
            raise InvalidConfigError(f"scale_range must be positive and ordered, got {self.scale_range}", stage="augment")
        if self.rot_range < 0.0:
            raise InvalidConfigError("rot_range must be non-negative", stage="augment")
        if self.max_rejections < 1:
            raise InvalidConfigError("max_rejections must be >= 1", stage="augment")


@dataclass(frozen=True)
class PasteEntry:
    """One accepted paste: which object, how it was transformed, where it went."""

    class_id: int
    object_index: int
    scale: float
    rotation_z: float
    translation: tuple[float, float, float]
    removed_points: int

    @property
    def transform(self) -> SimilarityTransform:
        return SimilarityTransform(self.scale, self.rotation_z, self.translation)


@dataclass(frozen=True)
class TransformRecord:
    """Everything needed to replay one scene's augmentation."""

    scene_id: str
    output_tag: DomainTag
    remove_occluded: bool
    entries: tuple[PasteEntry, ...] = field(default_factory=tuple)
    skipped: int = 0

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["output_tag"] = self.output_tag.value
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> TransformRecord:
        entries = tuple(
            PasteEntry(
                class_id=int(e["class_id"]),
                object_index=int(e["object_index"]),
                scale=float(e["scale"]),
                rotation_z=float(e["rotation_z"]),
                translation=tuple(float(v) for v in e["translation"]),  # type: ignore[arg-type]
                removed_points=int(e["removed_points"]),
            )
            for e in payload["entries"]
        )
        return cls(
            scene_id=payload["scene_id"],
            output_tag=DomainTag(payload["output_tag"]),
            remove_occluded=bool(payload["remove_occluded"]),
            entries=entries,
            skipped=int(payload.get("skipped", 0)),
        )


def scene_rng(seed: int, scene_id: str) -> np.random.Generator:
    """Independent generator per (seed, scene_id)."""
    return np.random.default_rng([seed, zlib.crc32(scene_id.encode("utf-8"))])


# ──────────────────────────────────────────────────────────────
# Placement
# ──────────────────────────────────────────────────────────────

def place_object(
    scene: Scene,
    obj: GtObject,
    t: SimilarityTransform,
    rng: np.random.Generator,
    cfg: PasteConfig,
    slot: int = 0,
) -> tuple[float, float, float] | None:
    """Find a collision-free center for ``obj`` after scaling by ``t``.

    Even slots go to the left half (x < 0), odd slots to the right (x > 0).
    The box rests on the scene's lowest point and stays inside the scene's
    xy extents.

    Returns:
        The accepted center, or ``None`` after ``cfg.max_rejections`` failures.
    """
    size = obj.box.size_array * t.scale
    half = size / 2.0
    lo, hi = scene_bounds(scene)
    left = slot % 2 == 0
    if left:
        x_lo, x_hi = lo[0] + half[0], min(0.0, hi[0] - half[0])
    else:
        x_lo, x_hi = max(0.0, lo[0] + half[0]), hi[0] - half[0]
    y_lo, y_hi = lo[1] + half[1], hi[1] - half[1]
    z = lo[2] + half[2]
    if x_hi <= x_lo or y_hi < y_lo:
        return None

    for _ in range(cfg.max_rejections):
        x = float(rng.uniform(x_lo, x_hi))
        y = float(rng.uniform(y_lo, y_hi))
        if (left and x >= 0.0) or (not left and x <= 0.0):
            continue
        candidate = BoundingBox3D((x, y, float(z)), tuple(float(v) for v in size), 0.0, obj.class_id)  # type: ignore[arg-type]
        if all(box_iou(candidate, other) == 0.0 for other in scene.boxes):
            return (x, y, float(z))
    return None


def paste_object(scene: Scene, obj: GtObject, t: SimilarityTransform, remove_occluded: bool) -> tuple[Scene, int]:
    """Paste a box-frame crop moved by ``t``; returns the new scene and removed count."""
    points, box = apply_transform(obj.points, obj.box, t)
    cloud = scene.cloud
    removed = 0
    if remove_occluded:
        inside = points_in_box(cloud, box)
        removed = int(inside.size)
        if removed:
            cloud = np.delete(cloud, inside, axis=0)
    merged = np.concatenate([cloud, points], axis=0)
    return Scene(merged, scene.boxes + (box,), scene.domain_tag, scene.scene_id), removed


def _draw_transform(rng: np.random.Generator, cfg: PasteConfig) -> SimilarityTransform:
    scale = float(rng.uniform(*cfg.scale_range))
    rot = float(rng.uniform(-cfg.rot_range, cfg.rot_range))
    return SimilarityTransform(scale, rot)


def _copy_paste(
    scene: Scene,
    db: GtDatabase,
    cfg: PasteConfig,
    rng: np.random.Generator,
    output_tag: DomainTag,
    mode: str,
) -> tuple[Scene, TransformRecord]:
    if len(db) == 0:
        raise EmptyDatabaseError("cannot paste from an empty ground-truth database", stage="augment")
    k = int(rng.integers(cfg.n_objects_min, cfg.n_objects_max + 1))
    objects = sample_objects(db, k, rng)

    working = scene
    entries: list[PasteEntry] = []
    skipped = 0
    for slot, obj in enumerate(objects):
        t = _draw_transform(rng, cfg)
        position = place_object(working, obj, t, rng, cfg, slot=slot)
        record_paste(mode, accepted=position is not None)
        if position is None:
            skipped += 1
            logger.warning("Skipped paste of class %d into %s: no free space", obj.class_id, scene.scene_id)
            continue
        t = SimilarityTransform(t.scale, t.rotation_z, position)
        working, removed = paste_object(working, obj, t, cfg.remove_occluded)
        class_id, index = db.locate(obj)
        entries.append(PasteEntry(class_id, index, t.scale, t.rotation_z, position, removed))

    out = Scene(working.cloud, working.boxes, output_tag, f"{scene.scene_id}-{output_tag.value}")
    record = TransformRecord(scene.scene_id, output_tag, cfg.remove_occluded, tuple(entries), skipped)
    return out, record


def cross_domain_cp(
    target_scene: Scene, source_db: GtDatabase, cfg: PasteConfig, rng: np.random.Generator
) -> tuple[Scene, TransformRecord]:
    """Paste source-domain objects into a target scene (intermediate domain)."""
    return _copy_paste(target_scene, source_db, cfg, rng, DomainTag.CROSS, "cross")


def in_domain_cp(
    scene: Scene, db: GtDatabase, cfg: PasteConfig, rng: np.random.Generator
) -> tuple[Scene, TransformRecord]:
    """Paste a domain's own objects into its own scene."""
    if scene.domain_tag == DomainTag.SOURCE:
        tag, mode = DomainTag.IN_SOURCE, "in-source"
    elif scene.domain_tag == DomainTag.TARGET:
        tag, mode = DomainTag.IN_TARGET, "in-target"
    else:
        raise ValueError(f"in-domain paste needs a source or target scene, got {scene.domain_tag.value}")
    return _copy_paste(scene, db, cfg, rng, tag, mode)


def replay_record(scene: Scene, db: GtDatabase, record: TransformRecord) -> Scene:
    """Re-apply a recorded augmentation to its input scene."""
    working = scene
    for entry in record.entries:
        obj = db.get(entry.class_id, entry.object_index)
        working, _ = paste_object(working, obj, entry.transform, record.remove_occluded)
    tag = record.output_tag
    return Scene(working.cloud, working.boxes, tag, f"{scene.scene_id}-{tag.value}")


# ──────────────────────────────────────────────────────────────
# Corpus helpers
# ──────────────────────────────────────────────────────────────

AUGMENT_MODES = ("cross", "in-source", "in-target")


def augment_corpus(
    scenes: Sequence[Scene],
    db: GtDatabase,
    mode: str,
    cfg: PasteConfig,
    seed: int,
) -> list[tuple[Scene, TransformRecord]]:
    """Augment every scene with its own (seed, scene_id) generator."""
    if mode not in AUGMENT_MODES:
        raise InvalidConfigError(f"unknown augment mode '{mode}'", stage="augment")
    results = []
    for scene in scenes:
        rng = scene_rng(seed, f"{mode}/{scene.scene_id}")
        if mode == "cross":
            results.append(cross_domain_cp(scene, db, cfg, rng))
        else:
            results.append(in_domain_cp(scene, db, cfg, rng))
    pasted = sum(len(r.entries) for _, r in results)
    skipped = sum(r.skipped for _, r in results)
    logger.info("Augmented %d scenes (%s): %d objects pasted, %d skipped", len(results), mode, pasted, skipped)
    return results


def save_records(records: Sequence[TransformRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    return path


def load_records(path: str | Path) -> list[TransformRecord]:
    with Path(path).open(encoding="utf-8") as f:
        return [TransformRecord.from_dict(json.loads(line)) for line in f if line.strip()]
