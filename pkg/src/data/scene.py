"""
Scene Types
===========
A labeled point-cloud scene tagged with the domain it belongs to.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

from ..geometry import BoundingBox3D, PointCloud, as_cloud


class DomainTag(str, Enum):
    SOURCE = "source"
    TARGET = "target"
    CROSS = "cross"
    IN_SOURCE = "in_source"
    IN_TARGET = "in_target"


# Stable on-disk codes; never reorder.
DOMAIN_CODES: dict[DomainTag, int] = {
    DomainTag.SOURCE: 0,
    DomainTag.TARGET: 1,
    DomainTag.CROSS: 2,
    DomainTag.IN_SOURCE: 3,
    DomainTag.IN_TARGET: 4,
}


@dataclass(frozen=True, eq=False)
class Scene:
    """One point cloud with its ground-truth boxes.

    Attributes:
        cloud: ``(P, 3)`` float64 points.
        boxes: Ground-truth boxes.
        domain_tag: Which domain (or augmented domain) the scene belongs to.
        scene_id: Identifier, unique within a corpus.
    """

    cloud: PointCloud
    boxes: tuple[BoundingBox3D, ...] = field(default_factory=tuple)
    domain_tag: DomainTag = DomainTag.SOURCE
    scene_id: str = "scene"

    def __post_init__(self) -> None:
        object.__setattr__(self, "cloud", as_cloud(self.cloud))
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "domain_tag", DomainTag(self.domain_tag))

    @property
    def num_points(self) -> int:
        return int(self.cloud.shape[0])

    def class_ids(self) -> set[int]:
        return {b.class_id for b in self.boxes}

    def with_boxes(self, boxes: Iterable[BoundingBox3D]) -> Scene:
        return Scene(self.cloud, tuple(boxes), self.domain_tag, self.scene_id)

    def restrict_labels(self, classes: Iterable[int]) -> Scene:
        """Copy of the scene keeping only boxes whose class is in ``classes``."""
        keep = set(classes)
        return self.with_boxes(b for b in self.boxes if b.class_id in keep)

    def equals(self, other: Scene) -> bool:
        """Bit-exact equality of points, boxes, tag and id."""
        return (
            self.scene_id == other.scene_id
            and self.domain_tag == other.domain_tag
            and self.cloud.shape == other.cloud.shape
            and self.cloud.tobytes() == other.cloud.tobytes()
            and self.boxes == other.boxes
        )


def scene_bounds(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned (min, max) over the scene's points."""
    if scene.num_points == 0:
        zero = np.zeros(3)
        return zero, zero
    return scene.cloud.min(axis=0), scene.cloud.max(axis=0)
