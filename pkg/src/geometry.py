"""
Geometry Module
===============
Core 3D types shared by every stage: point clouds, oriented boxes,
similarity transforms, point-in-box tests and axis-aligned box IoU.

Point clouds are plain ``(P, 3)`` float64 NumPy arrays. Boxes are immutable
dataclasses so they can be hashed, compared and serialized bit-exactly.
All functions here are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidTransformError

Point3 = tuple[float, float, float]
PointCloud = np.ndarray

# Points within this distance outside a face still count as on the face.
FACE_TOLERANCE = 1e-9


def as_cloud(points: np.ndarray | list) -> PointCloud:
    """Coerce input to a finite ``(P, 3)`` float64 array."""
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.size == 0:
        return np.zeros((0, 3), dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ValueError(f"point cloud must have shape (P, 3), got {cloud.shape}")
    if not np.all(np.isfinite(cloud)):
        raise ValueError("point cloud contains non-finite coordinates")
    return cloud


def wrap_heading(heading: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return math.pi - ((math.pi - heading) % (2.0 * math.pi))


def rotation_z(angle: float) -> np.ndarray:
    """3x3 rotation matrix about the vertical axis."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ──────────────────────────────────────────────────────────────
# Types
# ──────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class BoundingBox3D:
    """Oriented 3D box with a class label.

    Attributes:
        center: Box center (x, y, z).
        size: (width, length, height), each strictly positive.
        heading: Rotation about +z in radians, in (-pi, pi].
        class_id: Non-negative class index.
    """

    center: Point3
    size: Point3
    heading: float = 0.0
    class_id: int = 0

    def __post_init__(self) -> None:
        if any(not math.isfinite(v) for v in (*self.center, *self.size, self.heading)):
            raise ValueError("box fields must be finite")
        if any(v <= 0.0 for v in self.size):
            raise ValueError(f"box size must be strictly positive, got {self.size}")
        if not (-math.pi < self.heading <= math.pi):
            raise ValueError(f"box heading {self.heading} outside (-pi, pi]")
        if self.class_id < 0:
            raise ValueError(f"class_id must be >= 0, got {self.class_id}")

    @property
    def center_array(self) -> np.ndarray:
        return np.array(self.center, dtype=np.float64)

    @property
    def size_array(self) -> np.ndarray:
        return np.array(self.size, dtype=np.float64)

    @property
    def volume(self) -> float:
        return float(np.prod(self.size_array))

    def extents(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned (min, max) corners with heading ignored."""
        c, half = self.center_array, self.size_array / 2.0
        return c - half, c + half

    def with_class(self, class_id: int) -> BoundingBox3D:
        return replace(self, class_id=class_id)


def make_box(center, size, heading: float = 0.0, class_id: int = 0) -> BoundingBox3D:
    """Build a box from array-likes, converting to plain floats."""
    return BoundingBox3D(
        center=tuple(float(v) for v in center),  # type: ignore[arg-type]
        size=tuple(float(v) for v in size),  # type: ignore[arg-type]
        heading=float(heading),
        class_id=int(class_id),
    )


@dataclass(frozen=True)
class SimilarityTransform:
    """Uniform scale and z-rotation about a box center, then translation."""

    scale: float = 1.0
    rotation_z: float = 0.0
    translation: Point3 = (0.0, 0.0, 0.0)

    def inverse(self) -> SimilarityTransform:
        """Transform undoing this one when applied about the transformed box."""
        if self.scale <= 0.0:
            raise InvalidTransformError(f"scale must be positive, got {self.scale}")
        return SimilarityTransform(
            scale=1.0 / self.scale,
            rotation_z=-self.rotation_z,
            translation=tuple(-v for v in self.translation),  # type: ignore[arg-type]
        )


@dataclass(frozen=True)
class SceneTransform:
    """Scene-level augmentation: optional flip over x, z-rotation, uniform scale.

    Applied about the scene origin in the order flip, rotate, scale.
    """

    flip_x: bool = False
    rotation_z: float = 0.0
    scale: float = 1.0

    def _matrix(self) -> np.ndarray:
        flip = np.diag([-1.0 if self.flip_x else 1.0, 1.0, 1.0])
        return self.scale * (rotation_z(self.rotation_z) @ flip)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        if self.is_identity():
            return np.array(points, dtype=np.float64, copy=True)
        return np.asarray(points, dtype=np.float64) @ self._matrix().T

    def apply_sizes(self, sizes: np.ndarray) -> np.ndarray:
        return np.asarray(sizes, dtype=np.float64) * self.scale

    def apply_box(self, box: BoundingBox3D) -> BoundingBox3D:
        if self.is_identity():
            return box
        center = self.apply_points(box.center_array[None, :])[0]
        heading = math.pi - box.heading if self.flip_x else box.heading
        return make_box(
            center,
            self.apply_sizes(box.size_array),
            wrap_heading(heading + self.rotation_z),
            box.class_id,
        )

    def is_identity(self) -> bool:
        return not self.flip_x and self.rotation_z == 0.0 and self.scale == 1.0


# ──────────────────────────────────────────────────────────────
# Operations
# ──────────────────────────────────────────────────────────────

def apply_transform(
    pc: PointCloud, box: BoundingBox3D, t: SimilarityTransform
) -> tuple[PointCloud, BoundingBox3D]:
    """Scale and rotate an object crop about its box center, then translate.

    Returns:
        The transformed points and box. Point count is unchanged.

    Raises:
        InvalidTransformError: If ``t.scale`` is not positive.
    """
    if not t.scale > 0.0:
        raise InvalidTransformError(f"scale must be positive, got {t.scale}")
    points = as_cloud(pc)
    center = box.center_array
    # p' = p + (sR - I)(p - c) + t keeps the identity transform bit-exact
    linear = t.scale * rotation_z(t.rotation_z) - np.eye(3)
    translation = np.array(t.translation, dtype=np.float64)
    moved = points + (points - center) @ linear.T + translation
    new_box = make_box(
        center + translation,
        box.size_array * t.scale,
        wrap_heading(box.heading + t.rotation_z),
        box.class_id,
    )
    return moved, new_box


def points_in_box(pc: PointCloud, box: BoundingBox3D) -> np.ndarray:
    """Indices of points inside ``box`` (heading-aligned frame, faces inclusive)."""
    points = as_cloud(pc)
    if len(points) == 0:
        return np.zeros(0, dtype=np.int64)
    local = (points - box.center_array) @ rotation_z(box.heading)
    half = box.size_array / 2.0 + FACE_TOLERANCE
    inside = np.all(np.abs(local) <= half, axis=1)
    return np.flatnonzero(inside)


def box_iou(a: BoundingBox3D, b: BoundingBox3D) -> float:
    """Axis-aligned 3D IoU; headings are treated as zero."""
    a_min, a_max = a.extents()
    b_min, b_max = b.extents()
    overlap = np.minimum(a_max, b_max) - np.maximum(a_min, b_min)
    if np.any(overlap <= 0.0):
        return 0.0
    inter = float(np.prod(overlap))
    vol_a = float(np.prod(a_max - a_min))
    vol_b = float(np.prod(b_max - b_min))
    union = vol_a + vol_b - inter
    return min(1.0, max(0.0, inter / union))


def center_distance_sq(a: BoundingBox3D, b: BoundingBox3D) -> float:
    """Squared Euclidean distance between box centers."""
    d = a.center_array - b.center_array
    return float(np.dot(d, d))
