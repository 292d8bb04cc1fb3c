"""
Synthetic Domain Generator
==========================
Procedural two-domain indoor scenes: a flat floor, a few clutter blobs, and
2-5 furniture-like objects sampled on the surface of box or cylinder
primitives. Domains differ by per-class object size multipliers and by the
density of context points, which mimics the object-dimension shift between
two real indoor datasets.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from ..errors import GenerationError, InvalidConfigError
from ..geometry import BoundingBox3D, box_iou, make_box, points_in_box
from .scene import DomainTag, Scene

logger = logging.getLogger(__name__)

Shape = Literal["box", "cylinder"]


@dataclass(frozen=True)
class ClassSpec:
    """Size and sampling distribution of one object class.

    Attributes:
        class_id: Class index.
        name: Human-readable name used in reports.
        shape: Surface primitive the points are sampled from.
        mean_size: Mean (width, length, height).
        spread: Each dimension is scaled by U(1 - spread, 1 + spread).
        density: Surface points per square unit.
    """

    class_id: int
    name: str
    shape: Shape
    mean_size: tuple[float, float, float]
    spread: float = 0.1
    density: float = 40.0

    def __post_init__(self) -> None:
        if any(v <= 0.0 for v in self.mean_size) or self.density <= 0.0:
            raise InvalidConfigError(f"class '{self.name}' needs positive sizes and density", stage="synth")
        if not 0.0 <= self.spread < 1.0:
            raise InvalidConfigError(f"class '{self.name}' spread must lie in [0, 1)", stage="synth")


@dataclass(frozen=True)
class DomainSpec:
    """Generator settings for one domain."""

    tag: DomainTag
    classes: tuple[ClassSpec, ...]
    floor_half_extent: tuple[float, float] = (2.0, 2.0)
    floor_points: int = 160
    clutter_points: int = 40
    clutter_blobs: int = 3
    size_multiplier: dict[int, float] = field(default_factory=dict)
    context_density_multiplier: float = 1.0
    objects_per_scene: tuple[int, int] = (2, 5)
    min_object_points: int = 24
    max_retries: int = 200

    def __post_init__(self) -> None:
        if not self.classes:
            raise InvalidConfigError("domain needs at least one class", stage="synth")
        if any(m <= 0.0 for m in self.size_multiplier.values()) or self.context_density_multiplier <= 0.0:
            raise InvalidConfigError("domain multipliers must be positive", stage="synth")
        lo, hi = self.objects_per_scene
        if not 1 <= lo <= hi:
            raise InvalidConfigError(f"objects_per_scene must be ordered and >= 1, got {self.objects_per_scene}", stage="synth")

    def class_names(self) -> dict[int, str]:
        return {c.class_id: c.name for c in self.classes}


# ──────────────────────────────────────────────────────────────
# Default catalog: 3 base + 2 novel classes
# ──────────────────────────────────────────────────────────────

CATALOG: tuple[ClassSpec, ...] = (
    ClassSpec(0, "cabinet", "box", (0.8, 0.45, 0.9)),
    ClassSpec(1, "chair", "box", (0.5, 0.5, 0.55)),
    ClassSpec(2, "bin", "cylinder", (0.35, 0.35, 0.45)),
    ClassSpec(3, "sofa", "box", (1.1, 0.6, 0.5)),
    ClassSpec(4, "stool", "cylinder", (0.45, 0.45, 0.4)),
)
BASE_CLASSES: tuple[int, ...] = (0, 1, 2)
NOVEL_CLASSES: tuple[int, ...] = (3, 4)


def default_source_spec() -> DomainSpec:
    return DomainSpec(tag=DomainTag.SOURCE, classes=tuple(c for c in CATALOG if c.class_id in BASE_CLASSES))


def default_target_spec(size_shift: float = 1.2, context_shift: float = 1.5) -> DomainSpec:
    return DomainSpec(
        tag=DomainTag.TARGET,
        classes=CATALOG,
        size_multiplier={c: size_shift for c in BASE_CLASSES},
        context_density_multiplier=context_shift,
    )


# ──────────────────────────────────────────────────────────────
# Surface sampling
# ──────────────────────────────────────────────────────────────

def _sample_box_shell(size: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points on the top and four side faces of a box centered at the origin."""
    w, l, h = size
    areas = np.array([w * l, l * h, l * h, w * h, w * h])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    for f, (fixed_axis, sign) in enumerate([(2, 1.0), (0, -1.0), (0, 1.0), (1, -1.0), (1, 1.0)]):
        mask = face == f
        free = [a for a in range(3) if a != fixed_axis]
        pts[mask, fixed_axis] = sign * size[fixed_axis] / 2.0
        pts[mask, free[0]] = u[mask, 0] * size[free[0]]
        pts[mask, free[1]] = u[mask, 1] * size[free[1]]
    return pts


def _sample_cylinder_shell(size: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Points on the side and top of an elliptic cylinder inscribed in the box."""
    rx, ry, h = size[0] / 2.0, size[1] / 2.0, size[2]
    side_area = math.pi * (rx + ry) * h
    top_area = math.pi * rx * ry
    on_top = rng.uniform(size=n) < top_area / (side_area + top_area)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    radial = np.where(on_top, np.sqrt(rng.uniform(size=n)), 1.0)
    z = np.where(on_top, h / 2.0, rng.uniform(-h / 2.0, h / 2.0, size=n))
    return np.stack([rx * radial * np.cos(theta), ry * radial * np.sin(theta), z], axis=1)


def surface_area(shape: Shape, size: np.ndarray) -> float:
    w, l, h = size
    if shape == "box":
        return float(w * l + 2.0 * l * h + 2.0 * w * h)
    rx, ry = w / 2.0, l / 2.0
    return float(math.pi * (rx + ry) * h + math.pi * rx * ry)


def sample_object(cls: ClassSpec, size: np.ndarray, min_points: int, rng: np.random.Generator) -> np.ndarray:
    n = max(min_points, int(round(cls.density * surface_area(cls.shape, size))))
    if cls.shape == "box":
        return _sample_box_shell(size, n, rng)
    return _sample_cylinder_shell(size, n, rng)


# ──────────────────────────────────────────────────────────────
# Scene generation
# ──────────────────────────────────────────────────────────────

def _place_boxes(spec: DomainSpec, rng: np.random.Generator) -> list[tuple[ClassSpec, BoundingBox3D]]:
    lo, hi = spec.objects_per_scene
    count = int(rng.integers(lo, hi + 1))
    ex, ey = spec.floor_half_extent
    placed: list[tuple[ClassSpec, BoundingBox3D]] = []
    for _ in range(count):
        cls = spec.classes[int(rng.integers(len(spec.classes)))]
        mult = spec.size_multiplier.get(cls.class_id, 1.0)
        size = np.array(cls.mean_size) * mult * rng.uniform(1.0 - cls.spread, 1.0 + cls.spread, size=3)
        for _attempt in range(spec.max_retries):
            x = rng.uniform(-ex + size[0] / 2.0, ex - size[0] / 2.0)
            y = rng.uniform(-ey + size[1] / 2.0, ey - size[1] / 2.0)
            box = make_box((x, y, size[2] / 2.0), size, 0.0, cls.class_id)
            if all(box_iou(box, other) == 0.0 for _, other in placed):
                placed.append((cls, box))
                break
        else:
            raise GenerationError(f"could not place a '{cls.name}' without overlap after {spec.max_retries} tries")
    return placed


def _context_points(spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    ex, ey = spec.floor_half_extent
    n_floor = int(round(spec.floor_points * spec.context_density_multiplier))
    floor = np.column_stack(
        [
            rng.uniform(-ex, ex, size=n_floor),
            rng.uniform(-ey, ey, size=n_floor),
            rng.normal(0.0, 0.005, size=n_floor),
        ]
    )
    n_clutter = int(round(spec.clutter_points * spec.context_density_multiplier))
    blobs = np.column_stack(
        [
            rng.uniform(-ex, ex, size=spec.clutter_blobs),
            rng.uniform(-ey, ey, size=spec.clutter_blobs),
            rng.uniform(0.05, 0.3, size=spec.clutter_blobs),
        ]
    )
    owner = rng.integers(spec.clutter_blobs, size=n_clutter)
    clutter = blobs[owner] + rng.normal(0.0, 0.05, size=(n_clutter, 3))
    clutter[:, 0] = np.clip(clutter[:, 0], -ex, ex)
    clutter[:, 1] = np.clip(clutter[:, 1], -ey, ey)
    return np.concatenate([floor, clutter], axis=0)


def synth_scene(spec: DomainSpec, scene_id: str, rng: np.random.Generator) -> Scene:
    placed = _place_boxes(spec, rng)
    context = _context_points(spec, rng)
    # context points never intrude into object volumes
    keep = np.ones(len(context), dtype=bool)
    for _, box in placed:
        keep[points_in_box(context, box)] = False
    parts = [context[keep]]
    for cls, box in placed:
        local = sample_object(cls, box.size_array, spec.min_object_points, rng)
        parts.append(local + box.center_array)
    cloud = np.concatenate(parts, axis=0)
    return Scene(cloud, tuple(box for _, box in placed), spec.tag, scene_id)


def synth_domain(spec: DomainSpec, n_scenes: int, rng: np.random.Generator, prefix: str | None = None) -> list[Scene]:
    """Generate ``n_scenes`` scenes for ``spec``; deterministic given ``rng`` state.

    Raises:
        GenerationError: If objects cannot be placed without overlap.
    """
    prefix = prefix or spec.tag.value
    scenes = [synth_scene(spec, f"{prefix}-{i:04d}", rng) for i in range(n_scenes)]
    n_boxes = sum(len(s.boxes) for s in scenes)
    logger.info("Synthesized %d %s scenes with %d objects", len(scenes), spec.tag.value, n_boxes)
    return scenes
