"""
Scene File I/O
==============
Versioned little-endian binary layout for one scene:

    magic "DCSC" | u16 version | u8 domain code | u16 id length | id (utf-8)
    | u32 point count | u32 box count
    | points  (count x 3 float64)
    | boxes   (count x [i32 class_id, 3 f64 center, 3 f64 size, f64 heading])

Round trips are bit-exact.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import CorruptFileError, VersionError
from ..geometry import BoundingBox3D
from .scene import DOMAIN_CODES, DomainTag, Scene

logger = logging.getLogger(__name__)

MAGIC = b"DCSC"
VERSION = 1
SCENE_SUFFIX = ".scene"

_HEADER = struct.Struct("<4sHBH")
_COUNTS = struct.Struct("<II")
_BOX_DTYPE = np.dtype(
    [("class_id", "<i4"), ("center", "<f8", (3,)), ("size", "<f8", (3,)), ("heading", "<f8")]
)
_CODE_TO_TAG = {code: tag for tag, code in DOMAIN_CODES.items()}


def encode_scene(scene: Scene) -> bytes:
    scene_id = scene.scene_id.encode("utf-8")
    boxes = np.zeros(len(scene.boxes), dtype=_BOX_DTYPE)
    for i, box in enumerate(scene.boxes):
        boxes[i] = (box.class_id, box.center, box.size, box.heading)
    return b"".join(
        [
            _HEADER.pack(MAGIC, VERSION, DOMAIN_CODES[scene.domain_tag], len(scene_id)),
            scene_id,
            _COUNTS.pack(scene.num_points, len(scene.boxes)),
            scene.cloud.astype("<f8").tobytes(),
            boxes.tobytes(),
        ]
    )


def decode_scene(data: bytes) -> Scene:
    """Parse bytes produced by :func:`encode_scene`.

    Raises:
        CorruptFileError: Wrong magic bytes, truncated or oversized payload.
        VersionError: Layout version differs from :data:`VERSION`.
    """
    if len(data) < _HEADER.size:
        raise CorruptFileError("scene file truncated in header")
    magic, version, code, id_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptFileError(f"bad magic bytes {magic!r}")
    if version != VERSION:
        raise VersionError(f"scene file version {version}, expected {VERSION}")
    if code not in _CODE_TO_TAG:
        raise CorruptFileError(f"unknown domain code {code}")
    offset = _HEADER.size
    if len(data) < offset + id_len + _COUNTS.size:
        raise CorruptFileError("scene file truncated in id/counts")
    scene_id = data[offset : offset + id_len].decode("utf-8")
    offset += id_len
    n_points, n_boxes = _COUNTS.unpack_from(data, offset)
    offset += _COUNTS.size

    expected = offset + n_points * 3 * 8 + n_boxes * _BOX_DTYPE.itemsize
    if len(data) != expected:
        raise CorruptFileError(f"scene file has {len(data)} bytes, expected {expected}")

    points = np.frombuffer(data, dtype="<f8", count=n_points * 3, offset=offset)
    offset += n_points * 3 * 8
    raw_boxes = np.frombuffer(data, dtype=_BOX_DTYPE, count=n_boxes, offset=offset)
    boxes = tuple(
        BoundingBox3D(
            center=tuple(float(v) for v in rec["center"]),  # type: ignore[arg-type]
            size=tuple(float(v) for v in rec["size"]),  # type: ignore[arg-type]
            heading=float(rec["heading"]),
            class_id=int(rec["class_id"]),
        )
        for rec in raw_boxes
    )
    cloud = points.reshape(n_points, 3).astype(np.float64)
    return Scene(cloud, boxes, _CODE_TO_TAG[code], scene_id)


def save_scene(scene: Scene, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_scene(scene))
    return path


def load_scene(path: str | Path) -> Scene:
    return decode_scene(Path(path).read_bytes())


def save_corpus(scenes: Iterable[Scene], directory: str | Path) -> list[Path]:
    """Write one file per scene, named after its scene id."""
    directory = Path(directory)
    paths = [save_scene(s, directory / f"{s.scene_id}{SCENE_SUFFIX}") for s in scenes]
    logger.info("Wrote %d scenes to %s", len(paths), directory)
    return paths


def load_corpus(directory: str | Path) -> list[Scene]:
    """Load every scene file in ``directory`` in file-name order."""
    directory = Path(directory)
    paths = sorted(directory.glob(f"*{SCENE_SUFFIX}"))
    return [load_scene(p) for p in paths]
