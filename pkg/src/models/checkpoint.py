"""
Checkpoint I/O
==============
Versioned little-endian binary layout for a :class:`DetectorState`:

    magic "DCKP" | u16 version | u8 frozen | u8 height_feature
    | u32 num_seeds, knn, hidden, num_proposals, num_classes
    | f64 radius, bn_momentum, bn_eps
    | parameters in declared order (float64)
    | BN running mean then variance per layer (float64)

Round trips are byte-exact.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from ..errors import CorruptFileError, InvalidConfigError, VersionError
from .detector import BN_LAYERS, DetectorConfig, DetectorState, freeze, parameter_shapes

logger = logging.getLogger(__name__)

MAGIC = b"DCKP"
VERSION = 2
CHECKPOINT_SUFFIX = ".ckpt"

_HEADER = struct.Struct("<4sHBB5I3d")


def encode_state(state: DetectorState) -> bytes:
    cfg = state.config
    header = _HEADER.pack(
        MAGIC, VERSION, int(state.frozen), int(cfg.height_feature),
        cfg.num_seeds, cfg.knn, cfg.hidden, cfg.num_proposals, cfg.num_classes,
        cfg.radius, cfg.bn_momentum, cfg.bn_eps,
    )
    parts = [header]
    parts.extend(np.ascontiguousarray(state.params[n], dtype="<f8").tobytes() for n in parameter_shapes(cfg))
    for name in BN_LAYERS:
        parts.append(np.ascontiguousarray(state.bn_mean[name], dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(state.bn_var[name], dtype="<f8").tobytes())
    return b"".join(parts)


def decode_state(data: bytes) -> DetectorState:
    """Parse bytes produced by :func:`encode_state`.

    Raises:
        CorruptFileError: Wrong magic bytes, invalid header or wrong payload size.
        VersionError: Layout version differs from :data:`VERSION`.
    """
    if len(data) < _HEADER.size:
        raise CorruptFileError("checkpoint truncated in header")
    magic, version, frozen, height, s, k, h, m, c, radius, momentum, eps = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptFileError(f"bad checkpoint magic bytes {magic!r}")
    if version != VERSION:
        raise VersionError(f"checkpoint version {version}, expected {VERSION}")
    try:
        if height not in (0, 1):
            raise InvalidConfigError(f"height flag must be 0 or 1, got {height}")
        cfg = DetectorConfig(s, k, h, m, radius, c, momentum, eps, bool(height))
    except InvalidConfigError as e:
        raise CorruptFileError(f"checkpoint header holds an invalid config: {e}") from e

    shapes = parameter_shapes(cfg)
    n_values = sum(int(np.prod(shape)) for shape in shapes.values()) + 2 * len(BN_LAYERS) * h
    expected = _HEADER.size + 8 * n_values
    if len(data) != expected:
        raise CorruptFileError(f"checkpoint has {len(data)} bytes, expected {expected}")

    values = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).astype(np.float64)
    offset = 0

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal offset
        size = int(np.prod(shape))
        arr = values[offset : offset + size].reshape(shape).copy()
        offset += size
        return arr

    params = {name: take(shape) for name, shape in shapes.items()}
    bn_mean: dict[str, np.ndarray] = {}
    bn_var: dict[str, np.ndarray] = {}
    for name in BN_LAYERS:
        bn_mean[name] = take((h,))
        bn_var[name] = take((h,))
    state = DetectorState(cfg, params, bn_mean, bn_var)
    return freeze(state) if frozen else state


def save_checkpoint(state: DetectorState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_state(state))
    logger.info("Saved checkpoint to %s", path)
    return path


def load_checkpoint(path: str | Path) -> DetectorState:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CorruptFileError(f"cannot read checkpoint {path}: {e}") from e
    return decode_state(data)
