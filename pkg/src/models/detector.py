"""
Voting Detector
===============
A small point-cloud voting detector with hand-written forward and backward
passes in double precision.

Pipeline for one cloud::

    FPS(S seeds) -> kNN(k) per seed, centered on the seed (+ point height)
    -> per-point MLP D->H->H (BN + ReLU each) -> max-pool to seed features
    -> vote head H->H->3: vote = seed + offset
    -> FPS(M) over votes -> group votes within radius r
    -> max-pool [seed feature, relative vote position / r] per group
    -> proposal head (H+3)->H->(1 + 3 + 3 + C)

D is 3 for plain offsets and 4 when the height of each neighbour above the
floor (z = 0) is appended, as VoteNet does with its height feature.

Every index selection (seed FPS, kNN, vote FPS, grouping) is recorded in a
:class:`SamplingTrace`. Passing a trace back into :func:`forward` replays
those selections, so two models produce proposals in one-to-one
correspondence. Index selections are constant routing for backprop.

Normalization can use external running statistics (``bn_source``), which is
how a teacher's statistics are shared with other models.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from ..errors import (
    FrozenStateError,
    InsufficientPointsError,
    InvalidCacheError,
    InvalidConfigError,
    ShapeError,
    TraceMismatchError,
)
from ..geometry import PointCloud, SceneTransform, as_cloud

logger = logging.getLogger(__name__)

Mode = Literal["train", "eval"]

BN_LAYERS: tuple[str, ...] = ("enc1", "enc2", "vote1", "prop1")


@dataclass(frozen=True)
class DetectorConfig:
    """Architecture hyperparameters.

    Attributes:
        num_seeds: Seeds picked by farthest point sampling (S).
        knn: Neighbours gathered per seed (k), at most ``num_seeds``.
        hidden: Hidden width (H).
        num_proposals: Proposals per cloud (M), at most ``num_seeds``.
        radius: Vote grouping radius in scene units.
        num_classes: Base plus novel classes (C).
        bn_momentum: Running statistics keep this share of their old value.
        bn_eps: Variance floor inside the normalization.
        height_feature: Append each neighbour's height to its seed-centered offset.
    """

    num_seeds: int = 96
    knn: int = 16
    hidden: int = 64
    num_proposals: int = 96
    radius: float = 0.3
    num_classes: int = 5
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    height_feature: bool = True

    def __post_init__(self) -> None:
        ints = (self.num_seeds, self.knn, self.hidden, self.num_proposals, self.num_classes)
        if min(ints) <= 0 or self.radius <= 0.0 or self.bn_eps <= 0.0:
            raise InvalidConfigError(f"detector sizes must be positive: {self}")
        if self.num_proposals > self.num_seeds or self.knn > self.num_seeds:
            raise InvalidConfigError("num_proposals and knn must not exceed num_seeds")
        if not 0.0 <= self.bn_momentum < 1.0:
            raise InvalidConfigError("bn_momentum must lie in [0, 1)")

    @property
    def input_width(self) -> int:
        return 4 if self.height_feature else 3

    @property
    def output_width(self) -> int:
        return 7 + self.num_classes


def parameter_shapes(cfg: DetectorConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in their declared (checkpoint) order."""
    h = cfg.hidden
    return {
        "enc1.weight": (cfg.input_width, h),
        "enc1.bn.gamma": (h,),
        "enc1.bn.beta": (h,),
        "enc2.weight": (h, h),
        "enc2.bn.gamma": (h,),
        "enc2.bn.beta": (h,),
        "vote1.weight": (h, h),
        "vote1.bn.gamma": (h,),
        "vote1.bn.beta": (h,),
        "vote2.weight": (h, 3),
        "vote2.bias": (3,),
        "prop1.weight": (h + 3, h),
        "prop1.bn.gamma": (h,),
        "prop1.bn.beta": (h,),
        "prop2.weight": (h, cfg.output_width),
        "prop2.bias": (cfg.output_width,),
    }


# ──────────────────────────────────────────────────────────────
# State
# ──────────────────────────────────────────────────────────────

@dataclass(eq=False)
class DetectorState:
    """Learnable parameters plus BN running statistics.

    A frozen state has read-only arrays and refuses any update.
    """

    config: DetectorConfig
    params: dict[str, np.ndarray]
    bn_mean: dict[str, np.ndarray]
    bn_var: dict[str, np.ndarray]
    frozen: bool = False

    def parameter_vector(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in parameter_shapes(self.config)])

    def statistics_vector(self) -> np.ndarray:
        return np.concatenate([np.concatenate([self.bn_mean[n], self.bn_var[n]]) for n in BN_LAYERS])

    def ensure_mutable(self) -> None:
        if self.frozen:
            raise FrozenStateError("state is frozen and cannot be updated")


def init_state(cfg: DetectorConfig, seed: int = 0) -> DetectorState:
    """He-initialized weights; small output layers so initial votes stay near seeds."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith("bn.gamma"):
            params[name] = np.ones(shape)
        elif name.endswith(("bn.beta", "bias")):
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
    params["vote2.weight"] *= 0.05
    params["prop2.weight"] *= 0.1
    params["prop2.bias"][4:7] = np.log(0.5)
    bn_mean = {n: np.zeros(cfg.hidden) for n in BN_LAYERS}
    bn_var = {n: np.ones(cfg.hidden) for n in BN_LAYERS}
    return DetectorState(cfg, params, bn_mean, bn_var)


def copy_state(state: DetectorState) -> DetectorState:
    """Deep, independent, mutable copy."""
    return DetectorState(
        config=state.config,
        params={k: np.array(v, copy=True) for k, v in state.params.items()},
        bn_mean={k: np.array(v, copy=True) for k, v in state.bn_mean.items()},
        bn_var={k: np.array(v, copy=True) for k, v in state.bn_var.items()},
    )


def freeze(state: DetectorState) -> DetectorState:
    """Deep copy whose arrays are read-only and which rejects updates."""
    frozen = copy_state(state)
    for arrays in (frozen.params, frozen.bn_mean, frozen.bn_var):
        for arr in arrays.values():
            arr.flags.writeable = False
    frozen.frozen = True
    return frozen


@dataclass(frozen=True)
class BNStats:
    """Per-layer running mean and variance, detached from any state."""

    mean: dict[str, np.ndarray]
    var: dict[str, np.ndarray]


def export_bn_stats(state: DetectorState) -> BNStats:
    return BNStats(
        mean={n: state.bn_mean[n].copy() for n in BN_LAYERS},
        var={n: state.bn_var[n].copy() for n in BN_LAYERS},
    )


def import_bn_stats(state: DetectorState, stats: BNStats) -> DetectorState:
    """Overwrite ``state``'s running statistics with copies of ``stats``.

    Raises:
        ShapeError: ``stats`` does not fit the state's configuration.
        FrozenStateError: The state is frozen.
    """
    _check_bn_source(state.config, stats)
    state.ensure_mutable()
    for name in BN_LAYERS:
        state.bn_mean[name] = np.array(stats.mean[name], dtype=np.float64, copy=True)
        state.bn_var[name] = np.array(stats.var[name], dtype=np.float64, copy=True)
    return state


def _check_bn_source(cfg: DetectorConfig, stats: BNStats) -> None:
    for name in BN_LAYERS:
        mean, var = stats.mean.get(name), stats.var.get(name)
        if mean is None or var is None or mean.shape != (cfg.hidden,) or var.shape != (cfg.hidden,):
            raise ShapeError(f"BN statistics for layer '{name}' do not match hidden width {cfg.hidden}")


# ──────────────────────────────────────────────────────────────
# Proposals
# ──────────────────────────────────────────────────────────────

def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class Proposal:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    class_probs: tuple[float, ...]
    objectness: float


@dataclass(frozen=True, eq=False)
class ProposalSet:
    """Batched detector outputs for one cloud (M proposals)."""

    center: np.ndarray
    size: np.ndarray
    class_logits: np.ndarray
    objectness_logit: np.ndarray

    def __len__(self) -> int:
        return int(self.center.shape[0])

    @property
    def class_probs(self) -> np.ndarray:
        return softmax(self.class_logits)

    @property
    def objectness(self) -> np.ndarray:
        return sigmoid(self.objectness_logit)

    def __getitem__(self, i: int) -> Proposal:
        return Proposal(
            center=tuple(float(v) for v in self.center[i]),  # type: ignore[arg-type]
            size=tuple(float(v) for v in self.size[i]),  # type: ignore[arg-type]
            class_probs=tuple(float(v) for v in self.class_probs[i]),
            objectness=float(self.objectness[i]),
        )

    def to_list(self) -> list[Proposal]:
        return [self[i] for i in range(len(self))]

    def transformed(self, t: SceneTransform) -> ProposalSet:
        """Map centers and sizes into the frame produced by ``t``."""
        return ProposalSet(t.apply_points(self.center), t.apply_sizes(self.size), self.class_logits, self.objectness_logit)


@dataclass
class ProposalGrads:
    """Upstream gradients on a :class:`ProposalSet`'s outputs."""

    d_center: np.ndarray
    d_size: np.ndarray
    d_class_logits: np.ndarray
    d_objectness_logit: np.ndarray

    @classmethod
    def zeros_like(cls, proposals: ProposalSet) -> ProposalGrads:
        return cls(
            np.zeros_like(proposals.center),
            np.zeros_like(proposals.size),
            np.zeros_like(proposals.class_logits),
            np.zeros_like(proposals.objectness_logit),
        )

    def __add__(self, other: ProposalGrads) -> ProposalGrads:
        return ProposalGrads(
            self.d_center + other.d_center,
            self.d_size + other.d_size,
            self.d_class_logits + other.d_class_logits,
            self.d_objectness_logit + other.d_objectness_logit,
        )

    def scaled(self, factor: float) -> ProposalGrads:
        return ProposalGrads(
            self.d_center * factor,
            self.d_size * factor,
            self.d_class_logits * factor,
            self.d_objectness_logit * factor,
        )


# ──────────────────────────────────────────────────────────────
# Sampling
# ──────────────────────────────────────────────────────────────

def farthest_point_sample(points: np.ndarray, n: int) -> np.ndarray:
    """Greedy FPS starting at index 0; ties resolve to the lower index."""
    count = len(points)
    selected = np.zeros(n, dtype=np.int64)
    dist = np.full(count, np.inf)
    current = 0
    for i in range(n):
        selected[i] = current
        d = np.sum((points - points[current]) ** 2, axis=1)
        dist = np.minimum(dist, d)
        current = int(np.argmax(dist))
    return selected


def knn_indices(queries: np.ndarray, points: np.ndarray, k: int) -> np.ndarray:
    """k nearest points per query; ties resolve to the lower index."""
    d = np.sum((queries[:, None, :] - points[None, :, :]) ** 2, axis=2)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


def group_votes(votes: np.ndarray, centers: np.ndarray, radius: float) -> tuple[np.ndarray, ...]:
    """Vote indices within ``radius`` of each center vote; nearest vote if none."""
    d = np.sqrt(np.sum((votes[centers][:, None, :] - votes[None, :, :]) ** 2, axis=2))
    groups = []
    for row in d:
        members = np.flatnonzero(row <= radius)
        if members.size == 0:
            members = np.array([int(np.argmin(row))])
        groups.append(members.astype(np.int64))
    return tuple(groups)


@dataclass(frozen=True, eq=False)
class SamplingTrace:
    """Index selections of one forward pass."""

    num_points: int
    seed_indices: np.ndarray
    knn_indices: np.ndarray
    proposal_indices: np.ndarray
    groups: tuple[np.ndarray, ...]

    def validate(self, cfg: DetectorConfig) -> None:
        ok = (
            self.seed_indices.shape == (cfg.num_seeds,)
            and self.knn_indices.shape == (cfg.num_seeds, cfg.knn)
            and self.proposal_indices.shape == (cfg.num_proposals,)
            and len(self.groups) == cfg.num_proposals
            and self.seed_indices.min() >= 0
            and self.seed_indices.max() < self.num_points
            and self.knn_indices.min() >= 0
            and self.knn_indices.max() < self.num_points
            and self.proposal_indices.min() >= 0
            and self.proposal_indices.max() < cfg.num_seeds
            and all(g.size > 0 and g.min() >= 0 and g.max() < cfg.num_seeds for g in self.groups)
        )
        if not ok:
            raise TraceMismatchError("sampling trace does not fit this detector configuration")

    def equals(self, other: SamplingTrace) -> bool:
        return (
            self.num_points == other.num_points
            and np.array_equal(self.seed_indices, other.seed_indices)
            and np.array_equal(self.knn_indices, other.knn_indices)
            and np.array_equal(self.proposal_indices, other.proposal_indices)
            and len(self.groups) == len(other.groups)
            and all(np.array_equal(a, b) for a, b in zip(self.groups, other.groups))
        )


# ──────────────────────────────────────────────────────────────
# Forward
# ──────────────────────────────────────────────────────────────

@dataclass
class _BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    batch_stats: bool


@dataclass
class ForwardCache:
    """Intermediates needed by :func:`backward`."""

    mode: Mode
    config: DetectorConfig
    params: dict[str, np.ndarray]
    external_stats: bool
    local: np.ndarray
    seed_xyz: np.ndarray
    pre: dict[str, np.ndarray] = field(default_factory=dict)
    act: dict[str, np.ndarray] = field(default_factory=dict)
    bn: dict[str, _BNCache] = field(default_factory=dict)
    batch_moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    pool_arg: np.ndarray | None = None
    features: np.ndarray | None = None
    votes: np.ndarray | None = None
    proposal_indices: np.ndarray | None = None
    group_features: np.ndarray | None = None
    group_args: np.ndarray | None = None
    size: np.ndarray | None = None

    def routing_signature(self) -> bytes:
        """ReLU masks and max-pool winners; equal signatures mean the same linear region."""
        parts = [(self.pre[n] > 0).tobytes() for n in BN_LAYERS]
        parts.append(self.pool_arg.tobytes())  # type: ignore[union-attr]
        parts.append(self.group_args.tobytes())  # type: ignore[union-attr]
        return b"".join(parts)


@dataclass
class ForwardResult:
    proposals: ProposalSet
    trace: SamplingTrace
    cache: ForwardCache


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def forward(
    state: DetectorState,
    cloud: PointCloud,
    mode: Mode = "eval",
    trace_in: SamplingTrace | None = None,
    bn_source: BNStats | None = None,
) -> ForwardResult:
    """Run the detector on one cloud.

    Args:
        state: Parameters and running statistics.
        cloud: ``(P, 3)`` points, ``P >= num_seeds``.
        mode: ``"train"`` normalizes with batch statistics and updates the running
            statistics; ``"eval"`` normalizes with running statistics.
        trace_in: Replay these index selections instead of sampling.
        bn_source: Normalize with these statistics instead (either mode); the
            state's own running statistics are neither read nor updated.

    Raises:
        InsufficientPointsError: Cloud has fewer than ``num_seeds`` points.
        TraceMismatchError: ``trace_in`` was recorded on a different-size cloud.
        ShapeError: ``bn_source`` does not fit the configuration.
        FrozenStateError: Train mode would update a frozen state's statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = state.config
    xyz = as_cloud(cloud)
    n_points = len(xyz)
    if n_points < cfg.num_seeds:
        raise InsufficientPointsError(f"cloud has {n_points} points, detector needs at least {cfg.num_seeds}")
    if bn_source is not None:
        _check_bn_source(cfg, bn_source)
    elif mode == "train" and state.frozen:
        raise FrozenStateError("train-mode forward would update a frozen state's statistics")
    if trace_in is not None:
        if trace_in.num_points != n_points:
            raise TraceMismatchError(f"trace recorded on {trace_in.num_points} points, cloud has {n_points}")
        trace_in.validate(cfg)
        seed_idx, knn_idx = trace_in.seed_indices, trace_in.knn_indices
    else:
        seed_idx = farthest_point_sample(xyz, cfg.num_seeds)
        knn_idx = knn_indices(xyz[seed_idx], xyz, cfg.knn)

    p = state.params
    S, k, H = cfg.num_seeds, cfg.knn, cfg.hidden
    seed_xyz = xyz[seed_idx]
    neighbours = xyz[knn_idx]
    local = neighbours - seed_xyz[:, None, :]
    if cfg.height_feature:
        local = np.concatenate([local, neighbours[:, :, 2:3]], axis=2)
    local = local.reshape(-1, cfg.input_width)
    cache = ForwardCache(
        mode=mode, config=cfg, params=p, external_stats=bn_source is not None, local=local, seed_xyz=seed_xyz
    )

    def normalize(name: str, x: np.ndarray) -> np.ndarray:
        if mode == "train":
            cache.batch_moments[name] = (x.mean(axis=0), x.var(axis=0))
        if bn_source is not None:
            mean, var, batch = bn_source.mean[name], bn_source.var[name], False
        elif mode == "eval":
            mean, var, batch = state.bn_mean[name], state.bn_var[name], False
        else:
            (mean, var), batch = cache.batch_moments[name], True
        inv_std = 1.0 / np.sqrt(var + cfg.bn_eps)
        xhat = (x - mean) * inv_std
        cache.bn[name] = _BNCache(xhat, inv_std, batch)
        y = p[f"{name}.bn.gamma"] * xhat + p[f"{name}.bn.beta"]
        cache.pre[name] = y
        out = _relu(y)
        cache.act[name] = out
        return out

    # seed features
    a1 = normalize("enc1", local @ p["enc1.weight"])
    a2 = normalize("enc2", a1 @ p["enc2.weight"]).reshape(S, k, H)
    pool_arg = a2.argmax(axis=1)
    features = np.take_along_axis(a2, pool_arg[:, None, :], axis=1)[:, 0, :]

    # votes
    a3 = normalize("vote1", features @ p["vote1.weight"])
    votes = seed_xyz + a3 @ p["vote2.weight"] + p["vote2.bias"]

    # proposals
    if trace_in is not None:
        prop_idx, groups = trace_in.proposal_indices, trace_in.groups
    else:
        prop_idx = farthest_point_sample(votes, cfg.num_proposals)
        groups = group_votes(votes, prop_idx, cfg.radius)
    M = len(prop_idx)
    membership = np.zeros((M, S), dtype=bool)
    for m, members in enumerate(groups):
        membership[m, members] = True
    rel = (votes[None, :, :] - votes[prop_idx][:, None, :]) / cfg.radius
    candidates = np.concatenate([np.broadcast_to(features, (M, S, H)), rel], axis=2)
    candidates = np.where(membership[:, :, None], candidates, -np.inf)
    # winner per (group, channel); first member on ties
    group_args = candidates.argmax(axis=1)
    gf = np.take_along_axis(candidates, group_args[:, None, :], axis=1)[:, 0, :]
    a4 = normalize("prop1", gf @ p["prop1.weight"])
    raw = a4 @ p["prop2.weight"] + p["prop2.bias"]

    size = np.exp(raw[:, 4:7])
    proposals = ProposalSet(
        center=votes[prop_idx] + raw[:, 1:4],
        size=size,
        class_logits=raw[:, 7:].copy(),
        objectness_logit=raw[:, 0].copy(),
    )
    trace = SamplingTrace(n_points, seed_idx, knn_idx, prop_idx, tuple(groups))

    cache.pool_arg = pool_arg
    cache.features = features
    cache.votes = votes
    cache.proposal_indices = prop_idx
    cache.group_features = gf
    cache.group_args = group_args
    cache.size = size

    if mode == "train" and bn_source is None:
        absorb_batch_moments(state, cache)
    return ForwardResult(proposals, trace, cache)


def absorb_batch_moments(state: DetectorState, cache: ForwardCache) -> None:
    """Fold the batch moments seen by a train-mode forward into ``state``'s running statistics.

    A train forward without ``bn_source`` does this itself. One normalized
    with external statistics leaves the state alone, and the caller decides
    whether the moments it observed should still count.

    Raises:
        InvalidCacheError: The cache came from an eval-mode forward.
        FrozenStateError: The state is frozen.
        ShapeError: The cache was produced under another configuration.
    """
    if cache.mode != "train":
        raise InvalidCacheError("only a train-mode forward observes batch moments")
    if cache.config != state.config:
        raise ShapeError("batch moments come from a detector of another configuration")
    state.ensure_mutable()
    mom = state.config.bn_momentum
    for name, (mean, var) in cache.batch_moments.items():
        state.bn_mean[name] = mom * state.bn_mean[name] + (1.0 - mom) * mean
        state.bn_var[name] = mom * state.bn_var[name] + (1.0 - mom) * var


# ──────────────────────────────────────────────────────────────
# Backward
# ──────────────────────────────────────────────────────────────

def _bn_backward(dy: np.ndarray, c: _BNCache, gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dgamma = (dy * c.xhat).sum(axis=0)
    dbeta = dy.sum(axis=0)
    dxhat = dy * gamma
    if not c.batch_stats:
        return dxhat * c.inv_std, dgamma, dbeta
    n = dy.shape[0]
    dx = (c.inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - c.xhat * (dxhat * c.xhat).sum(axis=0))
    return dx, dgamma, dbeta


def backward(
    cache: ForwardCache,
    upstream: ProposalGrads,
    d_votes: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Exact parameter gradients for upstream gradients on the proposal outputs.

    Args:
        cache: Intermediates of a train-mode forward.
        upstream: Gradients on the proposal outputs.
        d_votes: Optional ``(S, 3)`` gradient on the votes themselves, as
            produced by a vote regression loss.

    Raises:
        InvalidCacheError: The cache came from an eval-mode forward.
        ShapeError: ``d_votes`` is not ``(S, 3)``.
    """
    if cache.mode != "train":
        raise InvalidCacheError("backward needs the cache of a train-mode forward")
    cfg, p = cache.config, cache.params
    S, k, H = cfg.num_seeds, cfg.knn, cfg.hidden
    if d_votes is not None and np.shape(d_votes) != (S, 3):
        raise ShapeError(f"vote gradient must be ({S}, 3), got {np.shape(d_votes)}")
    grads: dict[str, np.ndarray] = {}

    def through_bn(name: str, d_act: np.ndarray) -> np.ndarray:
        dy = d_act * (cache.pre[name] > 0)
        dx, grads[f"{name}.bn.gamma"], grads[f"{name}.bn.beta"] = _bn_backward(
            dy, cache.bn[name], p[f"{name}.bn.gamma"]
        )
        return dx

    d_raw = np.concatenate(
        [
            upstream.d_objectness_logit[:, None],
            upstream.d_center,
            upstream.d_size * cache.size,
            upstream.d_class_logits,
        ],
        axis=1,
    )
    a4 = cache.act["prop1"]
    grads["prop2.weight"] = a4.T @ d_raw
    grads["prop2.bias"] = d_raw.sum(axis=0)
    dz4 = through_bn("prop1", d_raw @ p["prop2.weight"].T)
    grads["prop1.weight"] = cache.group_features.T @ dz4  # type: ignore[union-attr]
    d_gf = dz4 @ p["prop1.weight"].T

    d_votes = np.zeros((S, 3)) if d_votes is None else np.array(d_votes, dtype=np.float64)
    np.add.at(d_votes, cache.proposal_indices, upstream.d_center)
    args = cache.group_args
    d_features = np.zeros((S, H))
    np.add.at(d_features, (args[:, :H], np.arange(H)), d_gf[:, :H])  # type: ignore[index]
    d_rel = d_gf[:, H:] / cfg.radius
    np.add.at(d_votes, (args[:, H:], np.arange(3)), d_rel)  # type: ignore[index]
    np.add.at(d_votes, cache.proposal_indices, -d_rel)

    a3 = cache.act["vote1"]
    grads["vote2.weight"] = a3.T @ d_votes
    grads["vote2.bias"] = d_votes.sum(axis=0)
    dz3 = through_bn("vote1", d_votes @ p["vote2.weight"].T)
    grads["vote1.weight"] = cache.features.T @ dz3  # type: ignore[union-attr]
    d_features += dz3 @ p["vote1.weight"].T

    d_a2 = np.zeros((S, k, H))
    np.put_along_axis(d_a2, cache.pool_arg[:, None, :], d_features[:, None, :], axis=1)  # type: ignore[index]
    dz2 = through_bn("enc2", d_a2.reshape(S * k, H))
    grads["enc2.weight"] = cache.act["enc1"].T @ dz2
    dz1 = through_bn("enc1", dz2 @ p["enc2.weight"].T)
    grads["enc1.weight"] = cache.local.T @ dz1

    return {name: grads[name] for name in parameter_shapes(cfg)}


