"""
Finite-Difference Gradient Check
================================
Compares :func:`backward` against central differences of a fixed random
linear functional of the detector outputs and votes. Index selections are pinned by
replaying the sampling trace, so the objective is piecewise smooth in the
parameters; entries whose perturbation crosses a ReLU or max-pool switch are
retried with a smaller step and skipped if the switch persists.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detector import DetectorConfig, DetectorState, ProposalGrads, ProposalSet, backward, copy_state, forward, init_state

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-3
DEFAULT_TOLERANCE = 1e-4
DEFAULT_ENTRY_TOLERANCE = 1e-2
ENTRY_FLOOR_SHARE = 1e-3
MAX_SHRINKS = 3


@dataclass
class TensorCheck:
    name: str
    rel_error: float
    checked: int
    skipped: int
    max_entry_error: float = 0.0


@dataclass
class GradCheckReport:
    seed: int
    tensors: list[TensorCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((t.rel_error for t in self.tensors), default=0.0)

    @property
    def max_entry_error(self) -> float:
        return max((t.max_entry_error for t in self.tensors), default=0.0)

    def passed(self, tolerance: float = DEFAULT_TOLERANCE, entry_tolerance: float = DEFAULT_ENTRY_TOLERANCE) -> bool:
        return (
            all(t.checked > 0 for t in self.tensors)
            and self.max_rel_error < tolerance
            and self.max_entry_error < entry_tolerance
        )


def random_upstream(proposals: ProposalSet, rng: np.random.Generator) -> ProposalGrads:
    return ProposalGrads(
        rng.normal(size=proposals.center.shape),
        rng.normal(size=proposals.size.shape),
        rng.normal(size=proposals.class_logits.shape),
        rng.normal(size=proposals.objectness_logit.shape),
    )


def linear_objective(proposals: ProposalSet, w: ProposalGrads) -> float:
    return float(
        np.sum(w.d_center * proposals.center)
        + np.sum(w.d_size * proposals.size)
        + np.sum(w.d_class_logits * proposals.class_logits)
        + np.sum(w.d_objectness_logit * proposals.objectness_logit)
    )


def relative_error(numeric: np.ndarray, analytic: np.ndarray) -> float:
    denom = np.linalg.norm(numeric) + np.linalg.norm(analytic)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(numeric - analytic) / denom)


def entry_errors(numeric: np.ndarray, analytic: np.ndarray) -> np.ndarray:
    """Per-entry |n - a| / (|n| + |a|).

    The denominator is floored at a small share of the tensor's typical
    entry magnitude, so entries whose true gradient is almost zero are judged
    on absolute error instead.
    """
    if numeric.size == 0:
        return np.zeros(0)
    typical = (np.linalg.norm(numeric) + np.linalg.norm(analytic)) / np.sqrt(numeric.size)
    floor = max(ENTRY_FLOOR_SHARE * typical, 1e-12)
    return np.abs(numeric - analytic) / np.maximum(np.abs(numeric) + np.abs(analytic), floor)


def check_gradients(
    state: DetectorState,
    cloud: np.ndarray,
    rng: np.random.Generator,
    epsilon: float = DEFAULT_EPSILON,
    seed: int = 0,
) -> GradCheckReport:
    """Check every parameter tensor of ``state`` on ``cloud``."""
    work = copy_state(state)
    base = forward(work, cloud, mode="train")
    trace = base.trace
    signature = base.cache.routing_signature()
    w = random_upstream(base.proposals, rng)
    w_votes = rng.normal(size=base.cache.votes.shape)  # type: ignore[union-attr]
    analytic = backward(base.cache, w, d_votes=w_votes)

    def evaluate() -> tuple[float, bytes]:
        result = forward(work, cloud, mode="train", trace_in=trace)
        value = linear_objective(result.proposals, w) + float(np.sum(w_votes * result.cache.votes))
        return value, result.cache.routing_signature()

    report = GradCheckReport(seed=seed)
    for name, param in work.params.items():
        numeric_vals, analytic_vals = [], []
        skipped = 0
        for idx in np.ndindex(param.shape):
            orig = param[idx]
            eps = epsilon
            value = None
            for _ in range(MAX_SHRINKS + 1):
                param[idx] = orig + eps
                f_plus, sig_plus = evaluate()
                param[idx] = orig - eps
                f_minus, sig_minus = evaluate()
                param[idx] = orig
                if sig_plus == signature and sig_minus == signature:
                    value = (f_plus - f_minus) / (2.0 * eps)
                    break
                eps /= 10.0
            if value is None:
                skipped += 1
                continue
            numeric_vals.append(value)
            analytic_vals.append(analytic[name][idx])
        numeric_arr, analytic_arr = np.array(numeric_vals), np.array(analytic_vals)
        err = relative_error(numeric_arr, analytic_arr)
        worst = float(entry_errors(numeric_arr, analytic_arr).max(initial=0.0))
        report.tensors.append(TensorCheck(name, err, len(numeric_vals), skipped, worst))
        logger.debug(
            "grad-check %s: rel error %.3e, worst entry %.3e over %d entries (%d skipped)",
            name, err, worst, len(numeric_vals), skipped,
        )
    return report


def small_config(num_classes: int = 5) -> DetectorConfig:
    """A detector small enough for an exhaustive entry-by-entry check."""
    return DetectorConfig(num_seeds=16, knn=8, hidden=16, num_proposals=4, radius=0.5, num_classes=num_classes)


def run_grad_check(
    seeds: Sequence[int] = (0, 1, 2),
    cfg: DetectorConfig | None = None,
    num_points: int = 64,
    epsilon: float = DEFAULT_EPSILON,
) -> list[GradCheckReport]:
    """Random state and random cloud per seed, checked entry by entry."""
    cfg = cfg or small_config()
    reports = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        state = init_state(cfg, seed=seed)
        cloud = rng.uniform(-1.0, 1.0, size=(num_points, 3))
        report = check_gradients(state, cloud, rng, epsilon=epsilon, seed=seed)
        logger.info(
            "Gradient check seed %d: max relative error %.3e, worst entry %.3e",
            seed, report.max_rel_error, report.max_entry_error,
        )
        reports.append(report)
    return reports
