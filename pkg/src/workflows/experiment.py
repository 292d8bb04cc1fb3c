"""
Experiment Workflow
===================
End-to-end desk-scale run on synthetic source/target domains:

    synth -> gtdb -> augment -> pretrain -> finetune -> {baseline, dual-teacher}
    -> eval (base / finetune / dacil rows) -> report + plot data

Also hosts the pipeline config assembly (one dataclass per config section)
and the ablation driver.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Generator, Mapping, Sequence

import numpy as np

from ..config import ENV_PREFIX, check_sections, read_config_file, resolve_section
from ..data.augment import PasteConfig, augment_corpus
from ..data.gtdb import DEFAULT_MIN_POINTS, build_database
from ..data.scene import Scene
from ..data.synth import BASE_CLASSES, CATALOG, NOVEL_CLASSES, default_source_spec, default_target_spec, synth_domain
from ..errors import InvalidConfigError, StageError
from ..evaluation import (
    ClassPartition,
    Detection,
    EvalReport,
    detections_from_proposals,
    evaluate,
    format_metric,
    suppress_overlaps,
)
from ..models.detector import DetectorConfig, DetectorState, forward
from ..models.losses import LossWeights
from ..telemetry import trace_stage
from .trainer import (
    EpochRecord,
    MetricsLog,
    TrainConfig,
    finetune_baseline,
    finetune_sequential,
    pretrain_base,
    stage_rng,
    train_dual_teacher,
)

logger = logging.getLogger(__name__)

MODEL_ROWS = ("base", "finetune", "dacil")
REPORT_FILE = "report.txt"
ABLATION_FILE = "ablation.txt"
LOSS_CURVES_FILE = "loss_curves.csv"
PR_CURVES_FILE = "pr_curves.csv"
METRICS_FILE = "metrics.jsonl"


@dataclass(frozen=True)
class ExperimentConfig:
    """Corpus sizes, domain shift, evaluation thresholds and ablation switches.

    Attributes:
        seed: Master seed.
        seeds: Seeds to run and average; empty means ``(seed,)``.
        n_source: Source scenes.
        n_target_train: Target training scenes (novel labels only).
        n_target_test: Held-out target scenes (all labels).
        size_shift: Target size multiplier for base classes.
        context_shift: Target context density multiplier.
        min_points: Ground-truth database point floor.
        iou_thresholds: Evaluation IoU thresholds.
        nms_iou: Class-agnostic NMS threshold on detections; 0 disables it.
        use_cross_cp: Build X_cross and use it in fine-tuning and dual-teacher batches.
        use_in_cp: Build X_in(source) and X_in(target); otherwise train on raw scenes.
        share_bn: Statistics-level consistency in the dual-teacher stage.
    """

    seed: int = 0
    seeds: tuple[int, ...] = ()
    n_source: int = 40
    n_target_train: int = 40
    n_target_test: int = 20
    size_shift: float = 1.2
    context_shift: float = 1.5
    min_points: int = DEFAULT_MIN_POINTS
    iou_thresholds: tuple[float, ...] = (0.25, 0.5)
    nms_iou: float = 0.25
    use_cross_cp: bool = True
    use_in_cp: bool = True
    share_bn: bool = True

    def __post_init__(self) -> None:
        if min(self.n_source, self.n_target_train, self.n_target_test) < 1:
            raise InvalidConfigError("every corpus needs at least one scene", stage="synth")
        if not self.iou_thresholds or any(not 0.0 < t <= 1.0 for t in self.iou_thresholds):
            raise InvalidConfigError(f"IoU thresholds must lie in (0, 1]: {self.iou_thresholds}", stage="eval")
        if not 0.0 <= self.nms_iou <= 1.0:
            raise InvalidConfigError(f"nms_iou must lie in [0, 1]: {self.nms_iou}", stage="eval")

    @property
    def run_seeds(self) -> tuple[int, ...]:
        return self.seeds or (self.seed,)


@dataclass(frozen=True)
class PipelineConfig:
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    paste: PasteConfig = field(default_factory=PasteConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def with_seed(self, seed: int) -> PipelineConfig:
        return dataclasses.replace(
            self,
            experiment=dataclasses.replace(self.experiment, seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )


SECTIONS: dict[str, type] = {
    "detector": DetectorConfig,
    "paste": PasteConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "experiment": ExperimentConfig,
}


def load_pipeline_config(
    path: str | Path | None = None,
    environ: Mapping[str, str] | None = None,
    prefix: str = ENV_PREFIX,
) -> PipelineConfig:
    """Defaults, then the config file, then ``DACIL_<SECTION>_<KEY>`` variables.

    Raises:
        InvalidConfigError: Unknown section or key, or invalid values.
    """
    values = read_config_file(path)
    check_sections(values, SECTIONS)
    environ = os.environ if environ is None else environ
    resolved = {
        section: resolve_section(cls, section, values.get(section), environ, prefix)
        for section, cls in SECTIONS.items()
    }
    return PipelineConfig(**resolved)


# ──────────────────────────────────────────────────────────────
# Stage plumbing
# ──────────────────────────────────────────────────────────────

@contextmanager
def run_stage(stage: str, **attributes) -> Generator[None, None, None]:
    """Span for ``stage``; any failure inside is re-raised as :class:`StageError`."""
    with trace_stage(stage, **attributes):
        try:
            yield
        except StageError:
            raise
        except Exception as e:
            logger.error("Stage %s failed: %s", stage, e)
            raise StageError(stage, e) from e


def class_partition() -> ClassPartition:
    return ClassPartition(BASE_CLASSES, NOVEL_CLASSES, {c.class_id: c.name for c in CATALOG})


def detect_scenes(state: DetectorState, scenes: Sequence[Scene], nms_iou: float = 0.0) -> list[Detection]:
    """Eval-mode detections per scene, optionally thinned by class-agnostic NMS."""
    detections: list[Detection] = []
    for scene in scenes:
        proposals = forward(state, scene.cloud, mode="eval").proposals
        detections.extend(suppress_overlaps(detections_from_proposals(proposals, scene.scene_id), nms_iou))
    return detections


@dataclass
class Corpora:
    source: list[Scene]
    target_train: list[Scene]
    target_test: list[Scene]
    cross: list[Scene]
    in_source: list[Scene]
    in_target: list[Scene]


def synthesize_domains(exp: ExperimentConfig, seed: int) -> tuple[list[Scene], list[Scene], list[Scene]]:
    """Source scenes, target training scenes (novel labels only) and held-out target scenes."""
    source = synth_domain(default_source_spec(), exp.n_source, stage_rng(seed, "synth/source"), "source")
    target_spec = default_target_spec(exp.size_shift, exp.context_shift)
    target_full = synth_domain(target_spec, exp.n_target_train, stage_rng(seed, "synth/target"), "target")
    target_test = synth_domain(target_spec, exp.n_target_test, stage_rng(seed, "synth/test"), "test")
    # base-class labels are unavailable in the target training split
    target_train = [s.restrict_labels(NOVEL_CLASSES) for s in target_full]
    return source, target_train, target_test


def build_corpora(cfg: PipelineConfig, seed: int) -> Corpora:
    exp = cfg.experiment
    with run_stage("synth", seed=seed):
        source, target_train, target_test = synthesize_domains(exp, seed)

    with run_stage("gtdb", seed=seed):
        source_db = build_database(source, BASE_CLASSES, exp.min_points)
        target_db = build_database(target_train, NOVEL_CLASSES, exp.min_points)

    with run_stage("augment", seed=seed):
        cross: list[Scene] = []
        if exp.use_cross_cp:
            cross = [s for s, _ in augment_corpus(target_train, source_db, "cross", cfg.paste, seed)]
        if exp.use_in_cp:
            in_source = [s for s, _ in augment_corpus(source, source_db, "in-source", cfg.paste, seed)]
            in_target = [s for s, _ in augment_corpus(target_train, target_db, "in-target", cfg.paste, seed)]
        else:
            in_source, in_target = list(source), list(target_train)
    return Corpora(source, target_train, target_test, cross, in_source, in_target)


# ──────────────────────────────────────────────────────────────
# Single seed
# ──────────────────────────────────────────────────────────────

@dataclass
class SeedOutcome:
    seed: int
    reports: dict[str, dict[float, EvalReport]]
    history: list[EpochRecord]
    models: dict[str, DetectorState] = field(default_factory=dict)


def run_seed(cfg: PipelineConfig, seed: int, run_dir: str | Path | None = None) -> SeedOutcome:
    """Full pipeline for one seed."""
    cfg = cfg.with_seed(seed)
    exp = cfg.experiment
    train_cfg = dataclasses.replace(
        cfg.train, share_bn=exp.share_bn, base_classes=BASE_CLASSES, novel_classes=NOVEL_CLASSES
    )
    metrics_path = None
    if run_dir is not None:
        metrics_path = Path(run_dir) / f"seed-{seed}" / METRICS_FILE
        metrics_path.unlink(missing_ok=True)
    metrics = MetricsLog(metrics_path)

    corpora = build_corpora(cfg, seed)

    with run_stage("pretrain", seed=seed):
        base = pretrain_base(corpora.source, train_cfg, cfg.detector, cfg.loss, metrics)
    with run_stage("finetune", seed=seed):
        ft_cfg = train_cfg
        if not exp.use_cross_cp:
            ft_cfg = dataclasses.replace(train_cfg, epochs_finetune=(train_cfg.epochs_finetune[0], 0))
        tuned = finetune_sequential(base.state, corpora.in_source, corpora.cross, ft_cfg, cfg.loss, metrics)
    with run_stage("baseline", seed=seed):
        baseline = finetune_baseline(tuned.state, corpora.target_train, train_cfg, cfg.loss, metrics)
    with run_stage("train", seed=seed):
        dual = train_dual_teacher(tuned.state, corpora.in_target, corpora.cross, train_cfg, cfg.loss, metrics)

    models = {"base": tuned.state, "finetune": baseline.state, "dacil": dual.student}
    reports: dict[str, dict[float, EvalReport]] = {}
    with run_stage("eval", seed=seed):
        partition = class_partition()
        for name, state in models.items():
            detections = detect_scenes(state, corpora.target_test, exp.nms_iou)
            reports[name] = {
                iou: evaluate(detections, corpora.target_test, partition, iou) for iou in exp.iou_thresholds
            }
    return SeedOutcome(seed, reports, list(metrics.records), models)


# ──────────────────────────────────────────────────────────────
# Report
# ──────────────────────────────────────────────────────────────

def _key_iou(iou: float) -> str:
    return f"@{iou:g}"


@dataclass
class ExperimentReport:
    iou_thresholds: tuple[float, ...]
    outcomes: list[SeedOutcome]

    def mean_map(self, model: str, iou: float, part: str) -> float:
        values = [getattr(o.reports[model][iou], f"map_{part}") for o in self.outcomes]
        kept = [v for v in values if not math.isnan(v)]
        return float(np.mean(kept)) if kept else math.nan

    def to_dict(self) -> dict[str, str]:
        out: dict[str, str] = {"seeds": ",".join(str(o.seed) for o in self.outcomes)}
        for outcome in self.outcomes:
            for model in MODEL_ROWS:
                for iou in self.iou_thresholds:
                    report = outcome.reports[model][iou]
                    for key, value in report.to_dict(_key_iou(iou)).items():
                        out[f"seed{outcome.seed}.{model}.{key}"] = value
        for model in MODEL_ROWS:
            for iou in self.iou_thresholds:
                for part in ("base", "novel", "all"):
                    out[f"mean.{model}.map.{part}{_key_iou(iou)}"] = format_metric(self.mean_map(model, iou, part))
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())


def write_loss_curves(rows: Sequence[tuple[int, EpochRecord]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seed", "stage", "epoch", "l_sup", "l_dis", "l_con", "l_total", "lr"])
        for seed, r in rows:
            writer.writerow(
                [seed, r.stage, r.epoch, f"{r.l_sup:.6f}", f"{r.l_dis:.6f}", f"{r.l_con:.6f}", f"{r.l_total:.6f}", f"{r.lr:.6g}"]
            )
    return path


def write_pr_curves(outcomes: Sequence[SeedOutcome], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    partition = class_partition()
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["seed", "model", "iou", "class", "recall", "precision"])
        for outcome in outcomes:
            for model in MODEL_ROWS:
                for iou, report in outcome.reports[model].items():
                    for class_id, (recall, precision) in report.curves.items():
                        for r, p in zip(recall, precision):
                            writer.writerow([outcome.seed, model, f"{iou:g}", partition.name(class_id), f"{r:.6f}", f"{p:.6f}"])
    return path


def read_metrics(path: str | Path) -> list[EpochRecord]:
    with Path(path).open(encoding="utf-8") as f:
        return [EpochRecord(**json.loads(line)) for line in f if line.strip()]


def run_experiment(cfg: PipelineConfig, out_dir: str | Path | None = None) -> ExperimentReport:
    """Run every configured seed and emit the report and plot data.

    Raises:
        StageError: Any stage failed; ``stage`` names it.
    """
    outcomes = [run_seed(cfg, seed, out_dir) for seed in cfg.experiment.run_seeds]
    report = ExperimentReport(cfg.experiment.iou_thresholds, outcomes)
    if out_dir is not None:
        with run_stage("report"):
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / REPORT_FILE).write_text(report.to_text(), encoding="utf-8")
            write_loss_curves([(o.seed, r) for o in outcomes for r in o.history], out / LOSS_CURVES_FILE)
            write_pr_curves(outcomes, out / PR_CURVES_FILE)
            logger.info("Wrote experiment report to %s", out / REPORT_FILE)
    return report


# ──────────────────────────────────────────────────────────────
# Ablation
# ──────────────────────────────────────────────────────────────

ABLATIONS: dict[str, dict[str, bool]] = {
    "full": {},
    "no_cross_cp": {"use_cross_cp": False},
    "no_in_cp": {"use_in_cp": False},
    "no_share_bn": {"share_bn": False},
}


@dataclass
class AblationReport:
    iou_thresholds: tuple[float, ...]
    variants: dict[str, ExperimentReport]

    def to_dict(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for name, report in self.variants.items():
            for iou in self.iou_thresholds:
                for part in ("base", "novel", "all"):
                    out[f"ablation.{name}.map.{part}{_key_iou(iou)}"] = format_metric(report.mean_map("dacil", iou, part))
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in self.to_dict().items())


def run_ablation(
    cfg: PipelineConfig,
    out_dir: str | Path | None = None,
    names: Sequence[str] | None = None,
) -> AblationReport:
    """Full method plus each switch turned off, seed-averaged dual-teacher rows.

    ``names`` restricts the run to a subset of :data:`ABLATIONS`.

    Raises:
        InvalidConfigError: ``names`` holds an unknown variant.
    """
    names = list(ABLATIONS) if names is None else list(names)
    unknown = sorted(set(names) - set(ABLATIONS))
    if unknown:
        raise InvalidConfigError(f"unknown ablation variants: {unknown}", stage="train")
    variants: dict[str, ExperimentReport] = {}
    for name in names:
        switches = ABLATIONS[name]
        logger.info("Ablation variant %s", name)
        variant_cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment, **switches))
        variant_dir = Path(out_dir) / name if out_dir is not None else None
        variants[name] = run_experiment(variant_cfg, variant_dir)
    report = AblationReport(cfg.experiment.iou_thresholds, variants)
    if out_dir is not None:
        path = Path(out_dir) / ABLATION_FILE
        path.write_text(report.to_text(), encoding="utf-8")
        logger.info("Wrote ablation report to %s", path)
    return report


