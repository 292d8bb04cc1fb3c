"""
DA-CIL Workbench
================
Command-line entry point for the desk-scale pipeline: synthetic two-domain
scenes, dual-domain copy-paste, dual-teacher incremental training and mAP
evaluation.

Architecture:
    - src/data: scenes, scene files, ground-truth database, copy-paste, synthetic domains
    - src/models: numpy voting detector, losses, Adam, checkpoints, gradient check
    - src/workflows: training stages and the end-to-end experiment
    - OpenTelemetry spans/metrics exported to Aspire Dashboard when configured

Usage:
    python main.py run-experiment
    python main.py synth --out-dir runs/data
    python main.py eval --checkpoint runs/student.ckpt --scenes-dir runs/data/test --iou 0.25 0.5
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Callable

from dotenv import load_dotenv

# Load .env BEFORE any OTel imports read environment variables
load_dotenv()

from src.config import Settings, get_settings
from src.data.augment import AUGMENT_MODES, augment_corpus, save_records
from src.data.gtdb import build_database, load_database, save_database
from src.data.scene_io import load_corpus, save_corpus
from src.data.synth import BASE_CLASSES, NOVEL_CLASSES
from src.errors import EXIT_CODES, EXIT_UNEXPECTED, EXIT_USAGE, DacilError, InvalidConfigError
from src.evaluation import evaluate, write_report
from src.models.checkpoint import load_checkpoint, save_checkpoint
from src.models.gradcheck import DEFAULT_TOLERANCE, run_grad_check
from src.telemetry import setup_telemetry, shutdown_telemetry
from src.workflows.experiment import (
    LOSS_CURVES_FILE,
    METRICS_FILE,
    REPORT_FILE,
    PipelineConfig,
    class_partition,
    detect_scenes,
    load_pipeline_config,
    read_metrics,
    run_ablation,
    run_experiment,
    run_stage,
    synthesize_domains,
    write_loss_curves,
)
from src.workflows.trainer import (
    MetricsLog,
    TrainConfig,
    finetune_baseline,
    finetune_sequential,
    pretrain_base,
    train_dual_teacher,
)

logger = logging.getLogger("dacil")


# ──────────────────────────────────────────────────────────────
# Helpers
# ──────────────────────────────────────────────────────────────

def _parse_classes(value: str) -> tuple[int, ...]:
    if value == "base":
        return BASE_CLASSES
    if value == "novel":
        return NOVEL_CLASSES
    try:
        return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError as e:
        raise InvalidConfigError(f"--classes must be 'base', 'novel' or a comma list, got {value!r}") from e


def _train_config(cfg: PipelineConfig) -> TrainConfig:
    return dataclasses.replace(
        cfg.train, share_bn=cfg.experiment.share_bn, base_classes=BASE_CLASSES, novel_classes=NOVEL_CLASSES
    )


def _metrics(out_dir: Path) -> MetricsLog:
    return MetricsLog(out_dir / METRICS_FILE)


# ──────────────────────────────────────────────────────────────
# Subcommands
# ──────────────────────────────────────────────────────────────

def cmd_synth(args: argparse.Namespace, cfg: PipelineConfig, out_dir: Path) -> int:
    source, target_train, target_test = synthesize_domains(cfg.experiment, cfg.experiment.seed)
    save_corpus(source, out_dir / "source")
    save_corpus(target_train, out_dir / "target")
    save_corpus(target_test, out_dir / "test")
    print(f"  Scenes: {len(source)} source, {len(target_train)} target, {len(target_test)} test → {out_dir}")
    return 0


def cmd_gtdb(args: argparse.Namespace, cfg: PipelineConfig, out_dir: Path) -> int:
    scenes = load_corpus(args.input_dir)
    db = build_database(scenes, _parse_classes(args.classes), args.min_points or cfg.experiment.min_points)
    save_database(db, out_dir)
    print(f"  Ground-truth database: {len(db)} objects {db.counts()} → {out_dir}")
    return 0


def cmd_augment(args: argparse.Namespace, cfg: PipelineConfig, out_dir: Path) -> int:
    scenes = load_corpus(args.input_dir)
    db = load_database(args.gtdb)
    results = augment_corpus(scenes, db, args.mode, cfg.paste, cfg.experiment.seed)
    save_corpus([s for s, _ in results], out_dir)
    save_records([r for _, r in results], out_dir / "records.jsonl")
    print(f"  Augmented {len(results)} scenes ({args.mode}) → {out_dir}")
    return 0


def cmd_pretrain(args: argparse.Namespace, cfg: PipelineConfig, out_dir: Path) -> int:
    result = pretrain_base(load_corpus(args.scenes_dir), _train_config(cfg), cfg.detector, cfg.loss, _metrics(out_dir))
    save_checkpoint(result.state, out_dir / "base.ckpt")
    return 0


def cmd_finetune(args: argparse.Namespace, cfg: PipelineConfig, out_dir: Path) -> int:
    state = load_checkpoint(args.checkpoint)
    cross = load_corpus(args.cross_dir) if args.cross_dir else []
    result = finetune_sequential(
        state, load_corpus(args.in_source_dir), cross, _train_config(cfg), cfg.loss, _metrics(out_dir)
    )
    save_checkpoint(result.state, out_dir / "finetuned.ckpt")
    print(f"  Fine-tuning phases: {' → '.join(result.stage_log) or 'none'}")
    return 0


def cmd_train(args: argparse.Namespace, cfg: PipelineConfig, out_dir: Path) -> int:
    state = load_checkpoint(args.checkpoint)
    cross = load_corpus(args.cross_dir) if args.cross_dir else []
    result = train_dual_teacher(
        state, load_corpus(args.in_target_dir), cross, _train_config(cfg), cfg.loss, _metrics(out_dir)
    )
    save_checkpoint(result.student, out_dir / "student.ckpt")
    save_checkpoint(result.in_teacher, out_dir / "in_teacher.ckpt")
    return 0


def cmd_baseline(args: argparse.Namespace, cfg: PipelineConfig, out_dir: Path) -> int:
    state = load_checkpoint(args.checkpoint)
    result = finetune_baseline(state, load_corpus(args.scenes_dir), _train_config(cfg), cfg.loss, _metrics(out_dir))
    save_checkpoint(result.state, out_dir / "baseline.ckpt")
    return 0


def cmd_eval(args: argparse.Namespace, cfg: PipelineConfig, out_dir: Path) -> int:
    state = load_checkpoint(args.checkpoint)
    scenes = load_corpus(args.scenes_dir)
    detections = detect_scenes(state, scenes, cfg.experiment.nms_iou)
    partition = class_partition()
    for iou in args.iou or cfg.experiment.iou_thresholds:
        report = evaluate(detections, scenes, partition, iou)
        path = write_report(report, out_dir / f"eval@{iou:g}.txt")
        print(f"  mAP@{iou:g}: base {report.map_base:.4f} | novel {report.map_novel:.4f} | all {report.map_all:.4f} → {path}")
    return 0


def cmd_grad_check(args: argparse.Namespace, cfg: PipelineConfig, out_dir: Path) -> int:
    reports = run_grad_check(seeds=args.seeds)
    lines = []
    for report in reports:
        for t in report.tensors:
            lines.append(
                f"seed{report.seed}.{t.name}={t.rel_error:.3e} worst_entry={t.max_entry_error:.3e} "
                f"checked={t.checked} skipped={t.skipped}"
            )
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "gradcheck.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    worst = max(r.max_rel_error for r in reports)
    worst_entry = max(r.max_entry_error for r in reports)
    passed = all(r.passed(DEFAULT_TOLERANCE) for r in reports)
    print(f"  Gradient check: max relative error {worst:.3e}, worst entry {worst_entry:.3e} ({'PASS' if passed else 'FAIL'})")
    return 0 if passed else EXIT_CODES["grad-check"]


def cmd_report(args: argparse.Namespace, cfg: PipelineConfig, out_dir: Path) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else out_dir
    rows = []
    for i, path in enumerate(sorted(run_dir.rglob(METRICS_FILE))):
        rows.extend((i, record) for record in read_metrics(path))
    write_loss_curves(rows, run_dir / LOSS_CURVES_FILE)
    lines = []
    for path in sorted(run_dir.glob("eval@*.txt")):
        prefix = path.stem.removeprefix("eval")
        for line in path.read_text(encoding="utf-8").splitlines():
            key, _, value = line.partition("=")
            lines.append(f"{key}{prefix}={value}")
    (run_dir / REPORT_FILE).write_text("".join(f"{line}\n" for line in lines), encoding="utf-8")
    print(f"  Report: {len(rows)} epoch records, {len(lines)} metrics → {run_dir}")
    return 0


def cmd_run_experiment(args: argparse.Namespace, cfg: PipelineConfig, out_dir: Path) -> int:
    if args.ablation:
        report = run_ablation(cfg, out_dir)
        for key, value in report.to_dict().items():
            print(f"  {key} = {value}")
        return 0
    result = run_experiment(cfg, out_dir)
    for model in ("base", "finetune", "dacil"):
        for iou in cfg.experiment.iou_thresholds:
            print(
                f"  {model:<9} mAP@{iou:g}: base {result.mean_map(model, iou, 'base'):.4f} | "
                f"novel {result.mean_map(model, iou, 'novel'):.4f} | all {result.mean_map(model, iou, 'all'):.4f}"
            )
    return 0


Command = Callable[[argparse.Namespace, PipelineConfig, Path], int]

COMMANDS: dict[str, tuple[str | None, Command]] = {
    "synth": ("synth", cmd_synth),
    "gtdb": ("gtdb", cmd_gtdb),
    "augment": ("augment", cmd_augment),
    "pretrain": ("pretrain", cmd_pretrain),
    "finetune": ("finetune", cmd_finetune),
    "train": ("train", cmd_train),
    "baseline": ("baseline", cmd_baseline),
    "eval": ("eval", cmd_eval),
    "grad-check": ("grad-check", cmd_grad_check),
    "report": ("report", cmd_report),
    # stages inside the experiment tag their own failures
    "run-experiment": (None, cmd_run_experiment),
}


# ──────────────────────────────────────────────────────────────
# Argument parsing
# ──────────────────────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="Master seed (overrides config)")
    common.add_argument("--config", type=Path, default=None, help="key=value pipeline config file")
    common.add_argument("--out-dir", type=Path, default=None, help="Artifact directory")

    parser = argparse.ArgumentParser(prog="dacil", description="DA-CIL desk-scale workbench", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="Generate source/target/test scene corpora")

    p = sub.add_parser("gtdb", parents=[common], help="Build a ground-truth object database")
    p.add_argument("--input-dir", type=Path, required=True)
    p.add_argument("--classes", default="base", help="'base', 'novel' or comma-separated class ids")
    p.add_argument("--min-points", type=int, default=None)

    p = sub.add_parser("augment", parents=[common], help="Copy-paste augmentation")
    p.add_argument("--input-dir", type=Path, required=True)
    p.add_argument("--gtdb", type=Path, required=True)
    p.add_argument("--mode", choices=AUGMENT_MODES, required=True)

    p = sub.add_parser("pretrain", parents=[common], help="Base pre-training on source scenes")
    p.add_argument("--scenes-dir", type=Path, required=True)

    p = sub.add_parser("finetune", parents=[common], help="Sequential fine-tuning on X_in(source) then X_cross")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--in-source-dir", type=Path, required=True)
    p.add_argument("--cross-dir", type=Path, default=None)

    p = sub.add_parser("train", parents=[common], help="Dual-teacher incremental training")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--in-target-dir", type=Path, required=True)
    p.add_argument("--cross-dir", type=Path, default=None)

    p = sub.add_parser("baseline", parents=[common], help="Fine-tune baseline on novel labels")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scenes-dir", type=Path, required=True)

    p = sub.add_parser("eval", parents=[common], help="mAP evaluation of a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--scenes-dir", type=Path, required=True)
    p.add_argument("--iou", type=float, nargs="+", default=None)

    p = sub.add_parser("grad-check", parents=[common], help="Finite-difference gradient check")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])

    p = sub.add_parser("report", parents=[common], help="Collect eval files and loss curves of a run")
    p.add_argument("--run-dir", type=Path, default=None)

    p = sub.add_parser("run-experiment", parents=[common], help="End-to-end experiment")
    p.add_argument("--ablation", action="store_true", help="Run the ablation variants")
    return parser


# ──────────────────────────────────────────────────────────────
# Main
# ──────────────────────────────────────────────────────────────

def run(argv: list[str] | None = None) -> int:
    """Parse arguments, run one subcommand and return its exit code."""
    args = build_parser().parse_args(argv)
    settings = get_settings()

    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%H:%M:%S",
    )
    setup_telemetry(service_name=settings.otel_service_name, endpoint=settings.otel_endpoint)
    try:
        return _dispatch(args, settings)
    finally:
        shutdown_telemetry()


def _dispatch(args: argparse.Namespace, settings: Settings) -> int:
    try:
        cfg = load_pipeline_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except InvalidConfigError as e:
        logger.error("Invalid configuration: %s", e)
        print(f"\n  ✘ Invalid configuration: {e}")
        return EXIT_USAGE

    out_dir = args.out_dir or Path(settings.out_dir)
    stage, command = COMMANDS[args.command]
    print("\n" + "=" * 70)
    print(f" DA-CIL Workbench: {args.command}")
    print("=" * 70)
    print(f"  Seed: {cfg.experiment.seed}   Output: {out_dir}   Telemetry: {settings.otel_endpoint or 'off'}\n")

    try:
        if stage is None:
            return command(args, cfg, out_dir)
        with run_stage(stage):
            return command(args, cfg, out_dir)
    except DacilError as e:
        logger.error("%s", e)
        print(f"\n  ✘ {e.stage} failed: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        print("\n\n  Interrupted by user.")
        return 0
    except Exception as e:
        logger.exception("Unexpected error")
        print(f"\n  ✘ Error: {type(e).__name__}: {e}")
        return EXIT_UNEXPECTED


def main() -> None:
    """Entry point: parse CLI args and run the subcommand."""
    sys.exit(run())


if __name__ == "__main__":
    main()
