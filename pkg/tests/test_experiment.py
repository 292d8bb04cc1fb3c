"""
Experiment Tests
================
Tests for corpus construction, stage error tagging and the end-to-end
experiment report on a tiny configuration.
"""

import csv
from pathlib import Path

import pytest

from src.data.scene import DomainTag
from src.data.synth import BASE_CLASSES, NOVEL_CLASSES
from src.errors import InvalidConfigError, StageError
from src.workflows.experiment import (
    LOSS_CURVES_FILE,
    METRICS_FILE,
    PR_CURVES_FILE,
    REPORT_FILE,
    PipelineConfig,
    build_corpora,
    load_pipeline_config,
    read_metrics,
    run_ablation,
    run_experiment,
    run_stage,
)

TINY = """
experiment.n_source = 3
experiment.n_target_train = 6
experiment.n_target_test = 2
experiment.iou_thresholds = 0.25
detector.num_seeds = 16
detector.knn = 8
detector.hidden = 8
detector.num_proposals = 4
train.epochs_base = 1
train.epochs_finetune = 1, 1
train.epochs_dual = 1
"""


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory: pytest.TempPathFactory) -> PipelineConfig:
    path = tmp_path_factory.mktemp("config") / "tiny.conf"
    path.write_text(TINY, encoding="utf-8")
    return load_pipeline_config(path, environ={})


class TestRunStage:
    """Tests for stage tagging of failures."""

    def test_wraps_failures(self) -> None:
        with pytest.raises(StageError) as info:
            with run_stage("train"):
                raise RuntimeError("boom")
        assert info.value.stage == "train"
        assert info.value.exit_code == 15
        assert isinstance(info.value.cause, RuntimeError)

    def test_does_not_rewrap(self) -> None:
        with pytest.raises(StageError) as info:
            with run_stage("eval"):
                with run_stage("augment"):
                    raise ValueError("inner")
        assert info.value.stage == "augment"
        assert info.value.exit_code == 12


class TestBuildCorpora:
    """Tests for the synthetic domains and augmented corpora."""

    def test_corpus_sizes_and_labels(self, tiny_config: PipelineConfig) -> None:
        corpora = build_corpora(tiny_config, seed=0)
        assert len(corpora.source) == 3
        assert len(corpora.target_train) == len(corpora.cross) == len(corpora.in_target) == 6
        assert len(corpora.target_test) == 2
        assert all(s.class_ids() <= set(NOVEL_CLASSES) for s in corpora.target_train)
        assert all(s.domain_tag == DomainTag.CROSS for s in corpora.cross)
        assert all(s.class_ids() <= set(BASE_CLASSES) for s in corpora.in_source)

    def test_seed_changes_scenes(self, tiny_config: PipelineConfig) -> None:
        a = build_corpora(tiny_config, seed=0).source[0]
        b = build_corpora(tiny_config, seed=1).source[0]
        assert not a.equals(b)


class TestRunExperiment:
    """End-to-end runs on a tiny configuration."""

    def test_writes_artifacts(self, tmp_path: Path, tiny_config: PipelineConfig) -> None:
        report = run_experiment(tiny_config, tmp_path)
        for name in (REPORT_FILE, LOSS_CURVES_FILE, PR_CURVES_FILE):
            assert (tmp_path / name).is_file()
        records = read_metrics(tmp_path / "seed-0" / METRICS_FILE)
        assert [r.stage for r in records] == [
            "pretrain", "finetune.in_source", "finetune.cross", "baseline", "train",
        ]
        assert report.outcomes[0].history == records

    def test_report_schema(self, tmp_path: Path, tiny_config: PipelineConfig) -> None:
        values = run_experiment(tiny_config, tmp_path).to_dict()
        assert values["seeds"] == "0"
        for model in ("base", "finetune", "dacil"):
            for part in ("base", "novel", "all"):
                assert f"mean.{model}.map.{part}@0.25" in values
            assert f"seed0.{model}.class_ap.chair@0.25" in values
        for key, value in values.items():
            if key != "seeds":
                assert value in ("nan", "excluded") or 0.0 <= float(value) <= 1.0

    def test_same_seed_same_report(self, tmp_path: Path, tiny_config: PipelineConfig) -> None:
        run_experiment(tiny_config, tmp_path / "a")
        run_experiment(tiny_config, tmp_path / "b")
        assert (tmp_path / "a" / REPORT_FILE).read_bytes() == (tmp_path / "b" / REPORT_FILE).read_bytes()
        assert (tmp_path / "a" / LOSS_CURVES_FILE).read_bytes() == (tmp_path / "b" / LOSS_CURVES_FILE).read_bytes()

    def test_loss_curves_have_seed_column(self, tmp_path: Path, tiny_config: PipelineConfig) -> None:
        run_experiment(tiny_config, tmp_path)
        with (tmp_path / LOSS_CURVES_FILE).open(encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        assert rows and all(r["seed"] == "0" for r in rows)
        assert {r["stage"] for r in rows} >= {"pretrain", "train"}

    def test_ablation_rows(self, tmp_path: Path, tiny_config: PipelineConfig) -> None:
        report = run_ablation(tiny_config, tmp_path)
        assert set(report.variants) == {"full", "no_cross_cp", "no_in_cp", "no_share_bn"}
        assert "ablation.no_share_bn.map.novel@0.25" in report.to_dict()
        assert (tmp_path / "ablation.txt").is_file()

    def test_ablation_subset(self, tiny_config: PipelineConfig) -> None:
        report = run_ablation(tiny_config, names=("full", "no_in_cp"))
        assert list(report.variants) == ["full", "no_in_cp"]

    def test_ablation_unknown_variant_rejected(self, tiny_config: PipelineConfig) -> None:
        with pytest.raises(InvalidConfigError):
            run_ablation(tiny_config, names=("full", "no_teacher"))
