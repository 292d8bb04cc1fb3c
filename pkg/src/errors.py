"""
Error Module
============
Typed failures raised across the pipeline.

Every error carries the pipeline stage it belongs to and the process exit
code that ``main.py`` uses when the error escapes a CLI subcommand.
"""

# ──────────────────────────────────────────────────────────────
# Exit codes per stage
# ──────────────────────────────────────────────────────────────

EXIT_CODES: dict[str, int] = {
    "synth": 10,
    "gtdb": 11,
    "augment": 12,
    "pretrain": 13,
    "finetune": 14,
    "train": 15,
    "baseline": 16,
    "eval": 17,
    "grad-check": 18,
    "report": 19,
}

EXIT_USAGE = 2
EXIT_UNEXPECTED = 1


class DacilError(Exception):
    """Base class for all pipeline errors.

    Attributes:
        stage: Pipeline stage the error is attributed to (e.g. "augment").
        exit_code: Process exit code for the stage.
    """

    default_stage = "core"

    def __init__(self, message: str, stage: str | None = None) -> None:
        super().__init__(message)
        self.stage = stage or self.default_stage
        self.exit_code = EXIT_CODES.get(self.stage, EXIT_UNEXPECTED)


# ── geometry / data ─────────────────────────────────────────

class InvalidTransformError(DacilError, ValueError):
    default_stage = "augment"


class InvalidConfigError(DacilError, ValueError):
    default_stage = "core"


class EmptyDatabaseError(DacilError):
    default_stage = "gtdb"


class GenerationError(DacilError):
    default_stage = "synth"


class VersionError(DacilError):
    default_stage = "core"


class CorruptFileError(DacilError):
    default_stage = "core"


# ── detector ────────────────────────────────────────────────

class InsufficientPointsError(DacilError, ValueError):
    default_stage = "train"


class TraceMismatchError(DacilError, ValueError):
    default_stage = "train"


class InvalidCacheError(DacilError):
    default_stage = "train"


class FrozenStateError(DacilError):
    default_stage = "train"


class ShapeError(DacilError, ValueError):
    default_stage = "train"


# ── losses ──────────────────────────────────────────────────

class EmptyProposalsError(DacilError, ValueError):
    default_stage = "train"


class InvalidDistributionError(DacilError, ValueError):
    default_stage = "train"


class AlignmentError(DacilError, ValueError):
    default_stage = "train"


# ── trainer / eval ──────────────────────────────────────────

class EmptyCorpusError(DacilError):
    default_stage = "train"


class BatchCompositionError(DacilError, ValueError):
    default_stage = "train"


class UnknownClassError(DacilError, ValueError):
    default_stage = "eval"


class StageError(DacilError):
    """A failure inside ``run_experiment``, tagged with the stage that failed."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}", stage=stage)
        self.cause = cause
