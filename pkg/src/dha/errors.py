"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TopologyError(ValueError):
    """Head counts or query->head maps are inconsistent with the parameters."""


class ConfigError(ValueError):
    """A configuration value violates its invariants."""


class SimilarityUndefinedError(ValueError):
    """Similarity is undefined for the given input (e.g. an all-zero head)."""


class TrainingError(RuntimeError):
    """Training diverged or could not proceed."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed, corrupted, or unsupported."""


class ChecksumMismatchError(CheckpointError):
    """Stored content checksum does not match the payload."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint format version is not supported by this build."""


class VariantMismatchError(CheckpointError):
    """Checkpoint holds a different attention variant than the caller expects."""


class PipelineStageError(RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage, message):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
