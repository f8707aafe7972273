"""
Exception hierarchy.

Every error raised on purpose by the lab derives from `LabError` and carries the
process exit code the CLI should use for it.
"""


class LabError(Exception):
    """Base class for all expected failures."""

    exit_code = 1


class ConfigError(LabError, ValueError):
    """Invalid or inconsistent experiment configuration."""

    exit_code = 2


class ConfigHashMismatchError(ConfigError):
    """An upstream artifact was produced under a different configuration."""


class MissingArtifactError(LabError, FileNotFoundError):
    """An upstream pipeline stage has not been run."""

    exit_code = 3

    def __init__(self, stage: str, path: str):
        self.stage = stage
        self.path = path
        super().__init__(f"missing artifact from stage '{stage}': {path} (run `{stage}` first)")


class NumericError(LabError, ArithmeticError):
    """Non-finite values in a tensor computation (NaN loss, overflow)."""

    exit_code = 4


class ShapeError(LabError, ValueError):
    pass


class VocabularyError(LabError, ValueError):
    pass


class CorpusError(LabError, ValueError):
    pass


class PromptError(LabError, ValueError):
    pass


class RetrievalError(LabError, ValueError):
    pass


class MetricError(LabError, ValueError):
    pass


class AdapterError(LabError, ValueError):
    pass


class TrainingError(LabError, ValueError):
    pass


class CheckpointError(LabError, ValueError):
    pass
