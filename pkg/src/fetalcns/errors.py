"""Exception hierarchy shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class InputRangeError(PipelineError):
    """An index, rectangle or value lies outside the valid range."""


class EmptyInputError(PipelineError):
    """An operation received an empty input it cannot act on."""


class ManifestValidationError(PipelineError):
    """One or more sample records violate manifest invariants."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class GestationalAgeParseError(PipelineError):
    """Gestational-age text does not match '<weeks>w[<days>d]'."""


class ConfigurationError(PipelineError):
    """A configuration value or combination is invalid."""


class PreprocessingError(PipelineError):
    """An image cannot be preprocessed under the configured policy."""


class ShapeError(PipelineError):
    """Array shapes do not match the expected layout."""


class LabelError(PipelineError):
    """A class label or index is outside the task's label set."""


class CheckpointFormatError(PipelineError):
    """A checkpoint file is corrupt or does not follow the format."""


class DegenerateClassError(PipelineError):
    """A class count of zero makes the weight formula undefined."""


class UndefinedMetricError(PipelineError):
    """A metric is undefined for the given inputs (e.g. single-class ROC)."""


class AggregationError(PipelineError):
    """Records cannot be aggregated together (e.g. mixed patients)."""


class GroupingError(PipelineError):
    """Subgroup comparison received an empty or invalid group."""
