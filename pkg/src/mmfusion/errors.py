"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when a config object or call argument is out of its valid range."""


class CohortFormatError(ValueError):
    """Raised when a cohort directory on disk cannot be parsed.

    The message names the offending record id whenever one is known.
    """


class CheckpointError(ValueError):
    """Raised when a checkpoint file is missing pieces or has a foreign layout."""


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""
