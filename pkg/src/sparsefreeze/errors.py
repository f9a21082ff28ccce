"""Exception hierarchy. Each class maps to a CLI exit code."""


class SparseFreezeError(Exception):
    exit_code = 1

    def __init__(self, message, module=None):
        super().__init__(message)
        self.module = module


class ConfigError(SparseFreezeError, ValueError):
    exit_code = 2


class DataError(SparseFreezeError, ValueError):
    exit_code = 3


class FormatError(DataError):
    """Malformed file: bad magic, version, truncation or checksum."""


class PlanningError(SparseFreezeError):
    exit_code = 4

    def __init__(self, message, module="freeze-scheduler", best_reduction=None):
        super().__init__(message, module)
        self.best_reduction = best_reduction


class InternalError(SparseFreezeError, RuntimeError):
    exit_code = 5


class UsageError(InternalError):
    """API misuse, e.g. a second backward on one tape."""


class UndefinedSimilarity(DataError):
    """Similarity index with a zero denominator (e.g. constant activations)."""
