"""Exception hierarchy shared by every coiba module."""


class CoibaError(Exception):
    """Base class for all errors raised by this package."""

    kind = "runtime"


class DimensionError(CoibaError, ValueError):
    kind = "dimension"


class ConfigError(CoibaError, ValueError):
    kind = "config"

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ContractError(CoibaError, ValueError):
    kind = "contract"


class StatsError(CoibaError, ValueError):
    kind = "stats"


class OptimizationError(CoibaError, FloatingPointError):
    kind = "optimization"

    def __init__(self, message, iteration=None):
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class TrainingError(CoibaError, FloatingPointError):
    kind = "training"

    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"{message} (epoch {epoch})"
        super().__init__(message)


class ImputationError(CoibaError, ValueError):
    kind = "imputation"


class ParseError(CoibaError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the problem."""

    kind = "parse"

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)
