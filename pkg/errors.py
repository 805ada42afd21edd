"""
Exception hierarchy for the EFI pipeline.

Every error carries the process exit code the CLI reports for it:
1 for usage/configuration problems, 2 for data and consistency problems.
"""


class EFIError(Exception):
    exit_code = 2


class ConfigError(EFIError):
    exit_code = 1


class FormatError(EFIError):
    """Malformed file contents."""


class DimensionError(EFIError):
    pass


class CapabilityError(EFIError):
    pass


class ConsistencyError(EFIError):
    pass


class DomainError(EFIError, ValueError):
    """A numeric argument outside the operation's domain."""


class DataError(EFIError, ValueError):
    """Not enough (or unusable) data for the requested computation."""


class SchemaError(EFIError):
    pass


class OrphanError(EFIError):
    def __init__(self, offenders):
        self.offenders = sorted(str(o) for o in offenders)
        super().__init__(f"Trees reference unknown plots: {', '.join(self.offenders)}")


class ExtentError(EFIError, ValueError):
    pass


class NumericError(EFIError, ValueError):
    pass


class PartitionError(EFIError):
    pass


class DependencyError(EFIError):
    def __init__(self, stage, path):
        self.stage = stage
        self.path = path
        super().__init__(f"Missing artifact from stage '{stage}': {path}")
