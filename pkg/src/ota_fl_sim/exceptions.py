"""Exception types raised by the simulator."""


class SimulatorError(Exception):
    """Base class for all simulator errors."""


class ConfigError(SimulatorError, ValueError):
    """Invalid or contradictory run configuration.

    ``field`` names the offending config key when one can be identified.
    """

    def __init__(self, message, field=None):
        self.field = field
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)


class SchemaError(SimulatorError, ValueError):
    pass


class DataParseError(SimulatorError, ValueError):
    def __init__(self, message, row=None, column=None):
        self.row = row
        self.column = column
        super().__init__(message)


class PartitionError(SimulatorError, ValueError):
    def __init__(self, message, label=None):
        self.label = label
        super().__init__(message)


class DivergenceError(SimulatorError, ArithmeticError):
    """A local solve or aggregation produced a non-finite iterate."""

    def __init__(self, message, epoch=None, round=None):
        self.epoch = epoch
        self.round = round
        super().__init__(message)


class DegenerateUpdateError(SimulatorError, ValueError):
    """All client updates are zero, so the precoding factor is undefined."""


class NoParticipantsError(SimulatorError, RuntimeError):
    pass


class OracleFailedError(SimulatorError, RuntimeError):
    pass
