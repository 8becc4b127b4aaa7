"""Exception hierarchy. Each family maps to one CLI exit code."""


class FedgateError(Exception):
    exit_code = 1


class ConfigError(FedgateError, ValueError):
    exit_code = 2


class DimensionError(ConfigError):
    """Shape or extent mismatch; the message names the offending axis."""


class DataError(FedgateError):
    exit_code = 3


class FormatError(DataError):
    pass


class PartitionError(DataError):
    pass


class UndefinedMetricError(DataError, ValueError):
    pass


class IncompatibleModelError(FedgateError):
    exit_code = 5


class TrainingError(FedgateError):
    exit_code = 5


class NoDescentError(TrainingError):
    pass


class RoundAbortedError(TrainingError):
    def __init__(self, client_id, reason):
        super().__init__(f"round aborted by client {client_id!r}: {reason}")
        self.client_id = client_id


class ProtocolError(FedgateError):
    exit_code = 4

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
