"""Exception hierarchy shared by all simulator modules."""


class SemiFedError(Exception):
    """Base class for every error raised by the simulator."""


class DimensionError(SemiFedError, ValueError):
    pass


class DegenerateBatchError(SemiFedError, ValueError):
    pass


class ParameterError(SemiFedError, ValueError):
    pass


class NumericError(SemiFedError, ArithmeticError):
    """A loss or gradient became non-finite.

    ``term`` names the offending loss term (``"ce"``, ``"kl[0]"``, ``"grad"``...).
    """

    def __init__(self, term, message=None):
        self.term = term
        super().__init__(message or f"non-finite value in {term}")


class PruningFloorError(SemiFedError, ValueError):
    def __init__(self, layer, message=None):
        self.layer = layer
        super().__init__(message or f"pruning would remove every unit of layer {layer}")


class DescriptorError(SemiFedError, ValueError):
    pass


class ModeViolationError(SemiFedError, ValueError):
    pass


class PartitionInfeasibleError(SemiFedError, RuntimeError):
    pass


class ConfigError(SemiFedError, ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class UndefinedRatioError(SemiFedError, ZeroDivisionError):
    pass


class InvariantError(SemiFedError, AssertionError):
    pass


class ProtocolError(SemiFedError, RuntimeError):
    """Wraps a module error with the round/client where it happened."""

    def __init__(self, round_index, client_id, cause):
        self.round_index = round_index
        self.client_id = client_id
        self.cause = cause
        where = f"round {round_index}" + (f", client {client_id}" if client_id is not None else "")
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")
