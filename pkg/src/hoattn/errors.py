"""Exception types shared across the package."""


class HoattnError(Exception):
    pass


class DimensionError(HoattnError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(HoattnError, ValueError):
    """A documented precondition was violated."""


class CapacityError(HoattnError):
    pass


class VocabError(HoattnError, KeyError):
    pass


class FormatError(HoattnError):
    """A binary file did not match its expected layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class OracleError(HoattnError):
    pass


class ConfigError(HoattnError, ValueError):
    pass


class TrainingError(HoattnError, RuntimeError):
    pass
