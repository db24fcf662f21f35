"""Exception types shared across the package."""


class VolalignError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatchError(VolalignError):
    pass


class DegenerateInputError(VolalignError):
    pass


class ContractError(VolalignError):
    pass


class EmptyBatchError(VolalignError):
    pass


class EmptyRegionError(VolalignError):
    """Raised when a region mask selects zero patch-grid cells."""


class EmptyBankError(VolalignError):
    """Raised when a retrieval is attempted against an empty bank."""


class UnmappableTextError(VolalignError):
    """Raised by the canonicalizer on an unrecognized sentence."""

    def __init__(self, span):
        super().__init__(f"unmappable text span: {span!r}")
        self.span = span


class ConfigError(VolalignError):
    pass


class CheckpointFormatError(VolalignError):
    pass
