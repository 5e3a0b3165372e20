"""Exception hierarchy shared by all modules."""


class ContractError(ValueError):
    """A caller violated a documented precondition (shapes, ranges, modes)."""


class NumericalError(ArithmeticError):
    """A computation produced NaN/Inf or otherwise left the valid domain."""


class FormatError(ContractError):
    """Base class for binary file format problems."""


class BadMagicError(FormatError):
    pass


class FormatVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class InconsistentFileError(FormatError):
    pass
