"""Exception hierarchy.

Contract and format problems derive from :class:`ContractError` (CLI exit
code 1); numerical failures derive from :class:`NumericError` (exit code 2).
"""


class NetlensError(Exception):
    pass


class ContractError(NetlensError, ValueError):
    """Input violates a documented precondition."""


class FormatError(ContractError):
    """Malformed file container (bad magic, version or header)."""


class UnsupportedError(ContractError):
    """Well-formed file using a feature outside the supported subset."""


class LengthError(ContractError):
    """Payload length disagrees with the declared shape."""


class SpecError(ContractError):
    """Network manifest inconsistent with its weights or layer rules."""


class GraphError(SpecError):
    pass


class ShapeError(ContractError):
    pass


class AlignmentError(ContractError):
    """Heatmaps and masks do not cover the same image ids."""


class NumericError(NetlensError, ArithmeticError):
    pass


class DegenerateSpectrumError(NumericError):
    pass


class DivergentFitError(NumericError):
    pass


class UndefinedScoreError(NumericError):
    """Score is undefined for this input (e.g. an all-zero heatmap)."""
