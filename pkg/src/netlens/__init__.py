"""netlens: diagnostics for what a convolutional classifier has learned."""

__version__ = "0.1.0"

from netlens.errors import (  # noqa: F401
    AlignmentError,
    ContractError,
    NetlensError,
    NumericError,
)
