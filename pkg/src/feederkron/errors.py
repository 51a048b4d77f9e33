"""Exception hierarchy shared by the library and the command line."""


class FeederKronError(Exception):
    """Base class for all errors raised by feederkron."""


class StructuralError(FeederKronError):
    """The network (or a derived structure) violates a structural invariant."""


class ValidationError(FeederKronError):
    """Input data does not match the network or the expected file schema."""


class SolverError(FeederKronError):
    """A linear solve or fixed-point iteration failed."""


class ContractError(FeederKronError):
    """An operation was called outside its documented preconditions."""
