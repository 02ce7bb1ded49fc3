"""Exception hierarchy shared by every qfold module."""


class QFoldError(Exception):
    """Base class for all errors raised by qfold."""


class GeometryError(QFoldError):
    """Degenerate or mismatched point sets."""


class PDBParseError(QFoldError):
    """Malformed PDB input.  ``line`` is the 1-based line number when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ChainNotFoundError(QFoldError):
    pass


class EmptyStructureError(QFoldError):
    pass


class ResidueError(QFoldError):
    """A residue lacks the atoms an operation needs."""


class ContactFileError(QFoldError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class EmptyContactsError(QFoldError):
    """Raised when a reconstruction is attempted with no restraints.

    A dimer with no inter-chain contacts carries no information about the
    relative placement of its chains, so such targets are rejected outright.
    """


class EpisodeError(QFoldError):
    """Misuse of the environment, e.g. stepping a finished episode."""


class NetworkShapeError(QFoldError):
    """Observation or weight shapes do not match the network."""


class NonFiniteError(QFoldError):
    """An energy, loss or gradient became NaN or infinite."""


class MetricError(QFoldError):
    pass


class ConfigError(QFoldError):
    pass


class ManifestError(ConfigError):
    pass
