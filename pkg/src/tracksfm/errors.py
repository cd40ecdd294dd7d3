"""Exception hierarchy shared by all tracksfm modules."""


class SfMError(Exception):
    """Base class for every error raised by tracksfm."""


class ProjectionError(SfMError):
    """A point lies on the principal plane and has no finite projection."""


class ParseError(SfMError):
    """An interchange file is malformed or carries an unsupported version."""


class ReferentialError(SfMError):
    """A record references an entity that does not exist (e.g. a frame id)."""


class ArityError(SfMError):
    """Too few inputs were supplied for an operation."""


class DegeneracyError(SfMError):
    """The input geometry is degenerate for the requested estimate."""


class PointAtInfinityError(DegeneracyError):
    """A triangulated point has a vanishing homogeneous coordinate."""


class GenerationError(SfMError):
    """A synthetic configuration cannot produce a usable scene."""


class SolverError(SfMError):
    """The bundle adjustment linear system could not be solved."""


class ContractError(SfMError):
    """A precondition of an operation was violated by the caller."""


class ReconstructionError(SfMError):
    """The pipeline could not produce a reconstruction."""
