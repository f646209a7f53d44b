"""Exception types shared across the package."""


class GridMMError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(GridMMError, ValueError):
    """Array shapes are inconsistent with the operation's contract."""


class EmptyInputError(GridMMError, ValueError):
    """An operation received an empty collection it cannot handle."""


class MaskError(GridMMError, ValueError):
    """An attention query has no unmasked key to attend to."""


class DomainError(GridMMError, ValueError):
    """A numeric argument lies outside the operation's domain."""


class OutOfBoundsError(GridMMError, ValueError):
    """A point falls outside the map bounds it should be bucketed into."""


class EmptyMemoryError(GridMMError, ValueError):
    """The grid memory bank is empty but a map was requested."""


class VocabularyError(GridMMError, ValueError):
    """A token id is not covered by the vocabulary."""


class MappingError(GridMMError, ValueError):
    """A local candidate view has no matching global waypoint."""


class ReachabilityError(GridMMError, ValueError):
    """No path exists between the requested graph nodes."""


class GenerationError(GridMMError, RuntimeError):
    """Environment generation failed under the given constraints."""


class TrainingDivergedError(GridMMError, RuntimeError):
    """Training produced a non-finite loss."""
