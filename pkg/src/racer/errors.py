"""Exception types raised across the package."""


class RacerError(Exception):
    """Base class for all package errors."""


class InvalidTrack(RacerError):
    pass


class LateralOutOfRange(RacerError):
    pass


class GenerationFailed(RacerError):
    pass


class NearSingularFrenet(RacerError):
    pass


class FactorizationFailed(RacerError):
    pass


class EmptyHistory(RacerError):
    pass


class MaskMismatch(RacerError):
    pass


class DimensionMismatch(RacerError):
    pass


class ConfigError(RacerError):
    pass
