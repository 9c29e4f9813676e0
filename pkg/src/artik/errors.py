"""Exception hierarchy shared across the package."""


class ArtikError(Exception):
    """Base class for all package errors."""


class ConfigError(ArtikError, ValueError):
    pass


class DegenerateRotation(ArtikError):
    """A frame pair carries no rotational information."""


class DegenerateTranslation(ArtikError):
    """A frame pair carries no translational information."""


class BodyMismatch(ArtikError, ValueError):
    pass


class DimensionMismatch(ArtikError, ValueError):
    pass


class SingularInertia(ArtikError, ArithmeticError):
    """An articulated inertia lost positive definiteness."""


class Diverged(ArtikError, ArithmeticError):
    """A rollout left the admissible state region."""


class UnknownPreset(ArtikError, KeyError):
    pass


class LimitViolation(ArtikError, ValueError):
    pass


class NonFiniteLoss(ArtikError, ArithmeticError):
    def __init__(self, message, coordinate=None):
        super().__init__(message)
        self.coordinate = coordinate


class AllRolloutsDiverged(ArtikError, ArithmeticError):
    pass


class ParseError(ArtikError, ValueError):
    pass
