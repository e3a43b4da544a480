"""Exception types shared across the package."""


class AquanetError(Exception):
    """Base class for all package errors."""


class MalformedTaxonomy(AquanetError):
    pass


class ShapeMismatch(AquanetError):
    pass


class NonFiniteGradient(AquanetError):
    pass


class BadInputShape(AquanetError):
    pass


class ConfigInvalid(AquanetError):
    pass


class AllPixelsIgnored(AquanetError):
    pass


class DivergedLoss(AquanetError):
    pass


class EmptyDataset(AquanetError):
    pass


class IdOutOfRange(AquanetError):
    pass


class EmptyScope(AquanetError):
    pass


class LengthMismatch(AquanetError):
    pass


class DegenerateVariance(AquanetError):
    pass


class NoImagesForLabel(AquanetError):
    pass


class MisalignedPair(AquanetError):
    pass


class SingleClassDataset(AquanetError):
    pass


class InvalidSpec(AquanetError):
    pass


class IoFailure(AquanetError):
    pass
