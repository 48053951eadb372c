"""Exception types raised across the package."""


class AnnotError(Exception):
    """Base class for all package errors."""


class NotARotation(AnnotError, ValueError):
    pass


class DegenerateSixD(AnnotError, ValueError):
    pass


class AmbiguousMean(AnnotError, ValueError):
    pass


class DimensionMismatch(AnnotError, ValueError):
    pass


class WrongPart(AnnotError, ValueError):
    pass


class DegenerateConfiguration(AnnotError, ValueError):
    pass


class InsufficientData(AnnotError, ValueError):
    pass


class TooFewJoints(AnnotError, ValueError):
    pass


class NonFiniteObjective(AnnotError, FloatingPointError):
    def __init__(self, msg, last_params=None, last_value=None):
        super().__init__(msg)
        self.last_params = last_params
        self.last_value = last_value


class MissingPseudoGT(AnnotError, ValueError):
    pass


class EmptyDataset(AnnotError, ValueError):
    pass


class MissingGroundTruth(AnnotError, ValueError):
    pass


class NoVisibleJoints(AnnotError, ValueError):
    pass


class MissingJointRole(AnnotError, KeyError):
    pass
