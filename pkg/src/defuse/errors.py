"""Exception hierarchy.

Validation problems (bad manifests, bad inputs) derive from ``ValidationError``;
failures inside the numerical pipeline derive from ``NumericalError``. The CLI
maps the two families to distinct exit codes.
"""


class DefuseError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(DefuseError):
    pass


class NumericalError(DefuseError):
    pass


class MissingColumn(ValidationError):
    pass


class AlignmentViolation(ValidationError):
    pass


class EmptySource(ValidationError):
    pass


class NonNumericCell(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class FoldTooSmall(ValidationError):
    pass


class EmptyOverlap(ValidationError):
    pass


class DegenerateLabels(NumericalError):
    pass


class FoldMismatch(NumericalError):
    pass


class SingularDesign(NumericalError):
    pass


class NonConvergence(NumericalError):
    pass


class SingularJacobian(NumericalError):
    pass


class IllConditioned(NumericalError):
    pass


class SingularNormalization(NumericalError):
    pass


class UndefinedAUC(NumericalError):
    pass


class TooManyFailures(NumericalError):
    pass
