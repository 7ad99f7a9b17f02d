"""Exception hierarchy.

Every error raised on purpose by the package derives from ``RBDCError``. The
CLI maps the three families below onto its exit codes:

* ``InputError`` subclasses (bad shapes, specs, files, configs) -> 1
* ``VerificationFailure`` -> 2
* ``TrainingError`` / ``NumericError`` -> 3
"""


class RBDCError(Exception):
    pass


class InputError(RBDCError, ValueError):
    """Something handed to the package does not satisfy a precondition."""


class ShapeError(InputError):
    pass


class LayoutError(ShapeError):
    pass


class SpecError(InputError):
    pass


class FormatError(InputError):
    pass


class RuleError(InputError):
    pass


class CompatibilityError(InputError):
    pass


class PlanError(InputError):
    pass


class DomainError(InputError):
    pass


class ConfigError(InputError):
    pass


class VerificationRefused(InputError):
    """Raised when the checkpoints handed to the verifier are not related."""


class StateError(RBDCError, RuntimeError):
    pass


class NumericError(RBDCError, ArithmeticError):
    pass


class TrainingError(RBDCError, RuntimeError):
    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class VerificationFailure(RBDCError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
