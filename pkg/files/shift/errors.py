"""Named domain errors.

The CLI reports ``error.name`` verbatim, so class names are part of the
public surface.
"""


class ShiftkitError(Exception):
    def __init__(self, message: str = '', **context):
        super().__init__(message)
        self.message = message
        self.context = context

    @property
    def name(self) -> str:
        return type(self).__name__

    def to_dict(self) -> dict:
        out = {'error': self.name, 'message': self.message}
        if self.context:
            out['context'] = {k: v for k, v in self.context.items() if k != 'result'}
        return out


class UsageError(ShiftkitError):
    """Caller supplied inputs that cannot be matched up at all (exit code 2)."""


class ShapeMismatch(UsageError):
    pass


class InputFileError(UsageError):
    pass


class InvalidDistribution(ShiftkitError):
    pass


class InvalidInput(ShiftkitError):
    pass


class AbsoluteContinuityViolation(ShiftkitError):
    pass


class ImplicationViolation(ShiftkitError):
    pass


class NotEquivalent(ShiftkitError):
    pass


class Undetermined(ShiftkitError):
    pass


class InconsistentInputs(ShiftkitError):
    pass


class NoConvergence(ShiftkitError):
    @property
    def result(self):
        return self.context.get('result')


class NotBinary(ShiftkitError):
    pass


class PreconditionFailed(ShiftkitError):
    pass


class NotSufficient(ShiftkitError):
    pass


class NotGroupInvariant(ShiftkitError):
    pass


class NotFJS(ShiftkitError):
    pass


class Inadmissible(ShiftkitError):
    pass


class MissingInput(ShiftkitError):
    pass


class AllRejected(ShiftkitError):
    pass
