"""Exception hierarchy.

Input problems (bad files, wrong shapes, too few points) derive from
``InputError``; numerical breakdowns (singular systems, failed fits,
divergence) derive from ``NumericalError``. The CLI maps them to exit
codes 1 and 2 respectively.
"""


class InputError(ValueError):
    pass


class ContractViolation(InputError):
    """Arguments violate a documented precondition (shapes, ranges)."""


class SchemaError(InputError):
    """A file does not follow its declared format."""


class NumericalError(ArithmeticError):
    pass


class SingularSystemError(NumericalError):
    pass


class NoModelError(NumericalError):
    pass


class PointAtInfinityError(NumericalError):
    def __init__(self, indices):
        self.indices = list(indices)
        super().__init__(f"points map to infinity at indices {self.indices[:10]}")


class UndefinedMetricError(NumericalError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace or []
