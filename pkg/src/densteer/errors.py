"""Exception hierarchy shared by all densteer modules."""


class DensteerError(Exception):
    """Base class for every error raised by this package."""

    module = "densteer"

    def __str__(self):
        return f"[{self.module}] {super().__str__()}"


class ScenarioError(DensteerError):
    """A scenario file is missing, malformed, or dimensionally inconsistent."""

    module = "cli"


# expression language

class ParseError(DensteerError):
    module = "exprdsl"

    def __init__(self, message, offset, expected=(), source=""):
        self.offset = offset
        self.expected = frozenset(expected)
        self.source = source
        self.message = message
        exp = ", ".join(sorted(self.expected))
        detail = f" (expected one of: {exp})" if exp else ""
        super().__init__(f"{message} at offset {offset}{detail}")


class UnknownVariableError(ParseError):
    pass


# field calculus

class DomainError(DensteerError):
    module = "vectorfield"


class NumericsError(DensteerError):
    module = "vectorfield"


class CapabilityError(DensteerError):
    module = "vectorfield"


# feedback linearization

class PreconditionError(DensteerError):
    module = "feedlin"


class NoRelativeDegreeError(DensteerError):
    module = "feedlin"


class SingularDecouplingError(DensteerError):
    module = "feedlin"


class IncompleteLinearizationError(DensteerError):
    module = "feedlin"


class NewtonDivergenceError(DensteerError):
    module = "feedlin"


class SingularityError(NumericsError):
    module = "feedlin"


class DomainExitError(DomainError):
    module = "simulate"


# densities

class SingularJacobianError(NumericsError):
    module = "density"


# bridge solver

class CFLViolationError(DensteerError):
    module = "bridge"

    def __init__(self, message, suggested_nt):
        self.suggested_nt = suggested_nt
        super().__init__(f"{message}; try nt >= {suggested_nt}")


class PositivityError(DensteerError):
    module = "bridge"


class PositivityLossError(PositivityError):
    pass


class NoConvergenceError(DensteerError):
    module = "bridge"

    def __init__(self, message, residual_history):
        self.residual_history = list(residual_history)
        super().__init__(message)


class DivisionBlowupError(NumericsError):
    module = "bridge"
