"""Exception types raised across the package."""


class FlatcheckError(Exception):
    """Base class for all package errors."""


class ExprSyntaxError(FlatcheckError):
    """Malformed expression or model text.

    ``position`` is 1-based within the offending text, ``expected`` names the
    token the parser wanted.
    """

    def __init__(self, message, position=None, expected=None, line=None):
        self.position = position
        self.expected = expected
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if position is not None:
            where.append(f"position {position}")
        text = message if not where else f"{message} ({', '.join(where)})"
        super().__init__(text)


class UnknownSymbol(FlatcheckError):
    def __init__(self, name, position=None):
        self.name = name
        self.position = position
        super().__init__(f"unknown symbol {name!r}" + (f" at position {position}" if position else ""))


class NumericalSingularity(FlatcheckError):
    """A point turned out to be non-generic for some expression.

    ``node`` is the offending node id, ``point_index`` the index of the first
    bad point within the evaluated batch (``None`` for single points).
    """

    def __init__(self, message, node=None, point_index=None, point=None):
        self.node = node
        self.point_index = point_index
        self.point = point
        super().__init__(message)


class DivisionByZero(NumericalSingularity):
    pass


class SingularSolve(NumericalSingularity):
    pass


class DimensionMismatch(FlatcheckError):
    pass


class DependentInputs(FlatcheckError):
    pass


class SingularMass(FlatcheckError):
    pass


class RankNotLocallyConstant(FlatcheckError):
    def __init__(self, message, ranks=None):
        self.ranks = ranks
        super().__init__(message)


class PivotDegenerate(FlatcheckError):
    pass


class VerificationFailed(FlatcheckError):
    pass


class HypothesisViolated(FlatcheckError):
    pass


class NeverNonInvolutive(FlatcheckError):
    """The drift sequence stays involutive up to its final member.

    ``full`` tells whether the final member is the whole tangent space (the
    system is then static feedback linearizable).
    """

    def __init__(self, message, ranks=None, full=False):
        self.ranks = ranks
        self.full = full
        super().__init__(message)


class BadIndices(FlatcheckError):
    pass


class NonInvertibleScramble(FlatcheckError):
    pass


class NonFiniteState(FlatcheckError):
    pass


class SingularJacobian(FlatcheckError):
    pass


class SingularBeta(FlatcheckError):
    pass
