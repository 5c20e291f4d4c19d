"""Exception hierarchy shared by every layer of the package."""


class VehicularQIOError(Exception):
    """Base class for all package errors."""


class ConfigError(VehicularQIOError, ValueError):
    """Invalid configuration or input file.

    ``issues`` holds every problem found, as ``(line, field, message)`` tuples,
    so callers can report all of them at once.
    """

    def __init__(self, message, issues=None):
        super().__init__(message)
        self.issues = list(issues or [])


class ZeroVector(VehicularQIOError, ArithmeticError):
    """A vector that must be normalized has (numerically) zero norm."""


class NonFinite(VehicularQIOError, ArithmeticError):
    """A computation produced NaN or infinity."""


class LengthMismatch(VehicularQIOError, ValueError):
    """Input vectors disagree in length."""


DimMismatch = LengthMismatch


class InfeasibleSimplex(VehicularQIOError, ValueError):
    """The clipped weight simplex is empty."""


class NoFeasiblePoint(VehicularQIOError, ValueError):
    """Projection removed all probability mass."""


class InvalidMarginals(VehicularQIOError, ValueError):
    """Transport marginals are not probability vectors of matching mass."""


class NotConverged(VehicularQIOError, RuntimeError):
    def __init__(self, iterations, marginal_error):
        super().__init__(
            f"Sinkhorn did not converge after {iterations} iterations "
            f"(marginal error {marginal_error:.3e})"
        )
        self.iterations = iterations
        self.marginal_error = marginal_error


class Diverged(VehicularQIOError, RuntimeError):
    """Optimizer energy became non-finite."""


class SingularCovariance(VehicularQIOError, ArithmeticError):
    pass


class SingularSystem(VehicularQIOError, ArithmeticError):
    pass


class InvalidCodingGain(VehicularQIOError, ValueError):
    pass


class InvalidWeights(VehicularQIOError, ValueError):
    pass


class EmptyPathSet(VehicularQIOError, ValueError):
    pass


class EmptyCandidates(VehicularQIOError, ValueError):
    pass


class Overload(VehicularQIOError, ValueError):
    """Queue arrival rate meets or exceeds the service rate."""


class TooFewSamples(VehicularQIOError, ValueError):
    pass


class UnknownScenario(ConfigError):
    pass
